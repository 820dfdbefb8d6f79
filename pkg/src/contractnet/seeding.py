"""Seed-stream conventions.

Every stochastic component draws from numpy's PCG64 via ``default_rng``.
Independent components get independent streams by deriving their seed from
``(root_seed, stream id, *indices)`` through ``SeedSequence``, so adding a
consumer never perturbs the draws of another and any point in a run can be
reproduced without serializing generator state.
"""

from __future__ import annotations

import numpy as np

SUBNET = 0
ADJACENCY = 1
COUPLING_INIT = 2
LAYER_INIT = 3
SHUFFLE = 4
VERIFIER = 5
DATA = 6


def derive_seed(root_seed: int, stream_id: int, *indices: int) -> int:
    """Collapse (root, stream, indices...) to a single uint64 seed."""
    seq = np.random.SeedSequence([root_seed, stream_id, *indices])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def stream(root_seed: int, stream_id: int, *indices: int) -> np.random.Generator:
    return np.random.default_rng([root_seed, stream_id, *indices])
