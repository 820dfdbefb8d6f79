"""Inter-area adjacency, unit layouts, and trainable-parameter counting.

Adjacency is over subnets (areas), not units: a symmetric boolean p x p
matrix with a zero diagonal. Unit-level coupling masks are derived from it
through a NetworkLayout that records where each subnet's units sit in the
stacked state vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Adjacency:
    flags: np.ndarray  # (p, p) bool, symmetric, zero diagonal

    def __post_init__(self):
        f = np.asarray(self.flags, dtype=bool)
        if f.ndim != 2 or f.shape[0] != f.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {f.shape}")
        if f.shape[0] < 2:
            raise ValueError("adjacency needs at least 2 subnets")
        if f.diagonal().any():
            raise ValueError("adjacency diagonal must be zero")
        if not np.array_equal(f, f.T):
            raise ValueError("adjacency must be symmetric")
        f.setflags(write=False)
        object.__setattr__(self, "flags", f)

    @property
    def p(self) -> int:
        return self.flags.shape[0]

    @property
    def num_pairs(self) -> int:
        return int(np.count_nonzero(np.triu(self.flags, 1)))

    def pairs(self):
        """Connected unordered pairs (i, j) with i < j, lexicographic."""
        iu = np.triu_indices(self.p, 1)
        sel = self.flags[iu]
        return [(int(i), int(j)) for i, j in zip(iu[0][sel], iu[1][sel])]

    def connected(self, i: int, j: int) -> bool:
        return bool(self.flags[i, j])


def all_to_all(p: int) -> Adjacency:
    _check_p(p)
    f = ~np.eye(p, dtype=bool)
    return Adjacency(f)


def global_workspace(p: int, center: int = 0) -> Adjacency:
    """One hub subnet connected to every other; no peripheral-peripheral pairs."""
    _check_p(p)
    if not 0 <= center < p:
        raise ValueError(f"center {center} out of range for p={p}")
    f = np.zeros((p, p), dtype=bool)
    f[center, :] = True
    f[:, center] = True
    f[center, center] = False
    return Adjacency(f)


def gw_cluster(p: int, k: int) -> Adjacency:
    """Subnets 0..k-1 form an all-to-all hub cluster; each hub member also
    connects to every peripheral subnet. Pair count: k(k-1)/2 + k(p-k)."""
    _check_p(p)
    if not 1 <= k < p:
        raise ValueError(f"cluster size k={k} must satisfy 1 <= k < p={p}")
    f = np.zeros((p, p), dtype=bool)
    f[:k, :] = True
    f[:, :k] = True
    np.fill_diagonal(f, False)
    return Adjacency(f)


def random_pairs(p: int, density: float, seed: int,
                 mode: str = "bernoulli") -> Adjacency:
    """Random adjacency over the p(p-1)/2 unordered pairs.

    bernoulli: one uniform per pair in lexicographic (i < j) order, kept when
    below ``density``. exact_count: exactly round(density * num_pairs) pairs,
    chosen uniformly without replacement.
    """
    _check_p(p)
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    n_pairs = p * (p - 1) // 2
    rng = np.random.default_rng(seed)
    if mode == "bernoulli":
        keep = rng.random(n_pairs) < density
    elif mode == "exact_count":
        count = int(round(density * n_pairs))
        keep = np.zeros(n_pairs, dtype=bool)
        keep[rng.choice(n_pairs, size=count, replace=False)] = True
    else:
        raise ValueError(f"unknown mode {mode!r}")
    f = np.zeros((p, p), dtype=bool)
    iu = np.triu_indices(p, 1)
    f[iu] = keep
    return Adjacency(f | f.T)


def from_pairs(p: int, pairs) -> Adjacency:
    _check_p(p)
    f = np.zeros((p, p), dtype=bool)
    for i, j in pairs:
        if not (0 <= i < p and 0 <= j < p) or i == j:
            raise ValueError(f"bad pair ({i}, {j}) for p={p}")
        f[i, j] = f[j, i] = True
    return Adjacency(f)


def _check_p(p):
    if p < 2:
        raise ValueError(f"need at least 2 subnets, got p={p}")


def hub_center(adjacency: Adjacency):
    """Index of the hub if the adjacency is exactly hub-and-spokes, else None."""
    degrees = adjacency.flags.sum(axis=0)
    p = adjacency.p
    if adjacency.num_pairs != p - 1:
        return None
    centers = np.flatnonzero(degrees == p - 1)
    if len(centers) != 1:
        return None  # p == 2 star is ambiguous and too small anyway
    return int(centers[0])


@dataclass(frozen=True)
class NetworkLayout:
    """Subnet sizes and where each subnet's units live in the stacked vector."""

    sizes: tuple
    offsets: tuple = field(init=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 1 or any(s < 1 for s in sizes):
            raise ValueError(f"sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)
        offs = np.concatenate([[0], np.cumsum(sizes)])
        object.__setattr__(self, "offsets", tuple(int(o) for o in offs))

    @property
    def p(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return self.offsets[-1]

    def block(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])

    def unit_to_subnet(self) -> np.ndarray:
        return np.repeat(np.arange(self.p), self.sizes)


def build_block_mask(adjacency: Adjacency, layout: NetworkLayout) -> np.ndarray:
    """Unit-level bool mask: True where the unit pair spans two connected,
    distinct subnets. Diagonal blocks are always False."""
    if adjacency.p != layout.p:
        raise ValueError(f"adjacency is over {adjacency.p} subnets, layout has {layout.p}")
    owner = layout.unit_to_subnet()
    return adjacency.flags[np.ix_(owner, owner)]


def count_trainable_params(layout: NetworkLayout, adjacency: Adjacency,
                           input_dim: int, classes: int) -> int:
    """Trainable scalars: input map, readout, both bias vectors, and one free
    n_i x n_j coupling block per connected pair (the skewed partner block is
    derived, not free).

        (input_dim + classes + 1) * N + classes + sum_pairs n_i * n_j
    """
    if adjacency.p != layout.p:
        raise ValueError(f"adjacency is over {adjacency.p} subnets, layout has {layout.p}")
    if input_dim < 1 or classes < 2:
        raise ValueError("need input_dim >= 1 and classes >= 2")
    n = layout.total
    total = (input_dim + classes + 1) * n + classes
    for i, j in adjacency.pairs():
        total += layout.sizes[i] * layout.sizes[j]
    return int(total)
