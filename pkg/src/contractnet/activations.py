"""Slope-restricted activations.

Every activation here satisfies 0 <= f'(x) <= slope pointwise; certificates
lean on that box, and the verifier probes the closure of the attainable
derivative range, reported by ``derivative_range``.
"""

from __future__ import annotations

import numpy as np


class Activation:
    name = "base"
    slope = 1.0               # upper bound on f'
    derivative_range = (0.0, 1.0)  # closure of attainable derivative values

    def __call__(self, x):
        raise NotImplementedError

    def derivative(self, x):
        raise NotImplementedError

    def __repr__(self):
        return f"<activation {self.name}>"


class _Relu(Activation):
    name = "relu"
    slope = 1.0
    derivative_range = (0.0, 1.0)

    def __call__(self, x):
        return np.maximum(x, 0.0)

    def derivative(self, x):
        # derivative at exactly 0 is taken as 0
        return (np.asarray(x) > 0.0).astype(np.float64)


class _Tanh(Activation):
    name = "tanh"
    slope = 1.0
    derivative_range = (0.0, 1.0)

    def __call__(self, x):
        return np.tanh(x)

    def derivative(self, x):
        t = np.tanh(x)
        return 1.0 - t * t


class _Identity(Activation):
    name = "identity"
    slope = 1.0
    derivative_range = (1.0, 1.0)

    def __call__(self, x):
        return np.asarray(x, dtype=np.float64)

    def derivative(self, x):
        return np.ones_like(np.asarray(x, dtype=np.float64))


RELU = _Relu()
TANH = _Tanh()
IDENTITY = _Identity()

ACTIVATIONS = {a.name: a for a in (RELU, TANH, IDENTITY)}


def get(name: str) -> Activation:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        known = ", ".join(sorted(ACTIVATIONS))
        raise ValueError(f"unknown activation {name!r} (known: {known})") from None
