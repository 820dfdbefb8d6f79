"""Inter-area coupling: parameterizations, bounds, and the network-level
contraction certificate check.

Two coupling modes:

negative_feedback
    psi = identity; the coupling matrix is L = B - M^{-1} B^T M with B free
    only on the strictly lower triangle of the inter-area mask and M the
    stacked diagonal metric. Then M L + L^T M = 0, so the coupling term drops
    out of the metric derivative condition entirely: the stacked system
    inherits the subnet certificates for free, for any magnitude of B.

gw_nonlinear
    psi nonlinear with slope bound g_psi; subnets certified in the identity
    metric with rates lambda_i. A hub-and-spokes (global workspace) adjacency
    stays contracting provided every nonzero coupling block satisfies
    ||L_ij||_2 <= ell = lambda_min / (g_psi * sqrt(p - 1)); training projects
    blocks back to that ball after every update.

``verify_contraction_certificate`` checks max_eig(sym(M J(x))) <= tol both at
sampled states and on the closure of the activation-derivative box (corner
probes), exhaustively when the network is small enough to enumerate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from . import numerics
from .topology import NetworkLayout

CORNER_EXHAUSTIVE_LIMIT = 12


@dataclass(frozen=True)
class NegativeFeedback:
    """epsilon > 0 adds a fixed symmetric component epsilon * S to the derived
    L (imperfect feedback); the exact-cancellation guarantee then no longer
    applies and the certificate must be re-verified numerically."""

    epsilon: float = 0.0

    kind: ClassVar[str] = "negative_feedback"

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class GwNonlinear:
    ell: float            # per-block spectral norm cap; inf disables capping
    g_psi: float = 1.0

    kind: ClassVar[str] = "gw_nonlinear"

    def __post_init__(self):
        if not self.ell > 0.0:
            raise ValueError(f"ell must be positive, got {self.ell}")
        if not self.g_psi > 0.0:
            raise ValueError(f"g_psi must be positive, got {self.g_psi}")


@dataclass(frozen=True)
class CertificateCheck:
    passed: bool
    max_sym_eig: float
    probes: int
    worst_probe: str


def negative_feedback_L(b: np.ndarray, metric_diag: np.ndarray,
                        mask: np.ndarray) -> np.ndarray:
    """L = B - M^{-1} B^T M, entrywise L_rc = B_rc - B_cr * m_c / m_r.

    B must vanish outside the strictly lower triangle of the inter-area mask;
    the derived upper blocks land exactly on the mask's transpose, so L is
    supported on the full mask and satisfies M L + L^T M = 0 up to rounding.
    """
    b = np.asarray(b, dtype=np.float64)
    m = np.asarray(metric_diag, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = b.shape[0]
    if b.shape != (n, n) or mask.shape != (n, n) or m.shape != (n,):
        raise ValueError(f"shape mismatch: B {b.shape}, mask {mask.shape}, metric {m.shape}")
    if np.any(m <= 0.0):
        raise ValueError("metric_diag must be strictly positive")
    support = np.tril(mask, -1)
    if np.any(b[~support] != 0.0):
        raise ValueError("B has entries outside the lower triangle of the mask")
    return b - b.T * (m[None, :] / m[:, None])


def skew_residual(l: np.ndarray, metric_diag: np.ndarray) -> float:
    """max |M L + L^T M| entrywise; exact-zero up to rounding for the
    negative-feedback parameterization."""
    m = np.asarray(metric_diag, dtype=np.float64)
    ml = m[:, None] * np.asarray(l, dtype=np.float64)
    return float(np.abs(ml + ml.T).max())


def gw_block_bound(lambda_min: float, g_psi: float, p: int) -> float:
    """Per-block spectral norm cap keeping a p-subnet hub topology contracting."""
    if p <= 2:
        raise ValueError(f"the block bound needs p > 2 subnets, got p={p}")
    if lambda_min <= 0.0:
        raise ValueError(f"lambda_min must be positive, got {lambda_min}")
    if g_psi <= 0.0:
        raise ValueError(
            f"g_psi must be positive, got {g_psi}; a linear coupling belongs "
            "in negative_feedback mode, which needs no norm cap")
    return lambda_min / (g_psi * np.sqrt(p - 1.0))


def project_gw_blocks(l: np.ndarray, layout: NetworkLayout,
                      ell: float) -> np.ndarray:
    """Scale every off-diagonal block with spectral norm above ell back onto
    the ball; blocks already within the cap are returned bit-identical.

    L must vanish on diagonal blocks. ell = inf leaves everything untouched.
    """
    l = np.asarray(l, dtype=np.float64)
    n = layout.total
    if l.shape != (n, n):
        raise ValueError(f"L must have shape ({n}, {n}), got {l.shape}")
    if not ell > 0.0:
        raise ValueError(f"ell must be positive, got {ell}")
    for i in range(layout.p):
        bi = layout.block(i)
        if l[bi, bi].any():
            raise ValueError(f"L has entries in diagonal block {i}")
    out = l.copy()
    if np.isinf(ell):
        return out
    for i in range(layout.p):
        bi = layout.block(i)
        for j in range(layout.p):
            if i == j:
                continue
            bj = layout.block(j)
            block = l[bi, bj]
            if not block.any():
                continue
            norm = numerics.spectral_norm(block, tol=1e-12)
            if norm > ell * (1.0 + 1e-12):
                out[bi, bj] = block * (ell / norm)
    return out


def verify_contraction_certificate(net, num_states: int = 200, seed: int = 0,
                                   tolerance: float = 1e-8,
                                   corner_samples: int = 32) -> CertificateCheck:
    """Check max_eig(sym(M J(x))) <= tolerance across state and corner probes.

    Probes:
    - ``num_states`` standard-normal states, derivative matrices evaluated
      exactly at each state;
    - the four uniform extremes of the (phi', psi') derivative box;
    - tied saturation patterns (one on/off bit per unit driving both phi' and
      psi'), exhaustively (all 2^N) when the network has at most
      ``CORNER_EXHAUSTIVE_LIMIT`` units, plus ``corner_samples`` random tied
      and ``corner_samples`` random untied patterns at any size.

    Sound because every probe is a feasible slope assignment and the
    certificate must hold over the whole slope box.
    """
    w = net.w_full
    l = net.weights.L
    m = np.asarray(net.metric_diag, dtype=np.float64)
    n = w.shape[0]
    f_act, p_act = net.phi, net.psi
    rng = np.random.default_rng(seed)

    worst_eig = -np.inf
    worst_label = ""
    probes = 0

    def scan(dphi, dpsi, label):
        nonlocal worst_eig, worst_label, probes
        count = dphi.shape[0]
        chunk = max(1, int(6.4e7 / (n * n * 8)))
        for lo in range(0, count, chunk):
            hi = min(lo + chunk, count)
            j = w[None, :, :] * dphi[lo:hi, None, :] + l[None, :, :] * dpsi[lo:hi, None, :]
            idx = np.arange(n)
            j[:, idx, idx] -= 1.0
            mj = m[None, :, None] * j
            s = 0.5 * (mj + np.transpose(mj, (0, 2, 1)))
            eigs = numerics.max_eig_symmetric_batch(s, tol=1e-10)
            k = int(np.argmax(eigs))
            if eigs[k] > worst_eig:
                worst_eig = float(eigs[k])
                worst_label = f"{label}[{lo + k}]"
            probes += hi - lo

    states = rng.standard_normal((num_states, n))
    scan(f_act.derivative(states), p_act.derivative(states), "state")

    flo, fhi = f_act.derivative_range
    plo, phi_ = p_act.derivative_range

    ones = np.ones((1, n))
    for dfv, dpv, tag in ((flo, plo, "lo_lo"), (flo, phi_, "lo_hi"),
                          (fhi, plo, "hi_lo"), (fhi, phi_, "hi_hi")):
        scan(dfv * ones, dpv * ones, f"corner_uniform_{tag}")

    def tied(patterns):
        return flo + (fhi - flo) * patterns, plo + (phi_ - plo) * patterns

    if n <= CORNER_EXHAUSTIVE_LIMIT:
        pats = ((np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
                ).astype(np.float64)
        dphi, dpsi = tied(pats)
        scan(dphi, dpsi, "corner_tied_all")

    if corner_samples > 0:
        pats = (rng.random((corner_samples, n)) < 0.5).astype(np.float64)
        dphi, dpsi = tied(pats)
        scan(dphi, dpsi, "corner_tied_random")
        pf = (rng.random((corner_samples, n)) < 0.5).astype(np.float64)
        pp = (rng.random((corner_samples, n)) < 0.5).astype(np.float64)
        scan(flo + (fhi - flo) * pf, plo + (phi_ - plo) * pp,
             "corner_untied_random")

    return CertificateCheck(passed=bool(worst_eig <= tolerance),
                            max_sym_eig=worst_eig, probes=probes,
                            worst_probe=worst_label)
