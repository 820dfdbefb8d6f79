"""Sparse subnetwork sampling and per-area contraction certificates.

A subnet is an n-unit recurrent block x' = -x + W phi(x) + u with phi
slope-restricted to [0, 1]. If the nonnegative matrix |W| has Perron root
below one, then A = -I + |W| is a Hurwitz Metzler matrix and the block is
contracting in a diagonal metric that this module constructs explicitly:

    solve A r = -1,  A^T s = -1   (both solutions strictly positive),
    metric_diag m = s / r.

Then (M A + A^T M) r = -(s + 1) < 0 entrywise with r > 0, so the symmetric
matrix M A + A^T M is negative definite and the certified rate

    rate = -lambda_max( sym(M^{1/2} A M^{-1/2}) )

is strictly positive. The rate is what the metric guarantees for every
activation slope in [0, 1], not an estimate from simulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import CertificationError, ConvergenceError


@dataclass(frozen=True)
class SubnetSpec:
    """Sampling distribution for one subnet's recurrent weights.

    Each of the n*n entries (diagonal included) is kept with probability
    ``sparsity`` and, if kept, drawn uniformly from [-magnitude, magnitude].
    """

    n: int
    sparsity: float
    magnitude: float
    seed: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        if self.magnitude < 0.0:
            raise ValueError(f"magnitude must be >= 0, got {self.magnitude}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class CertifiedSubnet:
    """Recurrent weights plus the diagonal metric certifying their contraction.

    Arrays are frozen read-only: every operation that changes a subnet builds
    a new one and re-derives the certificate.
    """

    weights: np.ndarray     # (n, n)
    metric_diag: np.ndarray  # (n,) strictly positive
    rate: float
    rho: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.metric_diag, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weights must be square, got shape {w.shape}")
        if m.shape != (w.shape[0],):
            raise ValueError(f"metric_diag must have shape ({w.shape[0]},), got {m.shape}")
        if not np.all(m > 0.0):
            raise ValueError("metric_diag must be strictly positive")
        if self.rate <= 0.0:
            raise ValueError(f"certified rate must be positive, got {self.rate}")
        if self.rho >= 1.0 or self.rho < 0.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        w.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "metric_diag", m)

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Certification:
    passed: bool
    rho: float


@dataclass(frozen=True)
class PoolResult:
    subnets: tuple
    attempts: tuple  # draws consumed per slot, parallel to subnets

    @property
    def total_attempts(self) -> int:
        return int(sum(self.attempts))


def sample_subnet(spec: SubnetSpec) -> np.ndarray:
    """Draw one weight matrix.

    Stream layout (single PCG64 generator seeded with spec.seed): first the
    n*n mask uniforms in row-major order, then the n*n value uniforms. The
    layout is part of the reproducibility contract, so tests can replay it.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    mask = rng.random((n, n)) < spec.sparsity
    values = rng.uniform(-spec.magnitude, spec.magnitude, size=(n, n))
    return np.where(mask, values, 0.0)


def certify_weight_magnitudes(w: np.ndarray, tol: float = 1e-10) -> Certification:
    """Restricted-weight-magnitudes test: passes iff rho(|W|) < 1 strictly.

    Draws whose dominant eigenvalues are too close for the radius bracket to
    close within tolerance are rejected outright (no certificate without a
    closed bracket); the last bracket estimate is reported as rho.
    """
    w = np.asarray(w, dtype=np.float64)
    try:
        rho = numerics.spectral_radius_nonneg(np.abs(w), tol=tol)
    except ConvergenceError as stalled:
        return Certification(passed=False, rho=float(stalled.estimate))
    return Certification(passed=bool(rho < 1.0), rho=rho)


def metric_contraction_rate(w: np.ndarray, metric_diag: np.ndarray,
                            tol: float = 1e-10) -> float:
    """Rate certified by a diagonal metric: -lambda_max(sym(M^1/2 A M^-1/2)),
    A = -I + |W|. Positive iff M certifies contraction for every slope in [0, 1].
    """
    w = np.asarray(w, dtype=np.float64)
    m = np.asarray(metric_diag, dtype=np.float64)
    if np.any(m <= 0.0):
        raise ValueError("metric_diag must be strictly positive")
    n = w.shape[0]
    a = -np.eye(n) + np.abs(w)
    d = np.sqrt(m)
    b = (d[:, None] * a) / d[None, :]
    return -numerics.max_eig_symmetric(numerics.sym(b), tol=tol)


def compute_diagonal_metric(w: np.ndarray, tol: float = 1e-10):
    """Diagonal metric and certified rate for weights passing the magnitude test.

    Returns (metric_diag, rate). Raises CertificationError if rho(|W|) >= 1
    or the construction fails numerically.
    """
    w = np.asarray(w, dtype=np.float64)
    cert = certify_weight_magnitudes(w, tol=tol)
    if not cert.passed:
        raise CertificationError(
            f"weights fail the magnitude test: rho(|W|) = {cert.rho:.6g} >= 1")
    n = w.shape[0]
    a = -np.eye(n) + np.abs(w)
    ones = np.ones(n)
    r = numerics.solve_linear(a, -ones)
    s = numerics.solve_linear(a.T, -ones)
    if np.any(r <= 0.0) or np.any(s <= 0.0):
        raise CertificationError(
            "metric construction produced non-positive components "
            f"(min r = {r.min():.3g}, min s = {s.min():.3g})")
    m = s / r
    m = m / np.exp(np.mean(np.log(m)))  # geometric mean 1; rate is scale-free
    rate = metric_contraction_rate(w, m, tol=tol)
    if rate <= 0.0:
        raise CertificationError(f"constructed metric certifies no rate ({rate:.3g})")
    return m, rate


def certify_subnet(w: np.ndarray, tol: float = 1e-10) -> CertifiedSubnet:
    """Magnitude test + diagonal metric, packaged."""
    cert = certify_weight_magnitudes(w, tol=tol)
    if not cert.passed:
        raise CertificationError(
            f"weights fail the magnitude test: rho(|W|) = {cert.rho:.6g} >= 1")
    m, rate = compute_diagonal_metric(w, tol=tol)
    return CertifiedSubnet(weights=w, metric_diag=m, rate=rate, rho=cert.rho)


def identity_metric_rate(w: np.ndarray, slope: float = 1.0,
                         tol: float = 1e-10) -> float:
    """Contraction rate certified in the identity metric: 1 - g * lambda_max(sym|W|).

    Sound for every activation slope matrix 0 <= D <= g I because
    v^T sym(W D) v <= g |v|^T sym(|W|) |v|. Coupling bounds that assume unit
    subnet metrics use this rate.
    """
    w = np.asarray(w, dtype=np.float64)
    if slope <= 0.0:
        raise ValueError(f"slope must be positive, got {slope}")
    return 1.0 - slope * numerics.max_eig_symmetric(numerics.sym(np.abs(w)), tol=tol)


def certify_subnet_identity(w: np.ndarray, slope: float = 1.0,
                            tol: float = 1e-10) -> CertifiedSubnet:
    """Certify in the identity metric (metric_diag all ones).

    Used for coupling modes whose network-level bound requires unit metrics.
    Passing implies rho(|W|) < 1 as well, since the Perron root of |W| is
    bounded by lambda_max(sym(|W|)).
    """
    w = np.asarray(w, dtype=np.float64)
    rate = identity_metric_rate(w, slope=slope, tol=tol)
    if rate <= 0.0:
        raise CertificationError(
            f"weights fail identity-metric certification: rate = {rate:.6g}")
    rho = numerics.spectral_radius_nonneg(np.abs(w), tol=tol)
    return CertifiedSubnet(weights=w, metric_diag=np.ones(w.shape[0]),
                           rate=rate, rho=rho)


def generate_certified_pool(specs, metric: str = "diagonal",
                            max_attempts: int = 100,
                            tol: float = 1e-10) -> PoolResult:
    """Sample subnets with rejection until each slot certifies.

    Rejection advances the slot's seed by +1 per failed draw, so attempt k of
    slot i is exactly sample_subnet(replace(spec_i, seed=spec_i.seed + k)).
    ``metric`` selects the certificate route: "diagonal" or "identity".
    """
    if metric not in ("diagonal", "identity"):
        raise ValueError(f"unknown metric route {metric!r}")
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    subnets = []
    attempts = []
    for i, spec in enumerate(specs):
        done = None
        for k in range(max_attempts):
            w = sample_subnet(SubnetSpec(spec.n, spec.sparsity, spec.magnitude,
                                         spec.seed + k))
            try:
                if metric == "diagonal":
                    done = certify_subnet(w, tol=tol)
                else:
                    done = certify_subnet_identity(w, tol=tol)
            except CertificationError:
                continue
            attempts.append(k + 1)
            break
        if done is None:
            raise CertificationError(
                f"subnet slot {i}: no certifiable draw in {max_attempts} attempts "
                f"(n={spec.n}, sparsity={spec.sparsity}, magnitude={spec.magnitude})")
        subnets.append(done)
    return PoolResult(subnets=tuple(subnets), attempts=tuple(attempts))


def ablate_unit(subnet: CertifiedSubnet, k: int) -> CertifiedSubnet:
    """Remove unit k from a subnet and re-derive its certificate.

    Deleting a row/column of a nonnegative matrix cannot raise the Perron
    root, so certification survives; the metric keeps its remaining entries
    and the rate is recomputed under that restricted metric.
    """
    n = subnet.n
    if n <= 1:
        raise ValueError("cannot ablate the last unit of a subnet")
    if not 0 <= k < n:
        raise ValueError(f"unit index {k} out of range for n={n}")
    keep = [i for i in range(n) if i != k]
    w = subnet.weights[np.ix_(keep, keep)]
    m = subnet.metric_diag[keep]
    rho = numerics.spectral_radius_nonneg(np.abs(w))
    if rho > subnet.rho + 1e-9:
        raise CertificationError(
            f"Perron root rose under unit deletion ({subnet.rho:.6g} -> {rho:.6g})")
    rate = metric_contraction_rate(w, m)
    return CertifiedSubnet(weights=w, metric_diag=m, rate=rate, rho=rho)
