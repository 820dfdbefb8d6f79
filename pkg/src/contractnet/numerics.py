"""Dense linear-algebra kernel: power-iteration eigenvalue/norm estimates and
Gaussian elimination.

All certificate math in this package runs through these four routines rather
than a LAPACK eigensolver, so the certification path has no dependency beyond
numpy array arithmetic and can be cross-checked against a full decomposition
in the tests.

Conventions: matrices are 2-D float64 ndarrays, C order. ``tol`` is an
absolute tolerance on the returned scalar. Iteration caps raise
``ConvergenceError`` carrying the last estimate.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, SingularMatrixError

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000

# Deterministic start vectors. Two distinct seeds: the second pass guards
# against a start vector accidentally orthogonal to the dominant eigenspace.
_START_SEEDS = (0x5EED0, 0x5EED1)


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetric part (a + a.T) / 2."""
    a = _as_matrix(a, "a", square=True)
    return 0.5 * (a + a.T)


def _as_matrix(a, name, square=False):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    if square and a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _is_triangular(a):
    n = a.shape[0]
    iu = np.triu_indices(n, 1)
    if not a[iu].any():
        return True
    il = np.tril_indices(n, -1)
    return not a[il].any()


def _start_vector(n, seed):
    v = np.random.default_rng(seed).standard_normal(n)
    return v / float(np.sqrt(v @ v))


def _cyclic_core(a):
    """Iteratively drop nodes with an all-zero row or column.

    Such nodes lie on no directed cycle and cannot carry the Perron root
    (the spectrum is that of the surviving principal block plus zeros).
    A DAG reduces to the empty matrix, so permuted-triangular inputs get
    rho = 0 exactly instead of a defective, slowly-converging iteration.
    """
    sub = a
    while sub.size:
        keep = sub.any(axis=1) & sub.any(axis=0)
        if keep.all():
            break
        sub = sub[np.ix_(keep, keep)]
    return sub


def spectral_radius_nonneg(a: np.ndarray, tol: float = DEFAULT_TOL,
                           max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Perron root of an entrywise-nonnegative square matrix.

    Power iteration on a + cI with a scale-aware shift c = 0.01 * max row
    sum; the shift breaks sign-flip cycles (eigenvalues tied in modulus with
    opposite sign) and keeps the iterate strictly positive, which gives
    Collatz ratio brackets min_i (y_i / x_i) <= rho + c <= max_i (y_i / x_i).
    Stops when the bracket closes to ``tol``, or when the Rayleigh estimate
    stalls below 0.001 * tol for three consecutive iterations (reducible
    inputs, where the bracket cannot close). Exactly triangular input short-
    circuits to max(diag): its Perron root may be defective, and power
    iteration converges only algebraically there.
    """
    a = _as_matrix(a, "a", square=True)
    if np.any(a < 0.0):
        raise ValueError("matrix has negative entries")
    n = a.shape[0]
    if n == 1:
        return float(a[0, 0])
    if not a.any():
        return 0.0
    if _is_triangular(a):
        return float(a.diagonal().max())
    a = _cyclic_core(a)
    if a.size == 0:
        return 0.0
    n = a.shape[0]
    if n == 1:
        return float(a[0, 0])
    if _is_triangular(a):
        return float(a.diagonal().max())

    shift = 0.01 * float(a.sum(axis=1).max())
    x = np.full(n, 1.0 / np.sqrt(n))
    est = 0.0
    stalled = 0
    for it in range(max_iter):
        y = a @ x + shift * x
        # Coordinates that underflow to ~0 belong to subdominant blocks (they
        # decayed); the Collatz bracket stays valid on the surviving support.
        pos = x > 1e-250
        ratios = y[pos] / x[pos]
        lo = float(ratios.min())
        hi = float(ratios.max())
        prev = est
        est = float(x @ y)  # x is unit 2-norm: Rayleigh value, inside [lo, hi]
        if hi - lo <= tol:
            return max(0.0, est - shift)
        if abs(est - prev) <= 1e-3 * tol * max(1.0, est):
            stalled += 1
            if stalled >= 3:
                return max(0.0, est - shift)
        else:
            stalled = 0
        x = y / float(np.sqrt(y @ y))
    raise ConvergenceError(
        f"spectral_radius_nonneg: no convergence in {max_iter} iterations "
        f"(last estimate {est - shift:.6g})",
        iterations=max_iter, estimate=est - shift)


def max_eig_symmetric(s: np.ndarray, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Largest eigenvalue of a symmetric matrix, within tol.

    Householder tridiagonalization followed by Sturm-sequence bisection on
    the largest eigenvalue. Bisection accuracy does not depend on spectral
    gaps, which matters here: saturation-pattern Jacobians routinely carry
    near-degenerate top pairs that defeat iterative methods. Diagonal input
    returns max(diag) exactly. max_iter is accepted for interface parity but
    bisection terminates in ~60 halvings regardless.
    """
    s = _as_matrix(s, "s", square=True)
    n = s.shape[0]
    skew = np.abs(s - s.T).max() if n > 1 else 0.0
    if skew > 1e-9 * max(1.0, float(np.abs(s).max())):
        raise ValueError(f"matrix is not symmetric (|s - s.T| up to {skew:.3g})")
    if n == 1:
        return float(s[0, 0])
    diag = s.diagonal()
    if not (s - np.diag(diag)).any():
        return float(diag.max())
    return float(max_eig_symmetric_batch(s[None, :, :], tol=tol)[0])


def max_eig_symmetric_batch(stack: np.ndarray,
                            tol: float = DEFAULT_TOL,
                            max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Largest eigenvalue of each symmetric slice of a (k, n, n) stack.

    Same tridiagonalize-and-bisect scheme as max_eig_symmetric, vectorized
    across slices. Returns shape (k,).
    """
    s = np.asarray(stack, dtype=np.float64)
    if s.ndim != 3 or s.shape[1] != s.shape[2]:
        raise ValueError(f"stack must have shape (k, n, n), got {s.shape}")
    if s.size == 0:
        return np.zeros(s.shape[0])
    if not np.all(np.isfinite(s)):
        raise ValueError("stack has non-finite entries")
    skew = np.abs(s - np.transpose(s, (0, 2, 1))).max()
    if skew > 1e-9 * max(1.0, float(np.abs(s).max())):
        raise ValueError(f"stack is not symmetric (|s - s.T| up to {skew:.3g})")
    k, n = s.shape[0], s.shape[1]
    if n == 1:
        return s[:, 0, 0].copy()
    s = 0.5 * (s + np.transpose(s, (0, 2, 1)))
    d, e = _tridiagonalize_batch(s)
    return _bisect_top_eig(d, e, tol)


def _tridiagonalize_batch(s):
    """Householder reduction of each symmetric slice to tridiagonal form.

    Returns (d, e): diagonals (k, n) and subdiagonals (k, n-1). The loop is
    over columns only; all per-slice work is batched numpy, so cost is
    O(k n^3) flops in O(n) python steps.
    """
    a = s.copy()
    k, n = a.shape[0], a.shape[1]
    for j in range(n - 2):
        x = a[:, j + 1:, j]
        sigma = np.sqrt(np.einsum("ki,ki->k", x, x))
        alpha = -np.where(x[:, 0] >= 0, 1.0, -1.0) * sigma
        v = x.copy()
        v[:, 0] -= alpha
        vsq = np.einsum("ki,ki->k", v, v)
        active = vsq > 0.0
        beta = np.where(active, 2.0 / np.where(active, vsq, 1.0), 0.0)
        sub = a[:, j + 1:, j + 1:]
        w = beta[:, None] * np.einsum("kij,kj->ki", sub, v)
        kappa = 0.5 * beta * np.einsum("ki,ki->k", v, w)
        u = w - kappa[:, None] * v
        sub -= v[:, :, None] * u[:, None, :] + u[:, :, None] * v[:, None, :]
        a[:, j + 1, j] = np.where(active, alpha, x[:, 0])
    d = np.einsum("kii->ki", a).copy()
    e = a[:, np.arange(1, n), np.arange(n - 1)].copy()
    return d, e


def _bisect_top_eig(d, e, tol):
    """Largest eigenvalue of each symmetric tridiagonal (d, e) via bisection.

    The Sturm count (number of eigenvalues below x, from the sign changes of
    the leading-minor recurrence) brackets the top eigenvalue to width tol;
    zero pivots are nudged negative in the LAPACK manner.
    """
    k, n = d.shape
    e2 = e * e
    radius = np.zeros((k, n))
    radius[:, :-1] += np.abs(e)
    radius[:, 1:] += np.abs(e)
    lo = (d - radius).min(axis=1)
    hi = (d + radius).max(axis=1)
    pivmin = 1e-290 * np.maximum(1.0, e2.max(axis=1))

    def count_below(x):
        q = d[:, 0] - x
        cnt = (q < 0).astype(np.int64)
        for i in range(1, n):
            q = np.where(np.abs(q) < pivmin, -pivmin, q)
            q = d[:, i] - x - e2[:, i - 1] / q
            cnt += q < 0
        return cnt

    for _ in range(120):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        stuck = (mid <= lo) | (mid >= hi)  # no representable midpoint left
        if np.all(stuck | (hi - lo <= tol)):
            break
        below_all = count_below(mid) == n
        hi = np.where(~stuck & below_all, mid, hi)
        lo = np.where(~stuck & ~below_all, mid, lo)
    return 0.5 * (lo + hi)


def spectral_norm(a: np.ndarray, tol: float = DEFAULT_TOL,
                  max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Largest singular value of a rectangular matrix.

    Power iteration on the smaller Gram matrix. The Gram residual stop uses
    max(tol^2, tol * sqrt(theta)): either branch bounds the singular-value
    error by tol (|sqrt(u) - sqrt(v)| <= sqrt(|u - v|), and for theta bounded
    away from zero |sqrt(u) - sqrt(v)| <= |u - v| / sqrt(theta)).
    """
    a = _as_matrix(a, "a")
    if not a.any():
        return 0.0
    g = a @ a.T if a.shape[0] <= a.shape[1] else a.T @ a
    n = g.shape[0]
    if n == 1:
        return float(np.sqrt(g[0, 0]))
    diag = g.diagonal()
    if not (g - np.diag(diag)).any():
        return float(np.sqrt(diag.max()))

    best = None
    for seed in _START_SEEDS:
        theta = _power_gram(g, _start_vector(n, seed), tol, max_iter)
        best = theta if best is None else max(best, theta)
    return float(np.sqrt(max(0.0, best)))


def _power_gram(g, x, tol, max_iter):
    theta = 0.0
    for it in range(max_iter):
        y = g @ x
        theta = float(x @ y)
        res = y - theta * x
        if float(np.sqrt(res @ res)) <= max(tol * tol, tol * np.sqrt(max(theta, 0.0))):
            return theta
        ynorm = float(np.sqrt(y @ y))
        if ynorm == 0.0:
            return 0.0
        x = y / ynorm
    raise ConvergenceError(
        f"spectral_norm: no convergence in {max_iter} iterations "
        f"(last Gram estimate {theta:.6g})",
        iterations=max_iter, estimate=np.sqrt(max(theta, 0.0)))


def solve_linear(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b by Gaussian elimination with partial pivoting.

    Raises SingularMatrixError when a pivot falls to 1e-12 or below, or when
    the computed solution's relative residual exceeds 1e-8.
    """
    a = _as_matrix(a, "a", square=True)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[0]
    if b.shape != (n,):
        raise ValueError(f"b must have shape ({n},), got {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError("b has non-finite entries")

    u = a.copy()
    rhs = b.copy()
    for k in range(n):
        p = k + int(np.argmax(np.abs(u[k:, k])))
        pivot = u[p, k]
        if abs(pivot) <= 1e-12:
            raise SingularMatrixError(
                f"pivot {pivot:.3g} at column {k} (threshold 1e-12)")
        if p != k:
            u[[k, p]] = u[[p, k]]
            rhs[[k, p]] = rhs[[p, k]]
        if k + 1 < n:
            factors = u[k + 1:, k] / pivot
            u[k + 1:, k:] -= factors[:, None] * u[k, k:]
            rhs[k + 1:] -= factors * rhs[k]

    x = np.empty(n)
    for k in range(n - 1, -1, -1):
        x[k] = (rhs[k] - u[k, k + 1:] @ x[k + 1:]) / u[k, k]

    residual = float(np.abs(a @ x - b).max()) / (1.0 + float(np.abs(b).max()))
    if residual > 1e-8:
        raise SingularMatrixError(
            f"solution residual {residual:.3g} exceeds 1e-8 (ill-conditioned system)")
    return x
