"""Assembled multi-area network and its discrete-time simulation.

State dynamics (row-stacked states X, one row per batched sequence):

    X <- X + (dt / tau) * ( -X + phi(X) W^T + psi(X) L^T + U Win + b )

W is the block-diagonal stack of certified subnet weights (never trained),
L the inter-area coupling, Win the input map applied to the raw per-step
input, b the hidden bias. The readout is logits = X_T Wout + b_out on the
final state. States above 1e100 in magnitude (or non-finite) abort with
StateOverflowError: that guard is the divergence detector for unconstrained
controls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import seeding
from .activations import Activation, IDENTITY, RELU, TANH
from .coupling import (GwNonlinear, NegativeFeedback, negative_feedback_L,
                       project_gw_blocks)
from .errors import StateOverflowError
from .subnets import CertifiedSubnet
from .topology import Adjacency, NetworkLayout, build_block_mask

OVERFLOW_THRESHOLD = 1e100


@dataclass
class InterAreaWeights:
    """Trainable coupling. negative_feedback trains B (L derived, plus an
    optional fixed symmetric component S scaled by the mode's epsilon);
    gw_nonlinear trains L directly and B is None."""

    B: Optional[np.ndarray]
    L: np.ndarray
    S: Optional[np.ndarray] = None


@dataclass
class MultiAreaNet:
    layout: NetworkLayout
    subnets: tuple
    adjacency: Adjacency
    mode: object                   # NegativeFeedback | GwNonlinear
    weights: InterAreaWeights
    input_weights: np.ndarray      # (input_dim, N)
    output_weights: np.ndarray     # (N, classes)
    hidden_bias: np.ndarray        # (N,)
    output_bias: np.ndarray        # (classes,)
    phi: Activation = RELU
    psi: Activation = IDENTITY
    tau: float = 1.0
    dt: float = 0.03
    bias_inside_step: bool = True
    mask: np.ndarray = field(init=False)
    w_full: np.ndarray = field(init=False)

    def __post_init__(self):
        lay = self.layout
        n = lay.total
        if len(self.subnets) != lay.p:
            raise ValueError(f"{len(self.subnets)} subnets for a {lay.p}-slot layout")
        for i, sn in enumerate(self.subnets):
            if sn.n != lay.sizes[i]:
                raise ValueError(f"subnet {i} has {sn.n} units, layout says {lay.sizes[i]}")
        if self.adjacency.p != lay.p:
            raise ValueError("adjacency/layout subnet count mismatch")
        # dt = 0 is tolerated as a degenerate diagnostic step; tau must be positive
        if self.dt < 0.0 or self.tau <= 0.0:
            raise ValueError("need dt >= 0 and tau > 0")
        self.input_weights = np.asarray(self.input_weights, dtype=np.float64)
        self.output_weights = np.asarray(self.output_weights, dtype=np.float64)
        self.hidden_bias = np.asarray(self.hidden_bias, dtype=np.float64)
        self.output_bias = np.asarray(self.output_bias, dtype=np.float64)
        if self.input_weights.ndim != 2 or self.input_weights.shape[1] != n:
            raise ValueError(f"input_weights must be (input_dim, {n})")
        if self.output_weights.ndim != 2 or self.output_weights.shape[0] != n:
            raise ValueError(f"output_weights must be ({n}, classes)")
        if self.hidden_bias.shape != (n,):
            raise ValueError(f"hidden_bias must be ({n},)")
        if self.output_bias.shape != (self.output_weights.shape[1],):
            raise ValueError("output_bias/classes mismatch")

        self.mask = build_block_mask(self.adjacency, lay)
        w = np.zeros((n, n))
        for i, sn in enumerate(self.subnets):
            w[lay.block(i), lay.block(i)] = sn.weights
        self.w_full = w

        l = np.asarray(self.weights.L, dtype=np.float64)
        if l.shape != (n, n):
            raise ValueError(f"L must be ({n}, {n})")
        if np.any(l[~self.mask] != 0.0):
            raise ValueError("L has entries outside the inter-area mask")
        b = self.weights.B
        if isinstance(self.mode, NegativeFeedback):
            if b is None:
                raise ValueError("negative_feedback mode needs the B parameter matrix")
            if np.any(np.asarray(b)[~np.tril(self.mask, -1)] != 0.0):
                raise ValueError("B has entries outside the lower triangle of the mask")
            if self.psi.name != "identity":
                raise ValueError("negative_feedback mode requires psi = identity")
            s = self.weights.S
            if self.mode.epsilon != 0.0:
                if s is None:
                    raise ValueError("epsilon != 0 needs the symmetric component S")
                s = np.asarray(s)
                if not np.array_equal(s, s.T) or np.any(s[~self.mask] != 0.0):
                    raise ValueError("S must be symmetric and masked to inter-area blocks")
        elif isinstance(self.mode, GwNonlinear):
            for sn in self.subnets:
                if not np.all(sn.metric_diag == 1.0):
                    raise ValueError("gw_nonlinear mode requires identity-metric subnets")
            from .topology import hub_center
            if hub_center(self.adjacency) is None:
                raise ValueError("gw_nonlinear mode requires a hub-and-spokes adjacency")
        else:
            raise ValueError(f"unknown coupling mode {self.mode!r}")

    @property
    def n_units(self) -> int:
        return self.layout.total

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[0]

    @property
    def classes(self) -> int:
        return self.output_weights.shape[1]

    @property
    def metric_diag(self) -> np.ndarray:
        if isinstance(self.mode, GwNonlinear):
            return np.ones(self.layout.total)
        return np.concatenate([sn.metric_diag for sn in self.subnets])

    @property
    def lower_support(self) -> np.ndarray:
        return np.tril(self.mask, -1)


@dataclass(frozen=True)
class TrajectoryRecord:
    states: np.ndarray      # (T, N) post-step states; (0, N) when not recorded
    final_state: np.ndarray       # (N,)
    logits: np.ndarray            # (classes,)


@dataclass(frozen=True)
class ConvergenceResult:
    distances: np.ndarray  # (T+1,) metric distances, t=0 included
    fitted_rate: float     # least-squares slope of log distance vs time


def refresh_coupling(net: MultiAreaNet) -> None:
    """Recompute the effective L from the trainable B (negative_feedback
    only; gw_nonlinear trains L directly so there is nothing to derive)."""
    if not isinstance(net.mode, NegativeFeedback):
        return
    l = negative_feedback_L(net.weights.B, net.metric_diag, net.mask)
    if net.mode.epsilon != 0.0:
        l = l + net.mode.epsilon * net.weights.S
    net.weights.L = l


def step_batch(net: MultiAreaNet, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One Euler step for row-stacked states x (b, N) under raw inputs u (b, input_dim)."""
    alpha = net.dt / net.tau
    drive = net.phi(x) @ net.w_full.T + net.psi(x) @ net.weights.L.T \
        + u @ net.input_weights
    if net.bias_inside_step:
        out = x + alpha * (-x + drive + net.hidden_bias)
    else:
        out = x + alpha * (-x + drive) + net.hidden_bias
    bad = ~np.isfinite(out)
    if bad.any() or np.abs(out).max() > OVERFLOW_THRESHOLD:
        raise StateOverflowError(
            f"state magnitude exceeded {OVERFLOW_THRESHOLD:.0e}")
    return out


def step(net: MultiAreaNet, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape != (net.n_units,):
        raise ValueError(f"state must be ({net.n_units},), got {x.shape}")
    if u.shape != (net.input_dim,):
        raise ValueError(f"input must be ({net.input_dim},), got {u.shape}")
    return step_batch(net, x[None, :], u[None, :])[0]


def run_sequence(net: MultiAreaNet, seq: np.ndarray,
                 x0: Optional[np.ndarray] = None,
                 record_states: bool = False) -> TrajectoryRecord:
    """Drive the network through seq (T, input_dim) from x0 (default zeros)."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != net.input_dim:
        raise ValueError(f"sequence must be (T, {net.input_dim}), got {seq.shape}")
    n = net.n_units
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (n,):
        raise ValueError(f"x0 must be ({n},), got {x.shape}")
    states = [] if record_states else None
    for t in range(seq.shape[0]):
        try:
            x = step_batch(net, x[None, :], seq[t][None, :])[0]
        except StateOverflowError as e:
            raise StateOverflowError(str(e), step=t) from None
        if record_states:
            states.append(x.copy())
    logits = x @ net.output_weights + net.output_bias
    if record_states:
        rec = np.asarray(states) if states else np.zeros((0, n))
    else:
        rec = np.zeros((0, n))
    return TrajectoryRecord(states=rec, final_state=x, logits=logits)


def logits_batch(net: MultiAreaNet, sequences: np.ndarray,
                 chunk: int = 512) -> np.ndarray:
    """Readout logits for a whole set of sequences (num, T, input_dim).

    Runs the forward pass in chunks from zero initial states; only the
    current state is held per chunk, so memory stays at chunk * N floats.
    """
    sequences = np.asarray(sequences, dtype=np.float64)
    if sequences.ndim != 3 or sequences.shape[2] != net.input_dim:
        raise ValueError(
            f"sequences must be (num, T, {net.input_dim}), got {sequences.shape}")
    num, t_len = sequences.shape[0], sequences.shape[1]
    out = np.empty((num, net.classes))
    for lo in range(0, num, chunk):
        seqs = sequences[lo:lo + chunk]
        x = np.zeros((seqs.shape[0], net.n_units))
        for t in range(t_len):
            x = step_batch(net, x, seqs[:, t, :])
        out[lo:lo + chunk] = x @ net.output_weights + net.output_bias
    return out


def jacobian(net: MultiAreaNet, x: np.ndarray) -> np.ndarray:
    """State Jacobian of f(x) = -x + W phi(x) + L psi(x) (input terms constant)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.n_units,):
        raise ValueError(f"state must be ({net.n_units},), got {x.shape}")
    n = net.n_units
    return (-np.eye(n) + net.w_full * net.phi.derivative(x)[None, :]
            + net.weights.L * net.psi.derivative(x)[None, :])


def metric_distance(xa: np.ndarray, xb: np.ndarray, m: np.ndarray) -> float:
    d = np.asarray(xa, dtype=np.float64) - np.asarray(xb, dtype=np.float64)
    return float(np.sqrt(d @ (np.asarray(m, dtype=np.float64) * d)))


DISTANCE_FLOOR = 1e-14


def two_trajectory_convergence(net: MultiAreaNet, x0_a: np.ndarray,
                               x0_b: np.ndarray, seq: np.ndarray) -> ConvergenceResult:
    """Run two initial states through the same input and track their metric
    distance (t = 0 included). Distances below 1e-14 are reported floored;
    the fitted rate is the least-squares slope of log distance against
    continuous time over the above-floor segment."""
    seq = np.asarray(seq, dtype=np.float64)
    xa = np.asarray(x0_a, dtype=np.float64).copy()
    xb = np.asarray(x0_b, dtype=np.float64).copy()
    if np.array_equal(xa, xb):
        raise ValueError("initial states are identical; nothing to converge")
    m = net.metric_diag
    dists = [metric_distance(xa, xb, m)]
    for t in range(seq.shape[0]):
        u = seq[t][None, :]
        xa = step_batch(net, xa[None, :], u)[0]
        xb = step_batch(net, xb[None, :], u)[0]
        dists.append(metric_distance(xa, xb, m))
    raw = np.asarray(dists)
    floored = np.maximum(raw, DISTANCE_FLOOR)

    keep = raw > DISTANCE_FLOOR
    if int(keep.sum()) < 2:
        rate = float("nan")
    else:
        t_axis = np.arange(len(raw))[keep] * net.dt
        logs = np.log(raw[keep])
        t_c = t_axis - t_axis.mean()
        rate = float((t_c @ (logs - logs.mean())) / (t_c @ t_c))
    return ConvergenceResult(distances=floored, fitted_rate=rate)


def build_network(pool, adjacency: Adjacency, mode, input_dim: int,
                  classes: int, seed: int,
                  phi: Activation = RELU, psi: Optional[Activation] = None,
                  coupling_std: Optional[float] = None,
                  dt: float = 0.03, tau: float = 1.0) -> MultiAreaNet:
    """Assemble a trainable network from certified subnets.

    Coupling init: every free entry drawn N(0, std) with std defaulting to
    1 / sqrt(mean subnet size); negative_feedback draws B on the lower mask
    triangle and derives L, gw_nonlinear draws L on the full mask and
    projects each block to the mode's ell cap so training starts feasible.
    The negative_feedback draw is made in metric-whitened coordinates
    (entry (r, c) scaled by sqrt(m_c / m_r)), which makes the derived L an
    iid skew matrix of scale std in the metric where it is skew. Without
    this the raw entries inherit the metric's conditioning, which for
    strong sparse subnets spans many orders of magnitude and makes the
    Euler map expansive no matter how small std is. Identity metrics
    reduce it to the plain N(0, std) draw.
    Input map N(0, 1/sqrt(input_dim)), readout N(0, 1/sqrt(N)), zero biases.
    """
    subnets_ = tuple(pool)
    p = len(subnets_)
    if p <= 2:
        raise ValueError(f"network assembly needs p > 2 subnets, got {p}")
    for sn in subnets_:
        if not isinstance(sn, CertifiedSubnet):
            raise TypeError("pool must contain CertifiedSubnet objects")
    layout = NetworkLayout(sizes=tuple(sn.n for sn in subnets_))
    n = layout.total
    mask = build_block_mask(adjacency, layout)
    if coupling_std is None:
        coupling_std = 1.0 / np.sqrt(np.mean(layout.sizes))

    rng = seeding.stream(seed, seeding.COUPLING_INIT)
    draw = rng.standard_normal((n, n)) * coupling_std
    if isinstance(mode, NegativeFeedback):
        if psi is None:
            psi = IDENTITY
        metric = np.concatenate([sn.metric_diag for sn in subnets_])
        wh = np.sqrt(metric)
        b = np.where(np.tril(mask, -1), draw * (wh[None, :] / wh[:, None]), 0.0)
        l = negative_feedback_L(b, metric, mask)
        s = None
        if mode.epsilon != 0.0:
            raw = rng.standard_normal((n, n)) * coupling_std
            s = np.where(mask, 0.5 * (raw + raw.T), 0.0)
            l = l + mode.epsilon * s
        weights = InterAreaWeights(B=b, L=l, S=s)
    elif isinstance(mode, GwNonlinear):
        if psi is None:
            psi = TANH
        if psi.slope > mode.g_psi:
            raise ValueError(
                f"psi slope {psi.slope} exceeds the mode's g_psi {mode.g_psi}")
        l = np.where(mask, draw, 0.0)
        l = project_gw_blocks(l, layout, mode.ell)
        weights = InterAreaWeights(B=None, L=l)
    else:
        raise ValueError(f"unknown coupling mode {mode!r}")

    rng2 = seeding.stream(seed, seeding.LAYER_INIT)
    win = rng2.standard_normal((input_dim, n)) / np.sqrt(input_dim)
    wout = rng2.standard_normal((n, classes)) / np.sqrt(n)

    return MultiAreaNet(layout=layout, subnets=subnets_, adjacency=adjacency,
                        mode=mode, weights=weights, input_weights=win,
                        output_weights=wout, hidden_bias=np.zeros(n),
                        output_bias=np.zeros(classes), phi=phi, psi=psi,
                        dt=dt, tau=tau)
