"""Backprop through time for the discrete-time simulator.

Only inter-area coupling (B in negative_feedback mode, masked L in
gw_nonlinear mode), the input/output layers, and biases receive gradients;
the certified intra-area weights are never touched. The trainer re-applies
masks after every optimizer step and, in gw mode, projects coupling blocks
back inside the certified norm cap so every iterate is feasible.

In negative_feedback mode the optimizer state and step live in the
metric-whitened coupling coordinates B * sqrt(m_r / m_c), matching the init
draw, so a unit optimizer step perturbs the effective skew coupling
uniformly; the reported gradients stay in raw B coordinates.
"""
import csv
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import seeding
from .coupling import (GwNonlinear, NegativeFeedback, project_gw_blocks,
                       verify_contraction_certificate)
from .dynamics import (MultiAreaNet, logits_batch, refresh_coupling,
                       step_batch)
from .errors import CertificationError, StateOverflowError


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.002
    epochs: int = 250
    lr_cut_epochs: tuple = (150, 200)
    lr_cut_factor: float = 0.1
    seed: int = 0
    gw_projection: Optional[bool] = None  # None = on whenever mode is gw
    log_every: int = 1
    optimizer: str = "adam"
    verify_certificate: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        cuts = tuple(int(c) for c in self.lr_cut_epochs)
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValueError("lr_cut_epochs must be strictly increasing")
        if any(c < 0 or c >= self.epochs for c in cuts):
            raise ValueError(f"lr_cut_epochs {cuts} must lie inside "
                             f"[0, {self.epochs})")
        self.lr_cut_epochs = cuts
        if self.lr_cut_factor <= 0:
            raise ValueError("lr_cut_factor must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, "
                             f"got {self.optimizer!r}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)  # nan when not evaluated
    lr: list = field(default_factory=list)
    wall_s: list = field(default_factory=list)
    diverged: bool = False
    diagnostic: str = ""

    @property
    def epochs_run(self):
        return len(self.train_loss)


@dataclass(frozen=True)
class Gradients:
    """Mean cross-entropy gradients for the trainable parameters only."""
    coupling: np.ndarray        # dB (negative_feedback) or masked dL (gw)
    input_weights: np.ndarray
    output_weights: np.ndarray
    hidden_bias: np.ndarray
    output_bias: np.ndarray
    loss: float


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_PARAM_KEYS = ("coupling", "input_weights", "output_weights",
               "hidden_bias", "output_bias")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """lr times lr_cut_factor to the number of cut points at or below epoch."""
    if epoch >= cfg.epochs:
        raise ValueError(f"epoch {epoch} out of range for {cfg.epochs} epochs")
    cuts = sum(1 for c in cfg.lr_cut_epochs if c <= epoch)
    return cfg.lr * cfg.lr_cut_factor ** cuts


def _softmax_and_loss(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(len(labels)), labels].mean())
    return probs, loss


def batch_loss(net: MultiAreaNet, sequences, labels) -> float:
    """Mean cross-entropy of the readout over the given batch, no gradients."""
    logits = logits_batch(net, sequences)
    _, loss = _softmax_and_loss(logits, np.asarray(labels))
    return loss


def _check_batch(net, sequences, labels):
    try:
        sequences = np.asarray(sequences, dtype=np.float64)
    except ValueError:
        raise ValueError("ragged batch: sequences must share one length")
    if sequences.ndim != 3:
        raise ValueError("ragged batch: sequences must share one length")
    if sequences.shape[0] == 0:
        raise ValueError("batch is empty")
    if sequences.shape[2] != net.input_dim:
        raise ValueError(f"sequences must be (batch, T, {net.input_dim}), "
                         f"got {sequences.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (sequences.shape[0],):
        raise ValueError("labels must be one integer per sequence")
    if labels.min() < 0 or labels.max() >= net.classes:
        raise ValueError(f"label out of range [0, {net.classes})")
    return sequences, labels


def bptt_grads(net: MultiAreaNet, sequences, labels) -> Gradients:
    """Exact gradients of the mean cross-entropy through the unrolled step.

    The backward recursion mirrors the forward Euler update in row form:
    delta picks up -delta + (delta W) phi'(x) + (delta L) psi'(x) scaled by
    dt/tau each step. In negative_feedback mode the dense dL is mapped onto
    the trainable B through L = B - M^-1 B^T M, then restricted to the
    strictly lower triangular mask; in gw mode dL is masked directly. W gets
    no gradient in either mode.
    """
    sequences, labels = _check_batch(net, sequences, labels)
    b, t_len = sequences.shape[0], sequences.shape[1]
    n = net.n_units
    alpha = net.dt / net.tau

    states = np.empty((t_len + 1, b, n))
    states[0] = 0.0
    x = states[0]
    for t in range(t_len):
        x = step_batch(net, x, sequences[:, t, :])
        states[t + 1] = x

    logits = x @ net.output_weights + net.output_bias
    probs, loss = _softmax_and_loss(logits, labels)
    g = probs.copy()
    g[np.arange(b), labels] -= 1.0
    g /= b

    d_wout = states[t_len].T @ g
    d_bout = g.sum(axis=0)
    delta = g @ net.output_weights.T

    w = net.w_full
    l = net.weights.L
    d_l = np.zeros((n, n))
    d_win = np.zeros((net.input_dim, n))
    d_b = np.zeros(n)
    for t in range(t_len - 1, -1, -1):
        xt = states[t]
        d_l += delta.T @ net.psi(xt)
        d_win += sequences[:, t, :].T @ delta
        d_b += delta.sum(axis=0)
        delta = delta + alpha * (-delta
                                 + (delta @ w) * net.phi.derivative(xt)
                                 + (delta @ l) * net.psi.derivative(xt))
    d_l *= alpha
    d_win *= alpha
    if net.bias_inside_step:
        d_b *= alpha

    m = net.metric_diag
    if isinstance(net.mode, NegativeFeedback):
        dc = d_l - (m[:, None] / m[None, :]) * d_l.T
        dc *= np.tril(net.mask, -1)
    else:
        dc = d_l * net.mask
    return Gradients(coupling=dc, input_weights=d_win, output_weights=d_wout,
                     hidden_bias=d_b, output_bias=d_bout, loss=loss)


def _get_coupling(net):
    if isinstance(net.mode, NegativeFeedback):
        return net.weights.B
    return net.weights.L


def _whiten_ratio(net: MultiAreaNet) -> np.ndarray:
    """Entrywise sqrt(m_c / m_r): the scale that maps iid whitened coupling
    coordinates onto the raw B used by the dynamics."""
    wh = np.sqrt(net.metric_diag)
    return wh[None, :] / wh[:, None]


def _apply_update(net: MultiAreaNet, grads: Gradients, lr: float,
                  cfg: TrainConfig, state: OptimizerState,
                  project: bool) -> None:
    params = {
        "coupling": _get_coupling(net),
        "input_weights": net.input_weights,
        "output_weights": net.output_weights,
        "hidden_bias": net.hidden_bias,
        "output_bias": net.output_bias,
    }
    grad_of = lambda key: getattr(grads, key)
    # The optimizer steps on B in the metric-whitened coordinates where the
    # derived L is a plain skew matrix (matching the init draw). Raw-coordinate
    # steps of size lr would be amplified by m_c / m_r ratios when mapped into
    # that frame, which for strongly conditioned metrics turns any update into
    # an expansive coupling perturbation. Identity metrics make the transform
    # a no-op.
    ratio = None
    if isinstance(net.mode, NegativeFeedback):
        ratio = _whiten_ratio(net)
        params["coupling"] = params["coupling"] / ratio
        grad_of = lambda key: (grads.coupling * ratio if key == "coupling"
                               else getattr(grads, key))
    state.step += 1
    t = state.step
    for key in _PARAM_KEYS:
        p = params[key]
        g = grad_of(key)
        if cfg.optimizer == "adam":
            if key not in state.m:
                state.m[key] = np.zeros_like(p)
                state.v[key] = np.zeros_like(p)
            state.m[key] = ADAM_BETA1 * state.m[key] + (1 - ADAM_BETA1) * g
            state.v[key] = ADAM_BETA2 * state.v[key] + (1 - ADAM_BETA2) * g * g
            mhat = state.m[key] / (1 - ADAM_BETA1 ** t)
            vhat = state.v[key] / (1 - ADAM_BETA2 ** t)
            params[key] = p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        else:
            params[key] = p - lr * g

    net.input_weights = params["input_weights"]
    net.output_weights = params["output_weights"]
    net.hidden_bias = params["hidden_bias"]
    net.output_bias = params["output_bias"]
    if isinstance(net.mode, NegativeFeedback):
        net.weights.B = params["coupling"] * ratio * np.tril(net.mask, -1)
        refresh_coupling(net)
    else:
        l = params["coupling"] * net.mask
        if project:
            l = project_gw_blocks(l, net.layout, net.mode.ell)
        net.weights.L = l


def evaluate_accuracy(net: MultiAreaNet, dataset) -> float:
    logits = logits_batch(net, dataset.sequences)
    pred = np.argmax(logits, axis=1)
    return float((pred == dataset.labels).mean())


def train(net: MultiAreaNet, train_set, test_set, cfg: TrainConfig,
          csv_path=None, start_epoch: int = 0,
          optimizer_state: Optional[OptimizerState] = None,
          epoch_callback=None) -> TrainHistory:
    """Shuffled mini-batch training with per-epoch bookkeeping.

    Sequences are reshuffled each epoch from the epoch-indexed seed stream,
    so a resumed run at start_epoch > 0 sees the same batches it would have
    seen uninterrupted. The partial final batch is kept. Test accuracy and
    the certificate spot-check run every log_every epochs and on the last
    one. A non-finite loss or a state overflow stops training and returns
    the history so far with a diagnostic.
    """
    if train_set.classes != net.classes or test_set.classes != net.classes:
        raise ValueError("dataset class count does not match the network")
    if train_set.num == 0 or test_set.num == 0:
        raise ValueError("datasets must be nonempty")
    history = TrainHistory()
    state = optimizer_state if optimizer_state is not None else OptimizerState()
    project = cfg.gw_projection
    if project is None:
        project = isinstance(net.mode, GwNonlinear)

    writer = None
    csv_file = None
    if csv_path is not None:
        fresh = start_epoch == 0
        csv_file = open(csv_path, "w" if fresh else "a", newline="")
        writer = csv.writer(csv_file)
        if fresh:
            writer.writerow(["epoch", "train_loss", "test_acc", "lr",
                             "wall_s"])

    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_schedule(cfg, epoch)
            perm = seeding.stream(cfg.seed, seeding.SHUFFLE,
                                  epoch).permutation(train_set.num)
            loss_sum = 0.0
            seen = 0
            for lo in range(0, train_set.num, cfg.batch_size):
                idx = perm[lo:lo + cfg.batch_size]
                try:
                    grads = bptt_grads(net, train_set.sequences[idx],
                                       train_set.labels[idx])
                except StateOverflowError as e:
                    history.diverged = True
                    history.diagnostic = (
                        f"state overflow in epoch {epoch}, batch at {lo}: {e}")
                    return history
                if not np.isfinite(grads.loss):
                    history.diverged = True
                    history.diagnostic = (
                        f"non-finite loss in epoch {epoch}, batch at {lo}")
                    return history
                _apply_update(net, grads, lr, cfg, state, project)
                loss_sum += grads.loss * len(idx)
                seen += len(idx)
            train_loss = loss_sum / seen

            checkpoint_epoch = (epoch % cfg.log_every == 0
                                or epoch == cfg.epochs - 1)
            acc = float("nan")
            if checkpoint_epoch:
                try:
                    acc = evaluate_accuracy(net, test_set)
                except StateOverflowError:
                    history.diverged = True
                    history.diagnostic = (
                        f"state overflow during evaluation after epoch {epoch}")
                    return history
                if cfg.verify_certificate:
                    check = verify_contraction_certificate(
                        net, num_states=32, seed=cfg.seed, corner_samples=8)
                    if not check.passed:
                        raise CertificationError(
                            f"certificate broken after epoch {epoch}: "
                            f"max sym eig {check.max_sym_eig:.3e} at "
                            f"{check.worst_probe}")

            wall = time.perf_counter() - t0
            history.train_loss.append(train_loss)
            history.test_acc.append(acc)
            history.lr.append(lr)
            history.wall_s.append(wall)
            if writer is not None:
                writer.writerow([epoch, f"{train_loss:.10g}",
                                 "" if np.isnan(acc) else f"{acc:.6g}",
                                 f"{lr:.10g}", f"{wall:.3f}"])
                csv_file.flush()
            if epoch_callback is not None:
                epoch_callback(epoch, net, state, history)
    finally:
        if csv_file is not None:
            csv_file.close()
    return history


def finite_diff_check(net: MultiAreaNet, sequence, label,
                      h: float = 1e-5) -> float:
    """Max relative error of bptt_grads against central differences.

    Every trainable coordinate is perturbed by +-h (masked coordinates are
    skipped since they are not legal directions). Above 5,000 coordinates a
    fixed-stream random subset of 2,000 is checked instead. The relative
    error denominator is max(|grad|, 1e-8).
    """
    if not h > 0:
        raise ValueError("h must be positive")
    seqs = np.asarray(sequence, dtype=np.float64)[None, :, :]
    labels = np.asarray([label])
    grads = bptt_grads(net, seqs, labels)

    nf = isinstance(net.mode, NegativeFeedback)
    if nf:
        coupling = net.weights.B
        support = np.tril(net.mask, -1)
    else:
        coupling = net.weights.L
        support = net.mask

    coords = []
    for r, c in zip(*np.nonzero(support)):
        coords.append(("coupling", (int(r), int(c))))
    for arr_name in ("input_weights", "output_weights"):
        arr = getattr(net, arr_name)
        for r in range(arr.shape[0]):
            for c in range(arr.shape[1]):
                coords.append((arr_name, (r, c)))
    for arr_name in ("hidden_bias", "output_bias"):
        for k in range(getattr(net, arr_name).shape[0]):
            coords.append((arr_name, (k,)))

    if len(coords) > 5000:
        rng = seeding.stream(0, seeding.VERIFIER)
        pick = rng.choice(len(coords), size=2000, replace=False)
        coords = [coords[int(i)] for i in sorted(pick)]

    def lookup(name):
        return coupling if name == "coupling" else getattr(net, name)

    worst = 0.0
    for name, idx in coords:
        arr = lookup(name)
        old = arr[idx]
        arr[idx] = old + h
        if name == "coupling" and nf:
            refresh_coupling(net)
        up = batch_loss(net, seqs, labels)
        arr[idx] = old - h
        if name == "coupling" and nf:
            refresh_coupling(net)
        down = batch_loss(net, seqs, labels)
        arr[idx] = old
        if name == "coupling" and nf:
            refresh_coupling(net)
        fd = (up - down) / (2 * h)
        g = getattr(grads, name)[idx]
        err = abs(fd - g) / max(abs(g), 1e-8)
        worst = max(worst, err)
    return worst
