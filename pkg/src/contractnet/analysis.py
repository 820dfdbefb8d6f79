"""Post-training dissection: ablations, pruning, and evaluation statistics.

Every operation here returns a new network; sources are never mutated.
Ablation zeroes a chosen slice of the parameters (whole subnetworks by
weight type, single units, or single inter-area pairs) so the remaining
net can be re-evaluated to attribute performance. Because the coupling
parameterizations are closed under zeroing rows/columns/pairs, every
ablated net keeps its contraction certificate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import numerics
from .coupling import NegativeFeedback, negative_feedback_L, \
    verify_contraction_certificate
from .dynamics import InterAreaWeights, MultiAreaNet, logits_batch
from .errors import CertificationError
from .subnets import CertifiedSubnet, metric_contraction_rate

ABLATION_KINDS = ("total", "inter_area", "intra_area", "input_only",
                  "output_only")

PRUNE_SKEW_TOL = 1e-8


@dataclass(frozen=True)
class AblationTarget:
    """Which weight family to zero, for which set of subnetworks.

    zero_output_bias additionally clears the readout bias under
    output_only (off by default; the bias is shared across subnets so
    this is all-or-nothing).
    """

    kind: str
    subnets: tuple
    zero_output_bias: bool = False

    def __post_init__(self):
        if self.kind not in ABLATION_KINDS:
            raise ValueError(f"unknown ablation kind {self.kind!r}")
        subs = tuple(sorted({int(i) for i in self.subnets}))
        if not subs:
            raise ValueError("ablation target needs at least one subnet")
        if subs[0] < 0:
            raise ValueError("subnet indices must be nonnegative")
        object.__setattr__(self, "subnets", subs)

    def label(self) -> str:
        return f"{self.kind}[{'+'.join(str(i) for i in self.subnets)}]"


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class: np.ndarray   # (classes,) recall per true class
    confusion: np.ndarray   # (classes, classes) counts, rows = true


@dataclass(frozen=True)
class AblationReport:
    baseline: EvalResult
    rows: tuple             # of (AblationTarget, EvalResult)


def _units_of(net: MultiAreaNet, subnets) -> np.ndarray:
    lay = net.layout
    idx = []
    for i in subnets:
        if not 0 <= i < lay.p:
            raise ValueError(f"subnet index {i} out of range for p={lay.p}")
        idx.extend(range(lay.offsets[i], lay.offsets[i + 1]))
    return np.asarray(idx, dtype=np.intp)


def _zero_rows_cols(a, units):
    out = a.copy()
    out[units, :] = 0.0
    out[:, units] = 0.0
    return out


def _rebuild_coupling(net, subnets, b, l, s):
    """Effective L for the (possibly edited) parameters, mode-appropriately."""
    if isinstance(net.mode, NegativeFeedback):
        metric = np.concatenate([sn.metric_diag for sn in subnets])
        l = negative_feedback_L(b, metric, net.mask)
        if net.mode.epsilon != 0.0:
            l = l + net.mode.epsilon * s
    return InterAreaWeights(B=b, L=l, S=s)


def _assemble(net, subnets, weights, win, wout, bh, bo):
    return MultiAreaNet(layout=net.layout, subnets=tuple(subnets),
                        adjacency=net.adjacency, mode=net.mode,
                        weights=weights, input_weights=win,
                        output_weights=wout, hidden_bias=bh, output_bias=bo,
                        phi=net.phi, psi=net.psi, tau=net.tau, dt=net.dt,
                        bias_inside_step=net.bias_inside_step)


def _zeroed_subnet(sn: CertifiedSubnet) -> CertifiedSubnet:
    # zero weights certify trivially: rho = 0, rate = 1 in any diagonal metric
    return CertifiedSubnet(weights=np.zeros_like(sn.weights),
                           metric_diag=sn.metric_diag.copy(),
                           rate=1.0, rho=0.0)


def ablate(net: MultiAreaNet, target: AblationTarget) -> MultiAreaNet:
    """Copy of net with the target's weight family zeroed.

    total = inter_area + intra_area + input_only + output_only for the
    subnet set, plus those units' hidden biases.
    """
    units = _units_of(net, target.subnets)
    subnets = list(net.subnets)
    b = None if net.weights.B is None else net.weights.B.copy()
    l = net.weights.L.copy()
    s = None if net.weights.S is None else net.weights.S.copy()
    win = net.input_weights.copy()
    wout = net.output_weights.copy()
    bh = net.hidden_bias.copy()
    bo = net.output_bias.copy()
    kind = target.kind

    if kind in ("total", "inter_area"):
        if b is not None:
            b = _zero_rows_cols(b, units)
        if s is not None:
            s = _zero_rows_cols(s, units)
        l = _zero_rows_cols(l, units)
    if kind in ("total", "intra_area"):
        for i in target.subnets:
            subnets[i] = _zeroed_subnet(subnets[i])
    if kind in ("total", "input_only"):
        win[:, units] = 0.0
    if kind in ("total", "output_only"):
        wout[units, :] = 0.0
    if kind == "total":
        bh[units] = 0.0
    if kind == "output_only" and target.zero_output_bias:
        bo[:] = 0.0

    weights = _rebuild_coupling(net, subnets, b, l, s)
    return _assemble(net, subnets, weights, win, wout, bh, bo)


def ablate_unit(net: MultiAreaNet, unit: int) -> MultiAreaNet:
    """Copy of net with every weight touching one unit zeroed.

    The unit stays in place (dimensions unchanged); its recurrent row and
    column, coupling row and column, input column, output row, and bias
    are cleared. Zeroing entries of a nonnegative matrix cannot raise its
    Perron root, so the host subnet recertifies under its existing metric.
    """
    n = net.n_units
    if not 0 <= unit < n:
        raise ValueError(f"unit index {unit} out of range for {n} units")
    lay = net.layout
    which = int(lay.unit_to_subnet()[unit])
    local = unit - lay.offsets[which]

    sn = net.subnets[which]
    w = sn.weights.copy()
    w[local, :] = 0.0
    w[:, local] = 0.0
    rho = numerics.spectral_radius_nonneg(np.abs(w))
    rate = metric_contraction_rate(w, sn.metric_diag)
    subnets = list(net.subnets)
    subnets[which] = CertifiedSubnet(weights=w,
                                     metric_diag=sn.metric_diag.copy(),
                                     rate=rate, rho=rho)

    u = np.asarray([unit], dtype=np.intp)
    b = None if net.weights.B is None else _zero_rows_cols(net.weights.B, u)
    s = None if net.weights.S is None else _zero_rows_cols(net.weights.S, u)
    l = _zero_rows_cols(net.weights.L, u)
    win = net.input_weights.copy()
    win[:, unit] = 0.0
    wout = net.output_weights.copy()
    wout[unit, :] = 0.0
    bh = net.hidden_bias.copy()
    bh[unit] = 0.0

    weights = _rebuild_coupling(net, subnets, b, l, s)
    return _assemble(net, subnets, weights, win, wout, bh,
                     net.output_bias.copy())


def prune_inter_area_pair(net: MultiAreaNet, unit_r: int, unit_c: int,
                          full_verify: bool = False) -> MultiAreaNet:
    """Copy of net with the coupling pair (unit_r, unit_c) removed.

    Zeroes L_rc and L_cr together with the parameter entries behind them,
    then re-checks the skew-in-metric residual (and optionally the full
    certificate). Pairwise removal keeps L skew in the metric, so the
    stability guarantee survives any pruning schedule.
    """
    if not isinstance(net.mode, NegativeFeedback):
        raise ValueError("pair pruning applies to negative_feedback coupling")
    n = net.n_units
    for u in (unit_r, unit_c):
        if not 0 <= u < n:
            raise ValueError(f"unit index {u} out of range for {n} units")
    owner = net.layout.unit_to_subnet()
    if owner[unit_r] == owner[unit_c]:
        raise ValueError(
            f"units {unit_r} and {unit_c} are both in subnet {owner[unit_r]}")

    b = net.weights.B.copy()
    b[unit_r, unit_c] = 0.0
    b[unit_c, unit_r] = 0.0
    s = None if net.weights.S is None else net.weights.S.copy()
    if s is not None:
        s[unit_r, unit_c] = 0.0
        s[unit_c, unit_r] = 0.0
    weights = _rebuild_coupling(net, list(net.subnets), b, None, s)
    pruned = _assemble(net, list(net.subnets), weights,
                       net.input_weights.copy(), net.output_weights.copy(),
                       net.hidden_bias.copy(), net.output_bias.copy())

    m = pruned.metric_diag
    resid = m[:, None] * pruned.weights.L
    skew = float(np.abs(resid + resid.T).max())
    if skew > PRUNE_SKEW_TOL:
        raise CertificationError(
            f"pruned coupling lost metric skewness (residual {skew:.3g})")
    if full_verify:
        check = verify_contraction_certificate(pruned, num_states=32,
                                               seed=0, corner_samples=8)
        if not check.passed:
            raise CertificationError(
                f"pruned net failed verification (max eig {check.max_sym_eig:.3g})")
    return pruned


def evaluate(net: MultiAreaNet, test_set) -> EvalResult:
    """Accuracy, per-class recall, and the confusion matrix on a dataset.

    confusion[i, j] counts true class i predicted as j; argmax prediction
    with ties broken toward the lowest class index. Classes absent from
    the set get per-class rate 0 by convention.
    """
    if test_set.num == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if test_set.classes != net.classes:
        raise ValueError(f"net has {net.classes} classes, "
                         f"dataset has {test_set.classes}")
    logits = logits_batch(net, test_set.sequences)
    pred = np.argmax(logits, axis=1)
    c = net.classes
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (test_set.labels, pred), 1)
    row = confusion.sum(axis=1)
    per_class = np.where(row > 0, np.diag(confusion) / np.maximum(row, 1), 0.0)
    accuracy = float(np.trace(confusion) / confusion.sum())
    return EvalResult(accuracy=accuracy, per_class=per_class,
                      confusion=confusion)


def pair_strengths(net: MultiAreaNet) -> np.ndarray:
    """p x p matrix of mean |L| over each inter-area block; diagonal 0."""
    lay = net.layout
    out = np.zeros((lay.p, lay.p))
    labs = np.abs(net.weights.L)
    for i in range(lay.p):
        for j in range(lay.p):
            if i != j:
                out[i, j] = labs[lay.block(i), lay.block(j)].mean()
    return out


def ablation_sweep(net: MultiAreaNet, test_set, targets) -> AblationReport:
    baseline = evaluate(net, test_set)
    rows = tuple((t, evaluate(ablate(net, t), test_set)) for t in targets)
    return AblationReport(baseline=baseline, rows=rows)


def write_ablation_csv(report: AblationReport, path) -> None:
    """Long-form rows (target, subnet_set, class, rate); 'overall' rows
    carry the full-set accuracy, numbered rows the per-class recalls."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["target", "subnet_set", "class", "rate"])

        def block(name, subs, res):
            w.writerow([name, subs, "overall", f"{res.accuracy:.10g}"])
            for k, r in enumerate(res.per_class):
                w.writerow([name, subs, str(k), f"{r:.10g}"])

        block("baseline", "", report.baseline)
        for target, res in report.rows:
            block(target.kind, "+".join(str(i) for i in target.subnets), res)


def ablation_summary(report: AblationReport) -> dict:
    base = report.baseline
    out = {"baseline": {"accuracy": base.accuracy,
                        "per_class": base.per_class.tolist()},
           "targets": []}
    for target, res in report.rows:
        out["targets"].append({
            "target": target.kind,
            "subnets": list(target.subnets),
            "accuracy": res.accuracy,
            "delta_vs_baseline": res.accuracy - base.accuracy,
            "per_class": res.per_class.tolist(),
        })
    return out


def write_ablation_json(report: AblationReport, path) -> None:
    with open(path, "w") as f:
        json.dump(ablation_summary(report), f, indent=2, sort_keys=True)
        f.write("\n")
