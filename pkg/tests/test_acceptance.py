"""End-to-end acceptance checks: one test per shipped guarantee.

Each test prints a single summary line with the measured margins so a
verbose run doubles as an acceptance report. Tolerances and sample counts
are part of the contract; do not loosen them to make a failure go away.
"""

import csv
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from contractnet import analysis, datasets, seeding, subnets, topology
from contractnet import numerics
from contractnet.activations import IDENTITY
from contractnet.coupling import (GwNonlinear, NegativeFeedback,
                                  gw_block_bound, negative_feedback_L,
                                  verify_contraction_certificate)
from contractnet.checkpoint import load_checkpoint
from contractnet.dynamics import (InterAreaWeights, MultiAreaNet,
                                  build_network, two_trajectory_convergence)
from contractnet.errors import CertificationError
from contractnet.subnets import CertifiedSubnet, SubnetSpec
from contractnet.topology import NetworkLayout, build_block_mask
from contractnet.training import TrainConfig, finite_diff_check, train

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def test_trainable_param_counts_for_reference_architectures():
    # (sizes, adjacency, expected trainable scalars) for pixel sequences:
    # 3 input channels, 10 classes. One free coupling block per connected
    # pair; the skew partner block is derived, not counted.
    cases = [
        ((32,) * 16, topology.global_workspace(16), 22_538),
        ((32,) * 32, topology.global_workspace(32), 46_090),
        ((32,) * 24, topology.all_to_all(24), 293_386),
        ((128,) + (32,) * 32, topology.global_workspace(33), 147_210),
        ((32,) * 16, topology.all_to_all(16), 130_058),
        ((32,) * 24, topology.global_workspace(24), 34_314),
    ]
    for sizes, adj, want in cases:
        got = topology.count_trainable_params(NetworkLayout(sizes), adj,
                                              input_dim=3, classes=10)
        assert got == want, f"sizes {sizes[:2]}...: {got} != {want}"
    print(f"PASS param counts: {len(cases)}/{len(cases)} exact")


def test_magnitude_certified_subnets_have_negative_metric_drift():
    # 1,000 draws at the strong-and-sparse operating point that pass the
    # weight-magnitude test must all admit a diagonal metric making the
    # symmetrized drift matrix strictly negative definite.
    spec_n, spec_sparsity, spec_magnitude = 32, 0.033, 6.0
    accepted = 0
    seed = 1000
    worst_eig = -np.inf
    min_rate = np.inf
    draws = 0
    while accepted < 1000:
        w = subnets.sample_subnet(SubnetSpec(spec_n, spec_sparsity,
                                             spec_magnitude, seed))
        seed += 1
        draws += 1
        assert draws < 40_000, "accept rate collapsed; sampling is broken"
        if not subnets.certify_weight_magnitudes(w).passed:
            continue
        accepted += 1
        m, rate = subnets.compute_diagonal_metric(w)
        a = -np.eye(spec_n) + np.abs(w)
        ma = m[:, None] * a
        eig = numerics.max_eig_symmetric(0.5 * (ma + ma.T), tol=1e-9)
        assert eig < 0.0, f"draw {seed - 1}: symmetrized drift eig {eig:.3e}"
        assert rate > 0.0
        worst_eig = max(worst_eig, eig)
        min_rate = min(min_rate, rate)
    print(f"PASS certification soundness: 1000/{draws} accepted, "
          f"worst eig {worst_eig:.3e}, min rate {min_rate:.3f}")


def test_derived_coupling_is_exactly_skew_in_metric():
    # Metric spread of four decades and parameter entries up to ~10; the
    # float residual of M L + L^T M grows like eps * max|M L|, so this
    # stresses the identity well below the stated 1e-10 ceiling.
    worst = 0.0
    for k in range(1000):
        rng = np.random.default_rng(3000 + k)
        p = int(rng.integers(3, 7))
        sizes = rng.integers(2, 9, size=p)
        layout = NetworkLayout(tuple(int(n) for n in sizes))
        if k % 2 == 0:
            adj = topology.all_to_all(p)
        else:
            adj = topology.random_pairs(p, 0.6, seed=int(rng.integers(2**31)))
        mask = build_block_mask(adj, layout)
        m = 10.0 ** rng.uniform(-2.0, 2.0, size=layout.total)
        b = np.where(np.tril(mask, -1),
                     rng.standard_normal((layout.total, layout.total))
                     * 10.0 ** rng.uniform(-1.0, 1.0), 0.0)
        l = negative_feedback_L(b, m, mask)
        ml = m[:, None] * l
        resid = float(np.abs(ml + ml.T).max())
        assert resid < 1e-10, f"draw {k}: skew residual {resid:.3e}"
        worst = max(worst, resid)
    print(f"PASS skew in metric: 1000 draws, worst residual {worst:.3e}")


def test_two_trajectory_distance_contracts_monotonically():
    # 100 random feedback-coupled nets; the metric-weighted distance between
    # two trajectories under shared bounded inputs must never rise (beyond
    # 1e-12 of the initial separation) and its log-slope must beat half the
    # weakest subnet rate. The generator resamples pools below rate 0.3 and
    # scales coupling with subnet size so the discrete step stays inside the
    # regime the continuous-time guarantee controls; those knobs are part of
    # the recipe, the assertions are not.
    worst_bump = -np.inf
    worst_margin = np.inf
    for k in range(100):
        rng = np.random.default_rng(4000 + k)
        p = int(rng.integers(3, 9))
        sizes = rng.integers(4, 17, size=p)
        pool = None
        for tries in range(30):
            specs = [SubnetSpec(int(n), 0.15, 2.5 / int(n),
                                seed=4000 + 311 * k + 17 * tries + i)
                     for i, n in enumerate(sizes)]
            try:
                cand = subnets.generate_certified_pool(
                    specs, max_attempts=50).subnets
            except CertificationError:
                continue
            if min(sn.rate for sn in cand) >= 0.3:
                pool = cand
                break
        assert pool is not None, f"net {k}: no pool at rate 0.3"
        lam = min(sn.rate for sn in pool)
        net = build_network(pool, topology.all_to_all(p), NegativeFeedback(),
                            input_dim=2, classes=3, seed=4000 + k,
                            coupling_std=0.2 / np.sqrt(np.mean(sizes)))
        seq = rng.uniform(-1.0, 1.0, size=(500, 2))
        x0a = rng.standard_normal(net.n_units)
        x0b = rng.standard_normal(net.n_units)
        res = two_trajectory_convergence(net, x0a, x0b, seq)
        d = res.distances
        bump = float(np.max(d[1:] - d[:-1]) / d[0])
        assert bump <= 1e-12, f"net {k}: distance rose by {bump:.3e} of d0"
        assert res.fitted_rate <= -0.5 * lam, (
            f"net {k}: fitted rate {res.fitted_rate:.3f} vs "
            f"-0.5*lambda {-0.5 * lam:.3f}")
        worst_bump = max(worst_bump, bump)
        worst_margin = min(worst_margin, res.fitted_rate / (-0.5 * lam))
    print(f"PASS empirical contraction: 100 nets, worst bump {worst_bump:.2e}"
          f" of d0, fitted/bound ratio >= {worst_margin:.2f}")


def test_hub_block_norm_cap_separates_pass_and_fail():
    # Blocks projected to the certified cap must verify; the same nets with
    # rank-1 blocks at ten times the cap, aligned with each subnet's weakest
    # contracting direction, must fail. Alignment matters: random
    # orientations at 10x can cancel in the symmetric part and slip through,
    # which would test nothing.
    pass_worst = -np.inf
    fail_best = np.inf
    exhaustive = 0
    for k in range(100):
        rng = np.random.default_rng(5000 + k)
        p = int(rng.integers(3, 6))
        sizes = rng.integers(2, 5, size=p)
        pool = None
        for tries in range(30):
            specs = [SubnetSpec(int(n), 0.3, 1.2,
                                seed=5000 + 971 * k + 13 * tries + i)
                     for i, n in enumerate(sizes)]
            try:
                cand = subnets.generate_certified_pool(
                    specs, metric="identity", max_attempts=50).subnets
            except CertificationError:
                continue
            if min(sn.rate for sn in cand) >= 0.15:
                pool = cand
                break
        assert pool is not None, f"net {k}: no identity pool at rate 0.15"
        lam = min(sn.rate for sn in pool)
        adj = topology.global_workspace(p, center=0)
        ell = gw_block_bound(lam, 1.0, p)
        net = build_network(pool, adj, GwNonlinear(ell=ell, g_psi=1.0),
                            input_dim=2, classes=3, seed=5000 + k)
        check = verify_contraction_certificate(net, num_states=200, seed=k)
        assert check.passed, (
            f"net {k}: capped blocks rejected ({check.max_sym_eig:.3e} at "
            f"{check.worst_probe})")
        pass_worst = max(pass_worst, check.max_sym_eig)
        if net.n_units <= 12:
            exhaustive += 1

        # weakest contracting direction of each subnet
        tops = []
        for sn in pool:
            drift = 0.5 * (sn.weights + sn.weights.T) - np.eye(sn.n)
            vals, vecs = np.linalg.eigh(drift)
            tops.append(vecs[:, -1])
        layout = net.layout
        l = np.zeros((layout.total, layout.total))
        hub = layout.block(0)
        for j in range(1, p):
            bj = layout.block(j)
            l[hub, bj] = 10.0 * ell * np.outer(tops[0], tops[j])
            l[bj, hub] = 10.0 * ell * np.outer(tops[j], tops[0])
        hot = MultiAreaNet(layout=layout, subnets=net.subnets, adjacency=adj,
                           mode=net.mode,
                           weights=InterAreaWeights(B=None, L=l),
                           input_weights=net.input_weights,
                           output_weights=net.output_weights,
                           hidden_bias=net.hidden_bias,
                           output_bias=net.output_bias,
                           phi=net.phi, psi=net.psi, dt=net.dt, tau=net.tau)
        bad = verify_contraction_certificate(hot, num_states=200, seed=k)
        assert not bad.passed, f"net {k}: 10x blocks still verified"
        fail_best = min(fail_best, bad.max_sym_eig)
    print(f"PASS hub norm cap: 100 pass margins <= {pass_worst:.3e}, "
          f"100 fail margins >= {fail_best:.3f}, "
          f"{exhaustive} nets corner-enumerated exhaustively")


def test_bptt_matches_finite_differences_both_modes():
    rng = np.random.default_rng(606)
    seq = rng.uniform(-1.0, 1.0, size=(10, 2))
    label = 1

    specs = [SubnetSpec(4, 0.2, 1.0, seed=600 + i) for i in range(3)]
    pool = subnets.generate_certified_pool(specs, max_attempts=100).subnets
    net_fb = build_network(pool, topology.all_to_all(3), NegativeFeedback(),
                           input_dim=2, classes=3, seed=601)
    err_fb = finite_diff_check(net_fb, seq, label, h=1e-5)
    assert err_fb < 1e-4, f"feedback-mode gradient error {err_fb:.3e}"

    specs_id = [SubnetSpec(4, 0.2, 0.8, seed=640 + i) for i in range(3)]
    pool_id = subnets.generate_certified_pool(specs_id, metric="identity",
                                              max_attempts=100).subnets
    lam = min(sn.rate for sn in pool_id)
    net_gw = build_network(pool_id, topology.global_workspace(3),
                           GwNonlinear(ell=gw_block_bound(lam, 1.0, 3)),
                           input_dim=2, classes=3, seed=641)
    err_gw = finite_diff_check(net_gw, seq, label, h=1e-5)
    assert err_gw < 1e-4, f"hub-mode gradient error {err_gw:.3e}"
    print(f"PASS gradient check: feedback {err_fb:.2e}, hub {err_gw:.2e}")


def test_ablation_sequences_preserve_certification():
    # 100 random edit sequences mixing unit ablation, pair pruning, and
    # whole-subnet ablation; every intermediate and final net must keep its
    # contraction certificate.
    ops_applied = {"unit": 0, "pair": 0, "subnet": 0}
    for k in range(100):
        rng = np.random.default_rng(7000 + k)
        p = int(rng.integers(3, 7))
        sizes = rng.integers(4, 11, size=p)
        specs = [SubnetSpec(int(n), 0.2, 4.0 / int(n),
                            seed=7000 + 37 * k + i)
                 for i, n in enumerate(sizes)]
        pool = subnets.generate_certified_pool(specs, max_attempts=100).subnets
        adj = (topology.all_to_all(p) if k % 2 == 0
               else topology.global_workspace(p, center=0))
        net = build_network(pool, adj, NegativeFeedback(), input_dim=2,
                            classes=3, seed=7000 + k)
        owner = net.layout.unit_to_subnet()
        for _ in range(int(rng.integers(3, 7))):
            op = ("unit", "pair", "subnet")[int(rng.integers(3))]
            if op == "unit":
                net = analysis.ablate_unit(net, int(rng.integers(net.n_units)))
            elif op == "pair":
                r = int(rng.integers(net.n_units))
                others = np.flatnonzero(owner != owner[r])
                c = int(rng.choice(others))
                net = analysis.prune_inter_area_pair(net, r, c)
            else:
                target = analysis.AblationTarget(
                    "total", (int(rng.integers(p)),))
                net = analysis.ablate(net, target)
            ops_applied[op] += 1
            quick = verify_contraction_certificate(net, num_states=40,
                                                   seed=k, corner_samples=8)
            assert quick.passed, (
                f"sequence {k}: certificate broken after {op} "
                f"({quick.max_sym_eig:.3e} at {quick.worst_probe})")
        final = verify_contraction_certificate(net, num_states=200, seed=k)
        assert final.passed, (
            f"sequence {k}: final net fails ({final.max_sym_eig:.3e})")
    print(f"PASS ablation stability: 100 sequences, ops {ops_applied}")


def _delayed_class_sets(seed, noise=0.1):
    train_set = datasets.synthetic_task(
        "delayed_class", 2000, seed=seeding.derive_seed(seed, seeding.DATA, 0),
        classes=4, seq_len=50, noise=noise)
    test_set = datasets.synthetic_task(
        "delayed_class", 500, seed=seeding.derive_seed(seed, seeding.DATA, 1),
        classes=4, seq_len=50, noise=noise)
    return train_set, test_set


def _star_pool(seed):
    specs = [SubnetSpec(16, 0.1, 2.0,
                        seed=seeding.derive_seed(seed, seeding.SUBNET, i))
             for i in range(8)]
    return subnets.generate_certified_pool(specs, max_attempts=200).subnets


def test_small_net_learns_and_unconstrained_control_explodes():
    # Same task, same frozen subnet weights, same optimizer protocol for
    # both arms; the only difference is whether coupling is constrained to
    # be skew in the metric. At this learning rate the constrained net
    # trains cleanly to far above 3x chance while the unconstrained
    # control's loss passes through > 1e6. (At tiny learning rates and this
    # short sequence length the unconstrained control can also learn; the
    # contrast in training stability is the point.)
    seed = 3
    train_set, test_set = _delayed_class_sets(seed)
    pool = _star_pool(seed)
    adj = topology.global_workspace(8, center=0)
    proto = dict(batch_size=32, lr=0.1, epochs=20, lr_cut_epochs=(12, 16),
                 seed=seed)

    net = build_network(pool, adj, NegativeFeedback(), input_dim=4, classes=4,
                        seed=seed)
    hist = train(net, train_set, test_set, TrainConfig(**proto))
    assert not hist.diverged
    final_acc = hist.test_acc[-1]
    cert_max_loss = max(hist.train_loss)
    assert final_acc >= 0.75, f"constrained arm reached only {final_acc:.3f}"

    # control: identical frozen weights, coupling trained directly with no
    # parameterization and no norm cap
    layout = NetworkLayout(tuple(sn.n for sn in pool))
    mask = build_block_mask(adj, layout)
    wrapped = tuple(CertifiedSubnet(weights=sn.weights.copy(),
                                    metric_diag=np.ones(sn.n),
                                    rate=sn.rate, rho=sn.rho) for sn in pool)
    rng = seeding.stream(seed, seeding.COUPLING_INIT)
    l0 = np.where(mask, rng.standard_normal((layout.total, layout.total))
                  * (1.0 / np.sqrt(np.mean(layout.sizes))), 0.0)
    rng2 = seeding.stream(seed, seeding.LAYER_INIT)
    win = rng2.standard_normal((4, layout.total)) / 2.0
    wout = rng2.standard_normal((layout.total, 4)) / np.sqrt(layout.total)
    control = MultiAreaNet(layout=layout, subnets=wrapped, adjacency=adj,
                           mode=GwNonlinear(ell=np.inf, g_psi=1.0),
                           weights=InterAreaWeights(B=None, L=l0),
                           input_weights=win, output_weights=wout,
                           hidden_bias=np.zeros(layout.total),
                           output_bias=np.zeros(4), psi=IDENTITY)
    ctrl = train(control, train_set, test_set,
                 TrainConfig(gw_projection=False, verify_certificate=False,
                             **proto))
    ctrl_max_loss = max(ctrl.train_loss) if ctrl.train_loss else np.inf
    ctrl_acc = ctrl.test_acc[-1] if ctrl.test_acc else 0.0
    failed = ctrl.diverged or ctrl_max_loss > 1e6 or ctrl_acc <= 0.35
    assert failed, (
        f"unconstrained control stayed healthy: max loss {ctrl_max_loss:.3g},"
        f" final acc {ctrl_acc:.3f}")
    print(f"PASS desk-scale learning: constrained {final_acc:.3f} acc "
          f"(max loss {cert_max_loss:.3g}); unconstrained max loss "
          f"{ctrl_max_loss:.3g}, diverged={ctrl.diverged}")


def _write_cifar_batch(path, n, rng):
    rec = np.empty((n, 3073), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 10, n)
    rec[:, 1:] = rng.integers(0, 256, (n, 3072))
    rec.tofile(path)


def test_cli_launches_reference_configs_and_smoke_run(tmp_path):
    # The two full-scale pixel-sequence configs must certify end to end
    # through the real CLI, and the 2-epoch smoke config must train on
    # 1,000 sequences with finite loss and an intact certificate. Records
    # in the exact on-disk binary layout are synthesized so the loader and
    # launch path are exercised without the real image archive.
    data_dir = tmp_path / "data" / "cifar10"
    data_dir.mkdir(parents=True)
    rng = np.random.default_rng(99)
    for i in range(1, 6):
        _write_cifar_batch(data_dir / f"data_batch_{i}.bin", 200, rng)
    _write_cifar_batch(data_dir / "test_batch.bin", 200, rng)

    env = dict(os.environ, CONTRACTNET_LOG="info")
    for name in ("seqcifar10_24x32_random50.yaml", "seqcifar10_24x32_gw.yaml",
                 "seqcifar10_smoke.yaml"):
        shutil.copy(os.path.join(CONFIG_DIR, name), tmp_path / name)

    for name in ("seqcifar10_24x32_random50.yaml", "seqcifar10_24x32_gw.yaml"):
        proc = subprocess.run(
            [sys.executable, "-m", "contractnet.cli", "certify",
             "--config", name, "--threads", "4"],
            cwd=tmp_path, env=env, capture_output=True, text=True,
            timeout=900)
        assert proc.returncode == 0, f"{name} certify failed:\n{proc.stderr}"

    proc = subprocess.run(
        [sys.executable, "-m", "contractnet.cli", "train",
         "--config", "seqcifar10_smoke.yaml", "--threads", "4"],
        cwd=tmp_path, env=env, capture_output=True, text=True, timeout=1800)
    assert proc.returncode == 0, f"smoke train failed:\n{proc.stderr}"

    run_dir = tmp_path / "runs" / "seqcifar10_smoke"
    with open(run_dir / "history.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    losses = [float(r["train_loss"]) for r in rows]
    assert all(np.isfinite(losses)), f"non-finite smoke losses {losses}"

    loaded = load_checkpoint(run_dir / "checkpoint.ckpt")
    check = verify_contraction_certificate(loaded.net, num_states=200, seed=0)
    assert check.passed, (
        f"certificate broken after smoke training "
        f"({check.max_sym_eig:.3e} at {check.worst_probe})")
    print(f"PASS launch + smoke: 2 certify runs, 2-epoch train, losses "
          f"{losses[0]:.4g} -> {losses[1]:.4g}, "
          f"post-train margin {check.max_sym_eig:.3e}")


def test_spectral_routines_match_dense_oracles():
    worst = 0.0
    for k in range(500):
        rng = np.random.default_rng(10_000 + k)
        n = int(rng.integers(1, 13))
        a = rng.uniform(-3.0, 3.0, size=(n, n))

        nonneg = np.abs(a)
        got = numerics.spectral_radius_nonneg(nonneg, tol=1e-9)
        want = float(np.max(np.abs(np.linalg.eigvals(nonneg))))
        worst = max(worst, abs(got - want))
        assert abs(got - want) <= 1e-6, f"draw {k}: radius {got} vs {want}"

        s = 0.5 * (a + a.T)
        got = numerics.max_eig_symmetric(s, tol=1e-9)
        want = float(np.linalg.eigvalsh(s)[-1])
        worst = max(worst, abs(got - want))
        assert abs(got - want) <= 1e-6, f"draw {k}: top eig {got} vs {want}"

        got = numerics.spectral_norm(a, tol=1e-9)
        want = float(np.linalg.svd(a, compute_uv=False)[0])
        worst = max(worst, abs(got - want))
        assert abs(got - want) <= 1e-6, f"draw {k}: norm {got} vs {want}"
    print(f"PASS numerics oracle: 1500 comparisons, worst abs error "
          f"{worst:.2e}")
