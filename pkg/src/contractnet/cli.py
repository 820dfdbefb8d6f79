"""Command-line entry point.

Subcommands: certify, train, eval, ablate, report. Heavy imports happen
after argument parsing so --threads can cap the BLAS pools through the
environment before numpy loads (only effective when this process starts
here; as a library call the cap may come too late to shrink pools).

Exit codes: 0 success, 1 usage/config/data errors, 2 certification
failure, 3 training divergence. CONTRACTNET_LOG=debug|info|warning
controls verbosity (default info).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("contractnet")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CERTIFICATION = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the scripting contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contractnet",
                description="certified-stable multi-area RNN experiments")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, config=True, out=True, checkpoint=False):
        if config:
            sp.add_argument("--config", required=True,
                            help="experiment config (YAML)")
        if out:
            sp.add_argument("--out", default=None,
                            help="output directory (default: config out_dir)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP thread pools")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True,
                            help="checkpoint file to load")

    sp = sub.add_parser("certify", parents=[], add_help=True,
                        help="build the pool and verify all certificates")
    common(sp)

    sp = sub.add_parser("train", help="train per the config")
    common(sp)
    sp.add_argument("--checkpoint", default=None,
                    help="checkpoint to resume from (with --resume)")
    sp.add_argument("--resume", action="store_true",
                    help="continue training from --checkpoint")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test set")
    common(sp, checkpoint=True)

    sp = sub.add_parser("ablate",
                        help="ablation sweep over subnets and weight types")
    common(sp, checkpoint=True)
    sp.add_argument("--targets", default="total,inter_area,intra_area,"
                    "input_only,output_only",
                    help="comma-separated ablation kinds")

    sp = sub.add_parser("report", help="render figures and report.json")
    sp.add_argument("--out", required=True, help="run directory to read")
    sp.add_argument("--threads", type=int, default=None)
    return p


def _setup_threads(threads):
    if threads is None:
        return
    if threads < 1:
        raise SystemExit(EXIT_USAGE)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _setup_logging():
    level = os.environ.get("CONTRACTNET_LOG", "info").lower()
    chosen = {"debug": logging.DEBUG, "info": logging.INFO,
              "warning": logging.WARNING, "quiet": logging.ERROR,
              "error": logging.ERROR}.get(level, logging.INFO)
    logging.basicConfig(level=chosen, format="%(message)s", stream=sys.stderr)


def _load(args):
    from .config import load_config
    cfg = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    out_dir = args.out if args.out is not None else cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    return cfg, out_dir


def _config_hash(cfg) -> str:
    import hashlib
    from .config import serialize_config
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_certify(args) -> int:
    from .config import build_adjacency, build_pool, coupling_mode, task_dims
    from .coupling import verify_contraction_certificate
    from .dynamics import build_network
    from .errors import CertificationError
    from .topology import NetworkLayout, count_trainable_params
    from . import activations

    cfg, out_dir = _load(args)
    report_path = os.path.join(out_dir, "certify.json")
    try:
        pool = build_pool(cfg)
    except CertificationError as e:
        _write_json(report_path, {"passed": False, "error": str(e)})
        log.error("certification failed: %s", e)
        return EXIT_CERTIFICATION

    adjacency = build_adjacency(cfg.topology, cfg.subnets.count, cfg.seed)
    layout = NetworkLayout(cfg.subnets.sizes)
    input_dim, classes = task_dims(cfg)
    params = count_trainable_params(layout, adjacency, input_dim, classes)
    net = build_network(pool.subnets, adjacency, coupling_mode(cfg, pool),
                        input_dim=input_dim, classes=classes, seed=cfg.seed,
                        phi=activations.get(cfg.net.phi),
                        psi=activations.get(cfg.net.psi),
                        coupling_std=cfg.net.coupling_std,
                        dt=cfg.net.dt, tau=cfg.net.tau)
    check = verify_contraction_certificate(net, num_states=32, seed=cfg.seed,
                                           corner_samples=8)
    payload = {
        "passed": bool(check.passed),
        "trainable_params": params,
        "subnet_count": len(pool.subnets),
        "pairs": adjacency.pairs(),
        "subnets": [{"n": sn.n, "rho": sn.rho, "rate": sn.rate,
                     "metric_min": float(sn.metric_diag.min()),
                     "metric_max": float(sn.metric_diag.max()),
                     "attempts": pool.attempts[i]}
                    for i, sn in enumerate(pool.subnets)],
        "verifier": {"max_sym_eig": check.max_sym_eig,
                     "probes": check.probes,
                     "worst_probe": check.worst_probe},
    }
    _write_json(report_path, payload)
    log.info("certify: %d subnets, %d params, verifier %s "
             "(max sym eig %.3g)", len(pool.subnets), params,
             "PASS" if check.passed else "FAIL", check.max_sym_eig)
    return EXIT_OK if check.passed else EXIT_CERTIFICATION


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .config import build_experiment
    from .dynamics import refresh_coupling
    from .training import train

    cfg, out_dir = _load(args)
    history_csv = os.path.join(out_dir, "history.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    cfg_hash = _config_hash(cfg)

    start_epoch = 0
    optimizer_state = None
    if args.resume:
        if not args.checkpoint:
            log.error("--resume needs --checkpoint")
            return EXIT_USAGE
        loaded = load_checkpoint(args.checkpoint)
        if loaded.config_sha256 and loaded.config_sha256 != cfg_hash:
            log.error("checkpoint was written by a different config "
                      "(hash mismatch)")
            return EXIT_USAGE
        net = loaded.net
        refresh_coupling(net)
        start_epoch = loaded.epoch
        optimizer_state = loaded.optimizer_state
        _, train_set, test_set = build_experiment(cfg)
        log.info("resuming at epoch %d", start_epoch)
    else:
        net, train_set, test_set = build_experiment(cfg)

    with open(os.path.join(out_dir, "config.yaml"), "w") as f:
        from .config import serialize_config
        f.write(serialize_config(cfg))

    train_cfg = cfg.train
    if train_cfg.seed != cfg.seed:
        from dataclasses import replace
        train_cfg = replace(train_cfg, seed=cfg.seed)
    from .training import OptimizerState
    state = optimizer_state if optimizer_state is not None else OptimizerState()

    def checkpoint_each_epoch(epoch, net_, state_, _history):
        # overwrite in place so an interrupted run resumes at the last
        # completed epoch
        save_checkpoint(ckpt_path, net_, epoch=epoch + 1, seed=cfg.seed,
                        optimizer_state=state_, config_sha256=cfg_hash)

    history = train(net, train_set, test_set, train_cfg,
                    csv_path=history_csv, start_epoch=start_epoch,
                    optimizer_state=state,
                    epoch_callback=checkpoint_each_epoch)
    save_checkpoint(ckpt_path, net, epoch=start_epoch + history.epochs_run,
                    seed=cfg.seed, optimizer_state=state,
                    config_sha256=cfg_hash)
    if history.diverged:
        log.error("training diverged: %s", history.diagnostic)
        return EXIT_DIVERGENCE
    acc = [a for a in history.test_acc if a == a]
    log.info("train: %d epochs, final loss %.4g, test acc %s",
             history.epochs_run,
             history.train_loss[-1] if history.train_loss else float("nan"),
             f"{acc[-1]:.4f}" if acc else "n/a")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .analysis import evaluate
    from .checkpoint import load_checkpoint
    from .config import load_task

    cfg, out_dir = _load(args)
    loaded = load_checkpoint(args.checkpoint)
    _, test_set = load_task(cfg)
    res = evaluate(loaded.net, test_set)
    payload = {"accuracy": res.accuracy,
               "per_class": res.per_class.tolist(),
               "confusion": res.confusion.tolist(),
               "epoch": loaded.epoch}
    _write_json(os.path.join(out_dir, "eval.json"), payload)
    log.info("eval: accuracy %.4f over %d sequences", res.accuracy,
             test_set.num)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .analysis import (AblationTarget, ablation_sweep, pair_strengths,
                           write_ablation_csv, write_ablation_json)
    from .checkpoint import load_checkpoint
    from .config import load_task
    from .reporting import write_pair_strengths_csv

    cfg, out_dir = _load(args)
    loaded = load_checkpoint(args.checkpoint)
    _, test_set = load_task(cfg)
    kinds = [k.strip() for k in args.targets.split(",") if k.strip()]
    p = loaded.net.layout.p
    targets = [AblationTarget(kind, (i,)) for kind in kinds
               for i in range(p)]
    report = ablation_sweep(loaded.net, test_set, targets)
    write_ablation_csv(report, os.path.join(out_dir, "ablation.csv"))
    write_ablation_json(report, os.path.join(out_dir, "ablation.json"))
    write_pair_strengths_csv(pair_strengths(loaded.net),
                             os.path.join(out_dir, "pair_strengths.csv"))
    log.info("ablate: baseline %.4f, %d targets", report.baseline.accuracy,
             len(targets))
    return EXIT_OK


def cmd_report(args) -> int:
    from .reporting import consolidate_run
    summary = consolidate_run(args.out)
    log.info("report: wrote %s (%d figures)",
             os.path.join(args.out, "report.json"),
             len(summary["figures"]))
    return EXIT_OK


_COMMANDS = {"certify": cmd_certify, "train": cmd_train, "eval": cmd_eval,
             "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    _setup_threads(getattr(args, "threads", None))
    _setup_logging()
    from .errors import (CertificationError, CheckpointError, ConfigError,
                         DataFormatError)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataFormatError, CheckpointError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except CertificationError as e:
        log.error("certification failure: %s", e)
        return EXIT_CERTIFICATION


if __name__ == "__main__":
    sys.exit(main())
