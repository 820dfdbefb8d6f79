"""Experiment configuration: YAML schema, validation, and assembly.

One config file describes a full experiment: the subnet pool, the
inter-area topology, the coupling mode, the task, and the training
schedule. Unknown keys anywhere are hard errors (reported with their
full dotted path) so a typo cannot silently fall back to a default.
Relative dataset paths resolve against the current working directory.

Schema (defaults in parentheses):

    seed: int (0)
    out_dir: str ("runs/default")
    subnets:
      count: int                 # number of subnetworks p
      size: int                  # shared width, or sizes: [..] per slot
      sparsity: float
      magnitude: float
      metric: diagonal|identity (diagonal)
      max_attempts: int (100)
    topology:
      kind: all_to_all|global_workspace|gw_cluster|random_pairs|pairs
      center: int (0)            # global_workspace
      k: int                     # gw_cluster
      density: float             # random_pairs
      pair_mode: bernoulli|exact_count (bernoulli)
      pairs: [[i, j], ..]        # pairs
    coupling:
      mode: negative_feedback|gw_nonlinear
      epsilon: float (0.0)       # negative_feedback only
      ell: float|.inf            # gw only; explicit block cap
      ell_scale: float (1.0)     # gw only; scales the derived bound
      g_psi: float (1.0)         # gw only
    net:
      phi: relu|tanh|identity (relu)
      psi: identity|relu|tanh (identity)
      dt: float (0.03)
      tau: float (1.0)
      coupling_std: float|null (null)
    task:
      kind: idx|cifar10|synthetic
      train_images/train_labels/test_images/test_labels: paths   # idx
      train_files/test_files: [paths]                            # cifar10
      order: raster|fixed_permutation (raster)
      downsample: int (1)
      synthetic: delayed_class|sparse_pattern
      classes/seq_len/input_dim/noise/template_density/num_train/num_test
      limit_train/limit_test: int|null (null)   # truncate loaded sets
    train:
      batch_size/lr/epochs/lr_cut_epochs/lr_cut_factor/optimizer/
      log_every/verify_certificate/gw_projection
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from . import activations, datasets, seeding, topology
from .coupling import GwNonlinear, NegativeFeedback, gw_block_bound
from .dynamics import build_network
from .errors import ConfigError
from .subnets import SubnetSpec, generate_certified_pool
from .training import TrainConfig


def _require(section: dict, path: str, allowed) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {path}.{unknown[0]!r}"
                          f" (allowed: {', '.join(sorted(allowed))})")


def _get(section, path, key, kind, default=None, required=False):
    if key not in section or section[key] is None:
        if required:
            raise ConfigError(f"missing required key {path}.{key}")
        return default
    v = section[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is not None and (not isinstance(v, kind) or isinstance(v, bool)
                             and kind is not bool):
        raise ConfigError(f"{path}.{key} must be {kind.__name__}, "
                          f"got {type(v).__name__}")
    return v


@dataclass(frozen=True)
class SubnetsCfg:
    sizes: tuple
    sparsity: float
    magnitude: float
    metric: str = "diagonal"
    max_attempts: int = 100

    @property
    def count(self) -> int:
        return len(self.sizes)


@dataclass(frozen=True)
class TopologyCfg:
    kind: str
    center: int = 0
    k: Optional[int] = None
    density: Optional[float] = None
    pair_mode: str = "bernoulli"
    pairs: tuple = ()


@dataclass(frozen=True)
class CouplingCfg:
    mode: str
    epsilon: float = 0.0
    ell: Optional[float] = None
    ell_scale: float = 1.0
    g_psi: float = 1.0


@dataclass(frozen=True)
class NetCfg:
    phi: str = "relu"
    psi: str = "identity"
    dt: float = 0.03
    tau: float = 1.0
    coupling_std: Optional[float] = None


@dataclass(frozen=True)
class TaskCfg:
    kind: str
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_files: tuple = ()
    test_files: tuple = ()
    order: str = "raster"
    downsample: int = 1
    synthetic: Optional[str] = None
    classes: int = 4
    seq_len: int = 50
    input_dim: Optional[int] = None
    noise: float = 1.0
    template_density: float = 0.25
    num_train: int = 2000
    num_test: int = 500
    limit_train: Optional[int] = None
    limit_test: Optional[int] = None


@dataclass(frozen=True)
class ExperimentConfig:
    subnets: SubnetsCfg
    topology: TopologyCfg
    coupling: CouplingCfg
    task: TaskCfg
    train: TrainConfig
    net: NetCfg = field(default_factory=NetCfg)
    seed: int = 0
    out_dir: str = "runs/default"


_TOP_KEYS = ("seed", "out_dir", "subnets", "topology", "coupling", "net",
             "task", "train")


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _require(raw, "config", _TOP_KEYS)
    for name in ("subnets", "topology", "coupling", "task"):
        if name not in raw:
            raise ConfigError(f"missing required section config.{name}")
        if not isinstance(raw[name], dict):
            raise ConfigError(f"config.{name} must be a mapping")

    sub = _parse_subnets(raw["subnets"])
    top = _parse_topology(raw["topology"], sub.count)
    cpl = _parse_coupling(raw["coupling"], sub)
    net = _parse_net(raw.get("net") or {})
    if cpl.mode == "negative_feedback" and net.psi != "identity":
        raise ConfigError("negative_feedback coupling requires net.psi = "
                          "identity")
    task = _parse_task(raw["task"])
    train = _parse_train(raw.get("train") or {})
    seed = _get(raw, "config", "seed", int, default=0)
    out_dir = _get(raw, "config", "out_dir", str, default="runs/default")
    return ExperimentConfig(subnets=sub, topology=top, coupling=cpl, net=net,
                            task=task, train=train, seed=seed, out_dir=out_dir)


def _parse_subnets(sec) -> SubnetsCfg:
    _require(sec, "subnets", ("count", "size", "sizes", "sparsity",
                              "magnitude", "metric", "max_attempts"))
    if "sizes" in sec and sec["sizes"] is not None:
        sizes = sec["sizes"]
        if not isinstance(sizes, list) or not sizes or \
                any(not isinstance(s, int) or s < 1 for s in sizes):
            raise ConfigError("subnets.sizes must be a list of positive ints")
        if "count" in sec and sec["count"] != len(sizes):
            raise ConfigError(f"subnets.count = {sec['count']} disagrees with "
                              f"len(subnets.sizes) = {len(sizes)}")
        if "size" in sec:
            raise ConfigError("give subnets.size or subnets.sizes, not both")
        sizes = tuple(sizes)
    else:
        count = _get(sec, "subnets", "count", int, required=True)
        size = _get(sec, "subnets", "size", int, required=True)
        if count < 2 or size < 1:
            raise ConfigError("need subnets.count >= 2 and subnets.size >= 1")
        sizes = (size,) * count
    metric = _get(sec, "subnets", "metric", str, default="diagonal")
    if metric not in ("diagonal", "identity"):
        raise ConfigError(f"subnets.metric must be diagonal or identity, "
                          f"got {metric!r}")
    return SubnetsCfg(
        sizes=sizes,
        sparsity=_get(sec, "subnets", "sparsity", float, required=True),
        magnitude=_get(sec, "subnets", "magnitude", float, required=True),
        metric=metric,
        max_attempts=_get(sec, "subnets", "max_attempts", int, default=100))


def _parse_topology(sec, p) -> TopologyCfg:
    _require(sec, "topology", ("kind", "center", "k", "density", "pair_mode",
                               "pairs"))
    kind = _get(sec, "topology", "kind", str, required=True)
    known = ("all_to_all", "global_workspace", "gw_cluster", "random_pairs",
             "pairs")
    if kind not in known:
        raise ConfigError(f"topology.kind must be one of {', '.join(known)}, "
                          f"got {kind!r}")
    needs = {"all_to_all": (), "global_workspace": ("center",),
             "gw_cluster": ("k",), "random_pairs": ("density", "pair_mode"),
             "pairs": ("pairs",)}[kind]
    for key in ("center", "k", "density", "pair_mode", "pairs"):
        if key in sec and key not in needs:
            raise ConfigError(f"topology.{key} does not apply to "
                              f"kind {kind!r}")
    cfg = TopologyCfg(
        kind=kind,
        center=_get(sec, "topology", "center", int, default=0),
        k=_get(sec, "topology", "k", int),
        density=_get(sec, "topology", "density", float),
        pair_mode=_get(sec, "topology", "pair_mode", str,
                       default="bernoulli"),
        pairs=tuple(tuple(x) for x in sec.get("pairs") or ()))
    build_adjacency(cfg, p, seed=0)  # fail fast on bad parameters
    return cfg


def _parse_coupling(sec, sub: SubnetsCfg) -> CouplingCfg:
    _require(sec, "coupling", ("mode", "epsilon", "ell", "ell_scale",
                               "g_psi"))
    mode = _get(sec, "coupling", "mode", str, required=True)
    if mode == "negative_feedback":
        for key in ("ell", "ell_scale", "g_psi"):
            if key in sec:
                raise ConfigError(f"coupling.{key} does not apply to "
                                  f"negative_feedback")
        if sub.metric != "diagonal":
            raise ConfigError("negative_feedback pairs with subnets.metric "
                              "= diagonal")
        return CouplingCfg(mode=mode, epsilon=_get(sec, "coupling", "epsilon",
                                                   float, default=0.0))
    if mode == "gw_nonlinear":
        if "epsilon" in sec:
            raise ConfigError("coupling.epsilon does not apply to "
                              "gw_nonlinear")
        if sub.metric != "identity":
            raise ConfigError("gw_nonlinear needs subnets.metric = identity")
        ell = sec.get("ell")
        if ell == ".inf" or ell == "inf":
            ell = float("inf")
        if ell is not None and not isinstance(ell, (int, float)):
            raise ConfigError("coupling.ell must be a number or .inf")
        if ell is not None and "ell_scale" in sec:
            raise ConfigError("give coupling.ell or coupling.ell_scale, "
                              "not both")
        return CouplingCfg(
            mode=mode,
            ell=None if ell is None else float(ell),
            ell_scale=_get(sec, "coupling", "ell_scale", float, default=1.0),
            g_psi=_get(sec, "coupling", "g_psi", float, default=1.0))
    raise ConfigError(f"coupling.mode must be negative_feedback or "
                      f"gw_nonlinear, got {mode!r}")


def _parse_net(sec) -> NetCfg:
    _require(sec, "net", ("phi", "psi", "dt", "tau", "coupling_std"))
    phi = _get(sec, "net", "phi", str, default="relu")
    psi = _get(sec, "net", "psi", str, default="identity")
    for name in (phi, psi):
        try:
            activations.get(name)
        except ValueError as e:
            raise ConfigError(f"net: {e}") from None
    return NetCfg(phi=phi, psi=psi,
                  dt=_get(sec, "net", "dt", float, default=0.03),
                  tau=_get(sec, "net", "tau", float, default=1.0),
                  coupling_std=_get(sec, "net", "coupling_std", float))


def _parse_task(sec) -> TaskCfg:
    _require(sec, "task", ("kind", "train_images", "train_labels",
                           "test_images", "test_labels", "train_files",
                           "test_files", "order", "downsample", "synthetic",
                           "classes", "seq_len", "input_dim", "noise",
                           "template_density", "num_train", "num_test",
                           "limit_train", "limit_test"))
    kind = _get(sec, "task", "kind", str, required=True)
    if kind not in ("idx", "cifar10", "synthetic"):
        raise ConfigError(f"task.kind must be idx, cifar10, or synthetic, "
                          f"got {kind!r}")
    order = _get(sec, "task", "order", str, default="raster")
    if order not in ("raster", "fixed_permutation"):
        raise ConfigError(f"task.order must be raster or fixed_permutation, "
                          f"got {order!r}")
    cfg = TaskCfg(
        kind=kind,
        train_images=_get(sec, "task", "train_images", str),
        train_labels=_get(sec, "task", "train_labels", str),
        test_images=_get(sec, "task", "test_images", str),
        test_labels=_get(sec, "task", "test_labels", str),
        train_files=tuple(sec.get("train_files") or ()),
        test_files=tuple(sec.get("test_files") or ()),
        order=order,
        downsample=_get(sec, "task", "downsample", int, default=1),
        synthetic=_get(sec, "task", "synthetic", str),
        classes=_get(sec, "task", "classes", int, default=4),
        seq_len=_get(sec, "task", "seq_len", int, default=50),
        input_dim=_get(sec, "task", "input_dim", int),
        noise=_get(sec, "task", "noise", float, default=1.0),
        template_density=_get(sec, "task", "template_density", float,
                              default=0.25),
        num_train=_get(sec, "task", "num_train", int, default=2000),
        num_test=_get(sec, "task", "num_test", int, default=500),
        limit_train=_get(sec, "task", "limit_train", int),
        limit_test=_get(sec, "task", "limit_test", int))
    if kind == "idx":
        for key in ("train_images", "train_labels", "test_images",
                    "test_labels"):
            if getattr(cfg, key) is None:
                raise ConfigError(f"task.{key} is required for kind idx")
    if kind == "cifar10":
        if not cfg.train_files or not cfg.test_files:
            raise ConfigError("task.train_files and task.test_files are "
                              "required for kind cifar10")
    if kind == "synthetic":
        if cfg.synthetic not in ("delayed_class", "sparse_pattern"):
            raise ConfigError("task.synthetic must be delayed_class or "
                              "sparse_pattern")
    return cfg


def _parse_train(sec) -> TrainConfig:
    _require(sec, "train", ("batch_size", "lr", "epochs", "lr_cut_epochs",
                            "lr_cut_factor", "optimizer", "log_every",
                            "verify_certificate", "gw_projection"))
    cuts = sec.get("lr_cut_epochs")
    if cuts is None:
        cuts = (150, 200)
    elif isinstance(cuts, list):
        cuts = tuple(cuts)
    else:
        raise ConfigError("train.lr_cut_epochs must be a list")
    gw_proj = sec.get("gw_projection")
    if gw_proj is not None and not isinstance(gw_proj, bool):
        raise ConfigError("train.gw_projection must be true, false, or null")
    verify = sec.get("verify_certificate", True)
    if not isinstance(verify, bool):
        raise ConfigError("train.verify_certificate must be a bool")
    try:
        return TrainConfig(
            batch_size=_get(sec, "train", "batch_size", int, default=128),
            lr=_get(sec, "train", "lr", float, default=0.002),
            epochs=_get(sec, "train", "epochs", int, default=250),
            lr_cut_epochs=cuts,
            lr_cut_factor=_get(sec, "train", "lr_cut_factor", float,
                               default=0.1),
            optimizer=_get(sec, "train", "optimizer", str, default="adam"),
            log_every=_get(sec, "train", "log_every", int, default=1),
            verify_certificate=verify,
            gw_projection=gw_proj)
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            cfg = parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    for ref in _referenced_paths(cfg):
        if not os.path.exists(ref):
            raise ConfigError(f"referenced path does not exist: {ref}")
    return cfg


def _referenced_paths(cfg: ExperimentConfig):
    t = cfg.task
    if t.kind == "idx":
        return [t.train_images, t.train_labels, t.test_images, t.test_labels]
    if t.kind == "cifar10":
        return list(t.train_files) + list(t.test_files)
    return []


def canonical_dict(cfg: ExperimentConfig) -> dict:
    """Fully materialized nested dict; parse(serialize(.)) is a fixpoint."""
    out = {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "subnets": {"sizes": list(cfg.subnets.sizes),
                    "sparsity": cfg.subnets.sparsity,
                    "magnitude": cfg.subnets.magnitude,
                    "metric": cfg.subnets.metric,
                    "max_attempts": cfg.subnets.max_attempts},
        "topology": {"kind": cfg.topology.kind},
        "coupling": {"mode": cfg.coupling.mode},
        "net": {"phi": cfg.net.phi, "psi": cfg.net.psi, "dt": cfg.net.dt,
                "tau": cfg.net.tau, "coupling_std": cfg.net.coupling_std},
        "task": {"kind": cfg.task.kind, "order": cfg.task.order,
                 "downsample": cfg.task.downsample,
                 "limit_train": cfg.task.limit_train,
                 "limit_test": cfg.task.limit_test},
        "train": {"batch_size": cfg.train.batch_size, "lr": cfg.train.lr,
                  "epochs": cfg.train.epochs,
                  "lr_cut_epochs": list(cfg.train.lr_cut_epochs),
                  "lr_cut_factor": cfg.train.lr_cut_factor,
                  "optimizer": cfg.train.optimizer,
                  "log_every": cfg.train.log_every,
                  "verify_certificate": cfg.train.verify_certificate,
                  "gw_projection": cfg.train.gw_projection},
    }
    top = out["topology"]
    if cfg.topology.kind == "global_workspace":
        top["center"] = cfg.topology.center
    elif cfg.topology.kind == "gw_cluster":
        top["k"] = cfg.topology.k
    elif cfg.topology.kind == "random_pairs":
        top["density"] = cfg.topology.density
        top["pair_mode"] = cfg.topology.pair_mode
    elif cfg.topology.kind == "pairs":
        top["pairs"] = [list(x) for x in cfg.topology.pairs]
    cpl = out["coupling"]
    if cfg.coupling.mode == "negative_feedback":
        cpl["epsilon"] = cfg.coupling.epsilon
    else:
        cpl["g_psi"] = cfg.coupling.g_psi
        if cfg.coupling.ell is not None:
            cpl["ell"] = cfg.coupling.ell
        else:
            cpl["ell_scale"] = cfg.coupling.ell_scale
    task = out["task"]
    t = cfg.task
    if t.kind == "idx":
        task.update(train_images=t.train_images, train_labels=t.train_labels,
                    test_images=t.test_images, test_labels=t.test_labels)
    elif t.kind == "cifar10":
        task.update(train_files=list(t.train_files),
                    test_files=list(t.test_files))
    else:
        task.update(synthetic=t.synthetic, classes=t.classes,
                    seq_len=t.seq_len, input_dim=t.input_dim, noise=t.noise,
                    template_density=t.template_density,
                    num_train=t.num_train, num_test=t.num_test)
    return out


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(canonical_dict(cfg), sort_keys=True,
                          default_flow_style=False)


def build_adjacency(top: TopologyCfg, p: int, seed: int):
    if top.kind == "all_to_all":
        return topology.all_to_all(p)
    if top.kind == "global_workspace":
        return topology.global_workspace(p, top.center)
    if top.kind == "gw_cluster":
        if top.k is None:
            raise ConfigError("topology.k is required for gw_cluster")
        return topology.gw_cluster(p, top.k)
    if top.kind == "random_pairs":
        if top.density is None:
            raise ConfigError("topology.density is required for random_pairs")
        return topology.random_pairs(
            p, top.density, seeding.derive_seed(seed, seeding.ADJACENCY),
            mode=top.pair_mode)
    if not top.pairs:
        raise ConfigError("topology.pairs is required for kind pairs")
    return topology.from_pairs(p, top.pairs)


def build_pool(cfg: ExperimentConfig):
    specs = [SubnetSpec(n=n, sparsity=cfg.subnets.sparsity,
                        magnitude=cfg.subnets.magnitude,
                        seed=seeding.derive_seed(cfg.seed, seeding.SUBNET, i))
             for i, n in enumerate(cfg.subnets.sizes)]
    return generate_certified_pool(specs, metric=cfg.subnets.metric,
                                   max_attempts=cfg.subnets.max_attempts)


def coupling_mode(cfg: ExperimentConfig, pool):
    if cfg.coupling.mode == "negative_feedback":
        return NegativeFeedback(epsilon=cfg.coupling.epsilon)
    if cfg.coupling.ell is not None:
        ell = cfg.coupling.ell
    else:
        lam = min(sn.rate for sn in pool.subnets)
        ell = cfg.coupling.ell_scale * gw_block_bound(
            lam, cfg.coupling.g_psi, cfg.subnets.count)
    return GwNonlinear(ell=ell, g_psi=cfg.coupling.g_psi)


def task_dims(cfg: ExperimentConfig):
    """(input_dim, classes) without materializing sequence arrays.

    cifar10 is fixed at 3 channels / 10 classes; idx images feed one
    intensity per step and the class count is read from the label files;
    synthetic dims follow the task defaults.
    """
    t = cfg.task
    if t.kind == "synthetic":
        if t.input_dim is not None:
            return t.input_dim, t.classes
        base = t.classes if t.synthetic == "delayed_class" else 2 * t.classes
        return base, t.classes
    if t.kind == "cifar10":
        return 3, 10
    classes = 0
    for imgs, labs in ((t.train_images, t.train_labels),
                       (t.test_images, t.test_labels)):
        classes = max(classes, datasets.load_idx(imgs, labs).classes)
    return 1, classes


def load_task(cfg: ExperimentConfig):
    """Materialize (train_set, test_set) as step-indexed sequences."""
    t = cfg.task
    if t.kind == "synthetic":
        train = datasets.synthetic_task(
            t.synthetic, t.num_train, seed=seeding.derive_seed(
                cfg.seed, seeding.DATA, 0),
            classes=t.classes, seq_len=t.seq_len, input_dim=t.input_dim,
            noise=t.noise, template_density=t.template_density)
        test = datasets.synthetic_task(
            t.synthetic, t.num_test, seed=seeding.derive_seed(
                cfg.seed, seeding.DATA, 1),
            classes=t.classes, seq_len=t.seq_len, input_dim=t.input_dim,
            noise=t.noise, template_density=t.template_density)
        return train, test
    if t.kind == "idx":
        train_imgs = datasets.load_idx(t.train_images, t.train_labels)
        test_imgs = datasets.load_idx(t.test_images, t.test_labels)
    else:
        train_imgs = datasets.load_cifar10_binary(list(t.train_files))
        test_imgs = datasets.load_cifar10_binary(list(t.test_files))
    if t.downsample != 1:
        train_imgs = datasets.downsample(train_imgs, t.downsample)
        test_imgs = datasets.downsample(test_imgs, t.downsample)
    order_seed = seeding.derive_seed(cfg.seed, seeding.DATA, 2)
    train = datasets.to_pixel_sequence(train_imgs, order=t.order,
                                       seed=order_seed)
    test = datasets.to_pixel_sequence(test_imgs, order=t.order,
                                      seed=order_seed)
    if t.limit_train is not None:
        train = train.subset(np.arange(min(t.limit_train, train.num)))
    if t.limit_test is not None:
        test = test.subset(np.arange(min(t.limit_test, test.num)))
    return train, test


def build_experiment(cfg: ExperimentConfig):
    """Assemble (net, train_set, test_set) from a parsed config."""
    train_set, test_set = load_task(cfg)
    if train_set.classes != test_set.classes:
        classes = max(train_set.classes, test_set.classes)
        train_set = datasets.SequenceDataset(train_set.sequences,
                                             train_set.labels, classes)
        test_set = datasets.SequenceDataset(test_set.sequences,
                                            test_set.labels, classes)
    pool = build_pool(cfg)
    adjacency = build_adjacency(cfg.topology, cfg.subnets.count, cfg.seed)
    mode = coupling_mode(cfg, pool)
    net = build_network(pool.subnets, adjacency, mode,
                        input_dim=train_set.input_dim,
                        classes=train_set.classes, seed=cfg.seed,
                        phi=activations.get(cfg.net.phi),
                        psi=activations.get(cfg.net.psi),
                        coupling_std=cfg.net.coupling_std,
                        dt=cfg.net.dt, tau=cfg.net.tau)
    return net, train_set, test_set
