"""Versioned binary checkpoints for interrupt/resume training.

Layout (all integers little-endian):

    magic  b"CNCK"
    uint32 format version (currently 1)
    uint64 header length, then that many bytes of JSON (utf-8, sorted
           keys, compact separators)
    per array listed in header["arrays"], in that order:
    uint64 byte length, then raw float64 C-order bytes

The header carries everything non-float: epoch, root seed, config hash,
coupling mode parameters, subnet sizes/rates/metric certificates,
adjacency pairs, activation names, and the array directory with shapes.
Writing is deterministic, so save -> load -> save reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import activations
from .coupling import GwNonlinear, NegativeFeedback
from .dynamics import InterAreaWeights, MultiAreaNet
from .errors import CheckpointError
from .subnets import CertifiedSubnet
from .topology import Adjacency, NetworkLayout, from_pairs
from .training import OptimizerState, _PARAM_KEYS

MAGIC = b"CNCK"
VERSION = 1


@dataclass
class LoadedCheckpoint:
    net: MultiAreaNet
    epoch: int
    seed: int
    optimizer_state: Optional[OptimizerState]
    config_sha256: Optional[str]


def _mode_header(mode) -> dict:
    if isinstance(mode, NegativeFeedback):
        return {"kind": "negative_feedback", "epsilon": mode.epsilon}
    return {"kind": "gw_nonlinear", "ell": mode.ell, "g_psi": mode.g_psi}


def _mode_from_header(h) -> object:
    if h["kind"] == "negative_feedback":
        return NegativeFeedback(epsilon=h["epsilon"])
    if h["kind"] == "gw_nonlinear":
        return GwNonlinear(ell=h["ell"], g_psi=h["g_psi"])
    raise CheckpointError(f"unknown coupling mode {h['kind']!r}")


def save_checkpoint(path, net: MultiAreaNet, epoch: int, seed: int = 0,
                    optimizer_state: Optional[OptimizerState] = None,
                    config_sha256: Optional[str] = None) -> None:
    arrays = []

    def put(name, a):
        arrays.append((name, np.ascontiguousarray(a, dtype=np.float64)))

    for i, sn in enumerate(net.subnets):
        put(f"subnet_w{i}", sn.weights)
        put(f"subnet_m{i}", sn.metric_diag)
    if net.weights.B is not None:
        put("B", net.weights.B)
    put("L", net.weights.L)
    if net.weights.S is not None:
        put("S", net.weights.S)
    put("input_weights", net.input_weights)
    put("output_weights", net.output_weights)
    put("hidden_bias", net.hidden_bias)
    put("output_bias", net.output_bias)
    opt = None
    if optimizer_state is not None:
        keys = sorted(k for k in optimizer_state.m if k in _PARAM_KEYS)
        opt = {"step": optimizer_state.step, "keys": keys}
        for k in keys:
            put(f"opt_m_{k}", optimizer_state.m[k])
            put(f"opt_v_{k}", optimizer_state.v[k])

    header = {
        "version": VERSION,
        "epoch": int(epoch),
        "seed": int(seed),
        "config_sha256": config_sha256,
        "mode": _mode_header(net.mode),
        "sizes": list(net.layout.sizes),
        "adjacency_pairs": [list(p) for p in net.adjacency.pairs()],
        "subnet_rates": [sn.rate for sn in net.subnets],
        "subnet_rhos": [sn.rho for sn in net.subnets],
        "phi": net.phi.name,
        "psi": net.psi.name,
        "dt": net.dt,
        "tau": net.tau,
        "bias_inside_step": net.bias_inside_step,
        "optimizer": opt,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            raw = a.astype("<f8").tobytes(order="C")
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def _read_exact(f, n, what):
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what} "
                              f"({len(raw)} of {n} bytes)")
    return raw


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint "
                                  f"(bad magic bytes)")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} "
                                  f"(this build reads {VERSION})")
        hlen = struct.unpack("<Q", _read_exact(f, 8, "header length"))[0]
        try:
            header = json.loads(_read_exact(f, hlen, "header"))
        except ValueError as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}") from None
        arrays = {}
        for entry in header["arrays"]:
            name, shape = entry["name"], tuple(entry["shape"])
            nbytes = struct.unpack("<Q", _read_exact(f, 8,
                                                     f"{name} length"))[0]
            want = int(np.prod(shape, dtype=np.int64)) * 8
            if nbytes != want:
                raise CheckpointError(
                    f"array {name}: {nbytes} bytes for shape {shape} "
                    f"(expected {want})")
            raw = _read_exact(f, nbytes, name)
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after the last array")

    sizes = header["sizes"]
    subnets = tuple(
        CertifiedSubnet(weights=arrays[f"subnet_w{i}"],
                        metric_diag=arrays[f"subnet_m{i}"],
                        rate=header["subnet_rates"][i],
                        rho=header["subnet_rhos"][i])
        for i in range(len(sizes)))
    adjacency = from_pairs(len(sizes), header["adjacency_pairs"])
    weights = InterAreaWeights(B=arrays.get("B"), L=arrays["L"],
                               S=arrays.get("S"))
    net = MultiAreaNet(layout=NetworkLayout(tuple(sizes)), subnets=subnets,
                       adjacency=adjacency,
                       mode=_mode_from_header(header["mode"]),
                       weights=weights,
                       input_weights=arrays["input_weights"],
                       output_weights=arrays["output_weights"],
                       hidden_bias=arrays["hidden_bias"],
                       output_bias=arrays["output_bias"],
                       phi=activations.get(header["phi"]),
                       psi=activations.get(header["psi"]),
                       tau=header["tau"], dt=header["dt"],
                       bias_inside_step=header["bias_inside_step"])
    opt = None
    if header["optimizer"] is not None:
        opt = OptimizerState(step=header["optimizer"]["step"])
        for k in header["optimizer"]["keys"]:
            opt.m[k] = arrays[f"opt_m_{k}"]
            opt.v[k] = arrays[f"opt_v_{k}"]
    return LoadedCheckpoint(net=net, epoch=header["epoch"],
                            seed=header["seed"], optimizer_state=opt,
                            config_sha256=header.get("config_sha256"))
