import numpy as np
import pytest

from contractnet import checkpoint as ck
from contractnet import config as cfgmod
from contractnet import training as tr
from contractnet.errors import CheckpointError

from test_config import GW, MINIMAL


def _trained_state(text=MINIMAL, epochs=2):
    cfg = cfgmod.parse_config(text)
    net, train_set, test_set = cfgmod.build_experiment(cfg)
    tcfg = tr.TrainConfig(batch_size=16, lr=0.01, epochs=epochs,
                          lr_cut_epochs=(), verify_certificate=False,
                          seed=cfg.seed)
    state = tr.OptimizerState()
    tr.train(net, train_set, test_set, tcfg, optimizer_state=state)
    return cfg, net, train_set, test_set, tcfg, state


def _assert_nets_equal(a, b):
    assert a.layout.sizes == b.layout.sizes
    assert np.array_equal(a.adjacency.flags, b.adjacency.flags)
    assert a.mode == b.mode
    for sa, sb in zip(a.subnets, b.subnets):
        assert np.array_equal(sa.weights, sb.weights)
        assert np.array_equal(sa.metric_diag, sb.metric_diag)
        assert sa.rate == sb.rate and sa.rho == sb.rho
    if a.weights.B is None:
        assert b.weights.B is None
    else:
        assert np.array_equal(a.weights.B, b.weights.B)
    assert np.array_equal(a.weights.L, b.weights.L)
    assert np.array_equal(a.input_weights, b.input_weights)
    assert np.array_equal(a.output_weights, b.output_weights)
    assert np.array_equal(a.hidden_bias, b.hidden_bias)
    assert np.array_equal(a.output_bias, b.output_bias)
    assert a.phi.name == b.phi.name and a.psi.name == b.psi.name
    assert a.dt == b.dt and a.tau == b.tau


def test_round_trip_nf(tmp_path):
    _, net, _, _, _, state = _trained_state()
    path = tmp_path / "nf.ckpt"
    ck.save_checkpoint(path, net, epoch=2, seed=0, optimizer_state=state,
                       config_sha256="ab" * 32)
    loaded = ck.load_checkpoint(path)
    _assert_nets_equal(net, loaded.net)
    assert loaded.epoch == 2 and loaded.seed == 0
    assert loaded.config_sha256 == "ab" * 32
    assert loaded.optimizer_state.step == state.step
    for key in state.m:
        assert np.array_equal(loaded.optimizer_state.m[key], state.m[key])
        assert np.array_equal(loaded.optimizer_state.v[key], state.v[key])


def test_round_trip_gw_without_optimizer(tmp_path):
    cfg = cfgmod.parse_config(GW)
    net, _, _ = cfgmod.build_experiment(cfg)
    path = tmp_path / "gw.ckpt"
    ck.save_checkpoint(path, net, epoch=0, seed=cfg.seed)
    loaded = ck.load_checkpoint(path)
    _assert_nets_equal(net, loaded.net)
    assert loaded.optimizer_state is None
    assert loaded.net.weights.B is None


def test_save_load_save_byte_identical(tmp_path):
    _, net, _, _, _, state = _trained_state()
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    ck.save_checkpoint(p1, net, epoch=2, seed=0, optimizer_state=state)
    loaded = ck.load_checkpoint(p1)
    ck.save_checkpoint(p2, loaded.net, epoch=loaded.epoch, seed=loaded.seed,
                       optimizer_state=loaded.optimizer_state)
    assert p1.read_bytes() == p2.read_bytes()


def test_corrupt_files_rejected(tmp_path):
    _, net, _, _, _, state = _trained_state()
    path = tmp_path / "ok.ckpt"
    ck.save_checkpoint(path, net, epoch=1, seed=0)
    raw = path.read_bytes()

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError) as ei:
        ck.load_checkpoint(bad_magic)
    assert "magic" in str(ei.value)

    bad_version = tmp_path / "version.ckpt"
    bad_version.write_bytes(raw[:4] + b"\x63\x00\x00\x00" + raw[8:])
    with pytest.raises(CheckpointError) as ei:
        ck.load_checkpoint(bad_version)
    assert "version 99" in str(ei.value)

    short = tmp_path / "short.ckpt"
    short.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError) as ei:
        ck.load_checkpoint(short)
    assert "truncated" in str(ei.value)

    trailing = tmp_path / "trailing.ckpt"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError) as ei:
        ck.load_checkpoint(trailing)
    assert "trailing" in str(ei.value)


def test_resume_through_checkpoint_is_bit_identical(tmp_path):
    # straight 4-epoch run
    cfg, net_a, train_set, test_set, _, state_a = _trained_state(epochs=4)
    # 2 epochs, checkpoint to disk, reload, 2 more
    _, net_b, _, _, _, state_b = _trained_state(epochs=2)
    path = tmp_path / "mid.ckpt"
    ck.save_checkpoint(path, net_b, epoch=2, seed=cfg.seed,
                       optimizer_state=state_b)
    loaded = ck.load_checkpoint(path)
    tcfg = tr.TrainConfig(batch_size=16, lr=0.01, epochs=4, lr_cut_epochs=(),
                          verify_certificate=False, seed=loaded.seed)
    tr.train(loaded.net, train_set, test_set, tcfg,
             start_epoch=loaded.epoch,
             optimizer_state=loaded.optimizer_state)
    _assert_nets_equal(net_a, loaded.net)
    assert loaded.optimizer_state.step == state_a.step
    for key in state_a.m:
        assert np.array_equal(loaded.optimizer_state.m[key], state_a.m[key])
