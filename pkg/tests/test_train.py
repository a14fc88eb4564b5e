import math

import numpy as np
import pytest

from eeds.images import make_dataset
from eeds.models import build_model
from eeds.ops import LayerParams
from eeds.train import (Checkpoint, CheckpointError, NonFiniteGradient, OptimizerState, TrainConfig,
                        TrainingDiverged, batch_loss_and_grad, bilinear_kernel, checkpoint_bytes,
                        init_params, load_checkpoint, parse_checkpoint, prepare_data, save_checkpoint,
                        sgd_step, train)


def one_param(w, g):
    p = LayerParams(np.array([[[[w]]]], np.float64), np.zeros(1), name="p")
    p.grad_w[...] = g
    return {"p": p}


def test_plain_step():
    layers = one_param(0.0, 1.0)
    sgd_step(layers, OptimizerState(), lr=1, momentum=0, weight_decay=0)
    assert layers["p"].weight.item() == -1


def test_two_momentum_steps():
    layers, state = one_param(0.0, 1.0), OptimizerState()
    for _ in range(2):
        sgd_step(layers, state, lr=1, momentum=0.9, weight_decay=0)
    assert layers["p"].weight.item() == pytest.approx(-2.9)


def test_weight_decay_only_on_weights():
    layers = one_param(1.0, 0.0)
    layers["p"].bias[:] = 1.0
    sgd_step(layers, OptimizerState(), lr=1e-4, momentum=0, weight_decay=0.005)
    assert 1 - layers["p"].weight.item() == pytest.approx(5e-7, rel=1e-6)
    assert layers["p"].bias.item() == 1.0


def test_non_finite_gradient_aborts_before_update():
    layers = one_param(0.5, np.nan)
    with pytest.raises(NonFiniteGradient):
        sgd_step(layers, OptimizerState(), lr=1, momentum=0, weight_decay=0)
    assert layers["p"].weight.item() == 0.5


def test_bilinear_kernel():
    assert bilinear_kernel(2).tolist() == [[0.25, 0.25], [0.25, 0.25]]
    k3 = bilinear_kernel(3)
    assert k3[1].tolist() == [0.5, 1.0, 0.5] and k3[1, 1] == 1.0
    k15 = bilinear_kernel(15)
    assert k15.shape == (15, 15) and k15.max() == 1.0 and np.allclose(k15, k15.T)


@pytest.fixture(scope="module")
def tiny():
    img = np.random.default_rng(0).uniform(0, 255, (48, 48)).astype(np.float32)
    return make_dataset([img], 3, patch=24, count=4, seed=0)


def fresh(kind="EEDS", seed=0):
    m = build_model(kind, 3)
    init_params(m, seed=seed)
    return m


def test_loss_decreases_for_small_lr(tiny):
    m = fresh()
    data = prepare_data(m, tiny[:1])
    m.zero_grad()
    before = batch_loss_and_grad(m, data.inputs, data.targets, 1)
    sgd_step(m.named_layers(), OptimizerState(), lr=1e-6, momentum=0, weight_decay=0)
    m.zero_grad()
    assert batch_loss_and_grad(m, data.inputs, data.targets, 1) < before


def test_micro_batching_does_not_change_gradient(tiny):
    a, b = fresh(), fresh()
    data = prepare_data(a, tiny)
    a.zero_grad(), b.zero_grad()
    la = batch_loss_and_grad(a, data.inputs, data.targets, 4)
    lb = batch_loss_and_grad(b, data.inputs, data.targets, 1)
    assert la == pytest.approx(lb, rel=1e-5)
    for pa, pb in zip(a.layers(), b.layers()):
        np.testing.assert_allclose(pa.grad_w, pb.grad_w, rtol=1e-3, atol=1e-9)


def test_both_networks_update_every_step(tiny):
    m = fresh()
    before = {k: v.copy() for k, v in m.named_parameters().items()}
    train(m, prepare_data(m, tiny), None, TrainConfig(batch_size=4, lr_initial=1e-4, max_epochs=1))
    moved = {k: not np.array_equal(v, m.named_parameters()[k]) for k, v in before.items()}
    assert any(moved[k] for k in moved if k.startswith("deep."))
    assert any(moved[k] for k in moved if k.startswith("shallow."))


def test_training_loss_strictly_decreases():
    img = np.random.default_rng(0).uniform(0, 255, (120, 120)).astype(np.float32)
    m = fresh()
    data = prepare_data(m, make_dataset([img], 3, patch=96, count=1, seed=0))  # 32 -> 96
    res = train(m, data, None, TrainConfig(batch_size=1, lr_initial=5e-7, max_epochs=10, max_decays=0))
    losses = [r.train_loss for r in res.epochs]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_zero_lr_is_a_fixed_point(tiny):
    m = fresh()
    before = {k: v.copy() for k, v in m.named_parameters().items()}
    train(m, prepare_data(m, tiny), None, TrainConfig(batch_size=2, lr_initial=0.0, max_epochs=2))
    assert all(np.array_equal(v, m.named_parameters()[k]) for k, v in before.items())


def test_same_seed_same_curve(tiny):
    runs = []
    for _ in range(2):
        m = fresh()
        res = train(m, prepare_data(m, tiny), None, TrainConfig(batch_size=2, lr_initial=1e-5, max_epochs=2, seed=4))
        runs.append((res.step_losses, checkpoint_bytes(res.final)))
    assert runs[0] == runs[1]


def test_plateau_decays_lr(tiny):
    m = fresh()
    data = prepare_data(m, tiny[:1])
    # with lr 0 the validation loss never improves after the first epoch
    res = train(m, data, None, TrainConfig(batch_size=1, lr_initial=0.0, max_epochs=20,
                                           plateau_patience=2, max_decays=3))
    assert res.epochs[-1].lr == 0.0
    cfg = TrainConfig(batch_size=1, lr_initial=1e-12, max_epochs=12, plateau_patience=2, max_decays=3)
    res = train(fresh(), data, None, cfg)
    lrs = sorted({r.lr for r in res.epochs}, reverse=True)
    assert len(lrs) <= 4 and lrs[0] == 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_returns_last_good(tiny):
    m = fresh()
    with pytest.raises(TrainingDiverged) as err:
        train(m, prepare_data(m, tiny), None, TrainConfig(batch_size=4, lr_initial=1e3, max_epochs=5))
    assert err.value.last_good is not None
    assert all(np.all(np.isfinite(v)) for v in err.value.last_good.params.values())


def test_csv_log(tiny, tmp_path):
    m = fresh()
    res = train(m, prepare_data(m, tiny), None, TrainConfig(batch_size=4, lr_initial=1e-5, max_epochs=2))
    res.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_loss,wall_seconds" and len(lines) == 3


def test_checkpoint_round_trip(tmp_path):
    m = fresh()
    state = OptimizerState.zeros_like(m.named_layers())
    for vw, vb in state.velocity.values():
        vw += np.random.default_rng(1).standard_normal(vw.shape).astype(np.float32)
    ck = Checkpoint.capture(m, state, epoch=3, step=40, lr=1e-5, val_history=[1.0, 0.5])
    save_checkpoint(ck, tmp_path / "a.eeds")
    back = load_checkpoint(tmp_path / "a.eeds")
    assert checkpoint_bytes(back) == checkpoint_bytes(ck)
    assert all(np.array_equal(back.params[k], v) for k, v in ck.params.items())
    assert all(np.array_equal(back.velocity[k], v) for k, v in ck.velocity.items())
    assert (back.epoch, back.step, back.lr, back.val_history) == (3, 40, 1e-5, [1.0, 0.5])


def test_checkpoint_rejects_flipped_byte():
    blob = bytearray(checkpoint_bytes(Checkpoint.capture(fresh())))
    blob[len(blob) // 2] ^= 0x40
    with pytest.raises(CheckpointError, match="checksum"):
        parse_checkpoint(bytes(blob))


def test_checkpoint_rejects_truncation_and_bad_magic():
    blob = checkpoint_bytes(Checkpoint.capture(fresh()))
    with pytest.raises(CheckpointError):
        parse_checkpoint(blob[:-100])
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"XXXX" + blob[4:])


def test_checkpoint_scale_mismatch(tmp_path):
    m2 = build_model("EEDS", 2)
    save_checkpoint(Checkpoint.capture(m2), tmp_path / "s2.eeds")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "s2.eeds").restore(build_model("EEDS", 3))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "s2.eeds", expect_scale=3)


def test_config_from_dict():
    cfg = TrainConfig.from_dict({"lr_initial": "1e-3", "batch_size": "8"})
    assert cfg.lr_initial == 1e-3 and cfg.batch_size == 8
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"learning_rate": "1"})
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
