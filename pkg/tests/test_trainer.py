import json
import math

import numpy as np
import pytest

from ucaps import trainer as trainer_mod
from ucaps.checkpoint import CheckpointError, load_checkpoint, load_network, save_checkpoint
from ucaps.network import NetworkConfig, UCapsNet
from ucaps.phantom import PhantomSpec
from ucaps.tensor import Tensor, no_grad
from ucaps.trainer import (NonFiniteGradientError, SegDataset, TrainConfig, TrainState, adam_step,
                           predict_volume, train)


def tiny_config(**kw):
    params = dict(feature_channels=(2, 2, 3), capsule_types=(2, 2, 2, 2, 2, 4),
                  capsule_dims=(2, 2, 2, 3, 3, 4), decoder_channels=(4, 4, 4))
    params.update(kw)
    return NetworkConfig(**params)


@pytest.fixture(scope="module")
def tiny_data():
    return SegDataset.from_phantoms(PhantomSpec(shape=(16, 16, 16), seed=40), 3, 1, 1)


def _scalar_state(theta=0.0, lr=1e-3):
    return TrainState.init({"w": Tensor(np.array([theta]), dtype=np.float64)}, lr)


# -- Adam ---------------------------------------------------------------------------------

def test_adam_first_step_is_minus_lr():
    st = _scalar_state()
    adam_step(st, {"w": np.array([1.0])}, 1e-3)
    assert st.params["w"].data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    st = _scalar_state(theta=0.7)
    for _ in range(3):
        adam_step(st, {"w": np.array([0.0])}, 1e-2)
    assert st.params["w"].data[0] == 0.7


def test_adam_three_step_trajectory_hand_computed():
    grads = [1.0, -2.0, 0.5]
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta, m, v = 0.3, 0.0, 0.0
    expected = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        expected.append(theta)
    st = _scalar_state(theta=0.3)
    got = []
    for g in grads:
        adam_step(st, {"w": np.array([g])}, lr, (b1, b2), eps)
        got.append(float(st.params["w"].data[0]))
    np.testing.assert_allclose(got, expected, rtol=1e-12)
    # by hand: step 2 has m_hat = -0.11/0.19, v_hat = 0.004999/0.001999
    assert got[0] == pytest.approx(0.2, abs=1e-8)  # eps shifts it by 1e-9
    assert got[1] == pytest.approx(0.2 + 0.1 * (0.11 / 0.19) / math.sqrt(0.004999 / 0.001999),
                                   abs=1e-9)


def test_adam_rejects_nan_gradient_with_iteration():
    st = _scalar_state()
    st.iteration = 17
    with pytest.raises(NonFiniteGradientError) as exc:
        adam_step(st, {"w": np.array([np.nan])}, 1e-3)
    assert exc.value.iteration == 17 and exc.value.name == "w"


# -- config ---------------------------------------------------------------------------------

def test_train_config_validation_and_round_trip():
    cfg = TrainConfig(lr0=3e-4, patch_size=16)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_factor=1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(plateau_patience_iters=10, early_stop_iters=10).validate()
    with pytest.raises(ValueError):
        TrainConfig(patch_size=12).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})


# -- training loop ----------------------------------------------------------------------------

def test_schedule_follows_scripted_validation(monkeypatch, tiny_data):
    scripted = iter([0.1, 0.3, 0.2, 0.2, 0.25, 0.2, 0.2, 0.9])
    monkeypatch.setattr(trainer_mod, "evaluate_dataset", lambda *a, **k: (next(scripted), []))
    net = UCapsNet(tiny_config())
    cfg = TrainConfig(lr0=1.0e-3, patch_size=8, batch_size=1, eval_interval=1,
                      plateau_patience_iters=2, early_stop_iters=5, max_iters=50)
    res = train(net, tiny_data, cfg)
    lrs = [r["lr"] for r in res.history]
    np.testing.assert_allclose(lrs, [1e-3, 1e-3, 1e-3, 5e-5, 5e-5, 2.5e-6, 2.5e-6], rtol=1e-12)
    assert res.stop_reason == "early_stop"
    assert res.state.best_dice == 0.3 and res.state.best_iter == 2
    assert res.state.decays == 2
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    best = [r["best_dice"] for r in res.history]
    assert all(b >= max(r["val_dice"] for r in res.history[:i + 1]) for i, b in enumerate(best))


def test_early_stop_one_halts_after_first_eval(tiny_data):
    net = UCapsNet(tiny_config())
    net.head.weight.data[...] = 0
    net.head.bias.data[...] = 0
    cfg = TrainConfig(lr0=1e-30, patch_size=8, batch_size=1, eval_interval=1,
                      plateau_patience_iters=0, early_stop_iters=1, max_iters=20)
    res = train(net, tiny_data, cfg)
    assert len(res.history) == 1 and res.stop_reason == "early_stop"


def test_same_seed_runs_have_identical_histories(tiny_data, tmp_path):
    cfg = TrainConfig(lr0=1e-3, patch_size=8, batch_size=2, eval_interval=2, max_iters=6, seed=3)
    a = train(UCapsNet(tiny_config()), tiny_data, cfg, history_path=tmp_path / "a.jsonl")
    b = train(UCapsNet(tiny_config()), tiny_data, cfg, history_path=tmp_path / "b.jsonl")
    assert a.history == b.history
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert set(json.loads(lines[0])) == {"iter", "ce", "margin", "reconstruction", "total", "lr",
                                         "val_dice", "best_dice"}
    c = train(UCapsNet(tiny_config()), tiny_data, TrainConfig(**{**cfg.to_dict(), "seed": 4}))
    assert c.history != a.history


def test_train_requires_data():
    net = UCapsNet(tiny_config())
    with pytest.raises(ValueError):
        train(net, SegDataset(), TrainConfig(patch_size=8))


def test_predict_volume_restores_mode_and_sums_to_one(tiny_data):
    net = UCapsNet(tiny_config())
    net.train()
    probs = predict_volume(net, tiny_data.val[0].image, 8, 4)
    assert net.training
    assert probs.shape == (4, 16, 16, 16)
    np.testing.assert_allclose(probs.sum(0), 1.0, atol=1e-5)


# -- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = UCapsNet(tiny_config(seed=5))
    state = net.state_dict()
    save_checkpoint(tmp_path / "m.ucap", state, net.config.to_dict(), {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "m.ucap")
    assert sorted(back) == sorted(state)
    for k in state:
        assert back[k].tobytes() == np.asarray(state[k], dtype=np.float32).tobytes()
    assert meta["extra"] == {"note": "x"}
    save_checkpoint(tmp_path / "m2.ucap", back, meta["config"], meta["extra"])
    assert (tmp_path / "m.ucap").read_bytes() == (tmp_path / "m2.ucap").read_bytes()


def test_loaded_network_reproduces_outputs(tmp_path):
    net = UCapsNet(tiny_config(seed=6)).eval()
    save_checkpoint(tmp_path / "m.ucap", net.state_dict(), net.config.to_dict())
    net2, _ = load_network(tmp_path / "m.ucap")
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 1, 8, 8, 8)))
    with no_grad():
        assert net(x).logits.data.tobytes() == net2(x).logits.data.tobytes()


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad.ucap"
    p.write_bytes(b"XXXX" + b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    net = UCapsNet(tiny_config())
    save_checkpoint(p, net.state_dict(), net.config.to_dict())
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    save_checkpoint(p, net.state_dict(), None)
    with pytest.raises(CheckpointError):
        load_network(p)
