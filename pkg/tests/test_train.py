import dataclasses

import numpy as np
import pytest

from prnet.detector import ArchConfig, build_model
from prnet.errors import ConfigError, NonFiniteError
from prnet.params import parameters
from prnet.synth import Dataset, DatasetSpec, gen_dataset
from prnet.tensor import Tensor
from prnet.train import (
    HISTORY_FIELDS,
    SGDState,
    TrainConfig,
    clip_grad_norm,
    evaluate,
    history_csv,
    seed_override,
    sgd_momentum_step,
    train_loop,
)

TINY = ArchConfig(widths=(4, 4, 8, 8, 8), neck_widths=(4, 6, 8))
FAST = TrainConfig(epochs=2, batch_size=4, seed=3)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    gen_dataset(DatasetSpec(num_images=8, num_val=4, image_size=64, objects_per_image=(2, 5), seed=4), root)
    return Dataset(root)


def _param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def test_plain_gradient_descent():
    p = _param([1.0, -2.0, 3.0])
    g = np.array([0.5, 0.25, -1.0])
    sgd_momentum_step([p], [g], TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0), SGDState())
    assert np.allclose(p.data, [0.95, -2.025, 3.1], rtol=0, atol=1e-15)


def test_two_steps_constant_gradient_closed_form():
    lr, m = 0.01, 0.937
    p = _param([0.0, 1.0])
    g = np.array([2.0, -3.0])
    cfg = TrainConfig(lr=lr, momentum=m, weight_decay=0.0)
    state = SGDState()
    for _ in range(2):
        sgd_momentum_step([p], [g.copy()], cfg, state)
    assert np.allclose(p.data, np.array([0.0, 1.0]) - lr * g * (2 + m), rtol=0, atol=1e-15)
    assert state.steps == 2


def test_weight_decay_only_shrinks_exponentially():
    lr, wd = 0.1, 0.5
    p = _param([4.0, -8.0])
    cfg = TrainConfig(lr=lr, momentum=0.0, weight_decay=wd)
    state = SGDState()
    for _ in range(5):
        sgd_momentum_step([p], [np.zeros(2)], cfg, state)
    assert np.allclose(p.data, np.array([4.0, -8.0]) * (1 - lr * wd) ** 5, rtol=1e-14)


def test_decay_mask_skips_flagged_parameters():
    a, b = _param([1.0]), _param([1.0])
    sgd_momentum_step([a, b], [np.zeros(1), np.zeros(1)], TrainConfig(lr=0.1, momentum=0.0, weight_decay=1.0),
                      SGDState(), decay=[True, False])
    assert a.data[0] == pytest.approx(0.9) and b.data[0] == 1.0


def test_non_finite_gradient_names_parameter():
    p = _param([1.0])
    with pytest.raises(NonFiniteError, match="head.0"):
        sgd_momentum_step([p], [np.array([np.inf])], TrainConfig(), SGDState(), names=["head.0"])
    assert p.data[0] == 1.0


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.hypot(g[0][0], g[1][0]) == pytest.approx(1.0, rel=1e-5)
    h = [np.array([0.3]), np.array([0.4])]
    clip_grad_norm(h, 1.0)
    assert h[0][0] == 0.3


def test_train_config_validation_and_defaults():
    c = TrainConfig()
    assert (c.lr, c.momentum, c.weight_decay, c.batch_size, c.patience) == (0.01, 0.937, 0.0005, 8, 50)
    assert TrainConfig.from_dict(c.to_dict()) == c
    for bad in ({"lr": -1}, {"momentum": 1.0}, {"batch_size": 0}, {"epochs": 0}, {"patience": 0}, {"warmup": 3}):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)


def test_seed_override(monkeypatch):
    monkeypatch.delenv("PRNET_SEED", raising=False)
    assert seed_override(5) == 5
    monkeypatch.setenv("PRNET_SEED", "42")
    assert seed_override(5) == 42
    monkeypatch.setenv("PRNET_SEED", "x")
    with pytest.raises(ConfigError):
        seed_override(5)


# --------------------------------------------------------------------------
# loop


def test_history_csv_format():
    text = history_csv([{"epoch": 1, "loss": 0.1, "box": 0.2, "obj": 0.3, "cls": 0.4, "grad_norm": 1.5, "AP50": 0.0}])
    lines = text.splitlines()
    assert lines[0] == ",".join(HISTORY_FIELDS)
    assert lines[1] == "1,0.1,0.2,0.3,0.4,1.5,0.0"


def test_loop_writes_artifacts(data, tmp_path):
    res = train_loop(build_model(TINY), data, FAST, tmp_path)
    assert [h["epoch"] for h in res.history] == [1, 2]
    for name in ("best.json", "best.bin", "last.json", "last.bin", "history.csv"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "history.csv").read_text() == history_csv(res.history)
    assert all(np.isfinite(h["loss"]) for h in res.history)


def test_same_seed_identical_history(data, tmp_path):
    train_loop(build_model(TINY), data, FAST, tmp_path / "a")
    train_loop(build_model(TINY), data, FAST, tmp_path / "b")
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()
    assert (tmp_path / "a/last.bin").read_bytes() == (tmp_path / "b/last.bin").read_bytes()


def test_patience_one_with_zero_lr_stops_after_two_epochs(data):
    cfg = dataclasses.replace(FAST, lr=0.0, epochs=10, patience=1)
    res = train_loop(build_model(TINY), data, cfg)
    assert len(res.history) == 2 and res.stopped_early
    assert res.best_epoch == 1


def test_best_checkpoint_kept_through_early_stop(data, tmp_path):
    from prnet.tensorio import load_checkpoint

    cfg = dataclasses.replace(FAST, epochs=4, patience=2)
    res = train_loop(build_model(TINY), data, cfg, tmp_path)
    best = max(h["AP50"] for h in res.history)
    assert res.best_ap50 == best
    model, meta = load_checkpoint(tmp_path / "best.json")
    assert meta["epoch"] == res.best_epoch and meta["AP50"] == best
    assert evaluate(model, data, data.indices("val"), cfg, full=False)["AP50"] == pytest.approx(best, abs=1e-12)


def test_non_finite_loss_aborts_and_keeps_last_good(data, tmp_path):
    m = build_model(TINY)
    train_loop(m, data, dataclasses.replace(FAST, epochs=1), tmp_path)
    good = (tmp_path / "best.bin").read_bytes()
    parameters(m)[0].data[...] = np.nan
    with pytest.raises(NonFiniteError, match="epoch 1"):
        train_loop(m, data, FAST, tmp_path)
    assert (tmp_path / "best.bin").read_bytes() == good
    assert (tmp_path / "history.csv").read_text().splitlines() == [",".join(HISTORY_FIELDS)]


def test_empty_training_split_rejected(data):
    with pytest.raises(ConfigError):
        train_loop(build_model(TINY), data, FAST, train_indices=[])


def test_evaluate_report_shape(data):
    r = evaluate(build_model(TINY), data, data.indices("val"), FAST)
    assert set(r) >= {"AP", "AP50", "AP75", "per_class", "num_images"}
    assert r["num_images"] == 4
    assert all(isinstance(k, str) for k in r["per_class"])


def test_epoch_lr_linear_decay():
    from prnet.train import epoch_lr

    cfg = TrainConfig(lr=0.01, epochs=4, lr_final=0.01)
    # lr * ((1 - x) * 0.99 + 0.01), x = (e - 1) / 4
    assert [epoch_lr(cfg, e) for e in (1, 2, 3, 4)] == pytest.approx([0.01, 0.007525, 0.00505, 0.002575], rel=1e-12)
    assert epoch_lr(dataclasses.replace(cfg, lr_final=1.0), 3) == pytest.approx(0.01)
