import csv
from collections import Counter

import numpy as np
import pytest

from mrreg.datagen import SynthConfig, generate
from mrreg.errors import DatasetTooSmall, NonFiniteLossError
from mrreg.network import ModelConfig, dumps_params, load_params
from mrreg.train import AdamState, HISTORY_FIELDS, TrainConfig, adam_step, pair_sampler, train


def tiny_data(n=4, extent=16, seed=0, classes=1):
    data = generate(SynthConfig(extent=extent, count=n, seed=seed, classes=classes))
    return data.pairs()


def tiny_run(data, **kw):
    cfg = TrainConfig(**{"epochs": 2, "batch_size": 2, "levels": 2, "lambdas": [2.0, 1.0], **kw})
    return ModelConfig(dims=2, levels=2, channels=[4, 4]), cfg


# ---------------------------------------------------------------------------
# sampler


def test_two_images_pair_with_each_other():
    for epoch in range(5):
        assert sorted(pair_sampler(2, 0, epoch)) == [(0, 1), (1, 0)]


def test_sampler_is_deterministic_and_covers_sources():
    assert pair_sampler(7, 3, 5) == pair_sampler(7, 3, 5)
    assert pair_sampler(7, 3, 5) != pair_sampler(7, 3, 6)
    for epoch in range(10):
        pairs = pair_sampler(7, 1, epoch)
        assert sorted(s for s, _ in pairs) == list(range(7))
        assert all(s != t for s, t in pairs)


def test_sampler_frequencies_within_three_sigma():
    counts = Counter()
    for epoch in range(200):
        counts.update(pair_sampler(5, 11, epoch))
    total = sum(counts.values())
    assert total == 1000
    p = 1 / 20
    sigma = np.sqrt(total * p * (1 - p))
    assert set(counts) == {(s, t) for s in range(5) for t in range(5) if s != t}
    for c in counts.values():
        assert abs(c - total * p) <= 3 * sigma


def test_sampler_needs_two_items():
    with pytest.raises(DatasetTooSmall):
        pair_sampler(1, 0, 0)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(params, {"w": np.zeros(2)}, state, 0.001)
    assert state.step == 1
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_closed_form():
    params = {"w": np.array([0.5])}
    adam_step(params, {"w": np.array([1.0])}, AdamState(), 0.001)
    # m_hat = 1, v_hat = 1 after bias correction
    assert params["w"][0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    params = {"w": np.zeros(3)}
    state = AdamState()
    m = v = np.zeros(3)
    w = np.zeros(3)
    for t, g in enumerate(grads, 1):
        adam_step(params, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], w, rtol=1e-12)


def test_adam_symmetry():
    params = {"a": np.array([0.3]), "b": np.array([0.3])}
    state = AdamState()
    for g in [0.5, -1.0, 2.0]:
        adam_step(params, {"a": np.array([g]), "b": np.array([g])}, state, 0.01)
    assert params["a"][0] == params["b"][0]


# ---------------------------------------------------------------------------
# training loop


def test_config_defaults_and_validation():
    assert TrainConfig().lambdas == [128, 64, 32, 16, 8]
    c3 = TrainConfig.full_scale_3d()
    assert (c3.lr, c3.batch_size, c3.levels, c3.lambdas) == (0.0001, 1, 4, [16, 8, 4, 2])
    with pytest.raises(ValueError):
        TrainConfig(levels=3, lambdas=[1.0, 2.0])
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_single_image_dataset_rejected():
    data = tiny_data(1)
    model, cfg = tiny_run(data)
    with pytest.raises(DatasetTooSmall):
        train(model, cfg, data)


def test_mask_guided_needs_masks():
    data = [(img, None) for img, _ in tiny_data(3)]
    model, cfg = tiny_run(data, mask_enabled=True)
    with pytest.raises(ValueError):
        train(model, cfg, data)


def test_history_csv_and_checkpoints(tmp_path):
    data = tiny_data(4)
    model, cfg = tiny_run(data, epochs=3, checkpoint_interval=1, mask_enabled=True)
    ckpt, hist = tmp_path / "m.mrck", tmp_path / "h.csv"
    res = train(model, cfg, data, checkpoint_path=ckpt, history_path=hist)
    rows = list(csv.DictReader(open(hist)))
    assert list(rows[0]) == HISTORY_FIELDS
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    for r, h in zip(rows, res.history):
        assert float(r["total"]) == h["total"]
        assert np.isfinite(h["total"])
        assert h["total"] == pytest.approx(h["gncc_term"] + h["smooth_term"] + h["dice_term"], rel=1e-5)
    assert dumps_params(load_params(ckpt)) == dumps_params(res.params)


def test_training_is_deterministic(tmp_path):
    data = tiny_data(4)
    model, cfg = tiny_run(data, seed=5)
    a = train(model, cfg, data, checkpoint_path=tmp_path / "a.mrck")
    b = train(model, cfg, data, checkpoint_path=tmp_path / "b.mrck")
    assert (tmp_path / "a.mrck").read_bytes() == (tmp_path / "b.mrck").read_bytes()
    assert a.history == b.history


def test_mask_flag_without_dice_term_is_bitwise_identical():
    data = tiny_data(4)
    model, cfg = tiny_run(data)
    a = train(model, cfg, data)
    b = train(model, cfg, [(img, None) for img, _ in data])
    assert dumps_params(a.params) == dumps_params(b.params)


def test_validation_is_monitoring_only():
    data = tiny_data(6)
    model, cfg = tiny_run(data)
    a = train(model, cfg, data[:4])
    b = train(model, cfg, data[:4], validation=data[4:])
    assert dumps_params(a.params) == dumps_params(b.params)
    assert len(b.val_history) == cfg.epochs and all(np.isfinite(b.val_history))


def test_non_finite_loss_keeps_last_good(tmp_path):
    data = tiny_data(4)
    bad = [(img.copy(), m) for img, m in data]
    bad[0][0][3, 3] = np.nan
    model, cfg = tiny_run(bad)
    ckpt = tmp_path / "m.mrck"
    with pytest.raises(NonFiniteLossError) as info:
        train(model, cfg, bad, checkpoint_path=ckpt)
    assert info.value.epoch == 1
    assert info.value.params is not None
    assert dumps_params(load_params(ckpt)) == dumps_params(info.value.params)


def test_gradient_clip_guard_keeps_training_finite():
    data = tiny_data(4)
    model, cfg = tiny_run(data, clip=1e3)
    res = train(model, cfg, data)
    assert all(np.isfinite(h["total"]) for h in res.history)


def test_training_reduces_loss():
    data = generate(SynthConfig(extent=64, count=20, seed=1)).pairs()
    model = ModelConfig(dims=2, levels=3, channels=[8, 16, 32])
    cfg = TrainConfig(epochs=50, batch_size=10, levels=3, lambdas=[32.0, 16.0, 8.0], seed=0)
    res = train(model, cfg, data)
    totals = [h["total"] for h in res.history]
    assert all(np.isfinite(totals))
    assert totals[-1] < totals[0]
