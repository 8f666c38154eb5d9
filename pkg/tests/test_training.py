import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evp import tensor as T
from evp.backbone import Backbone
from evp.errors import ConfigError, DomainError, NumericalError
from evp.prompting import Strategy, build_strategy, clone_backbone
from evp.synthdata import SynthSpec, generate, stack
from evp.tensor import Tensor, gradcheck
from evp.training import (
    AdamW,
    RunRecord,
    TrainConfig,
    adamw_update,
    balanced_bce_loss,
    bce_loss,
    compare,
    comparison_table,
    cosine_lr,
    fit,
    frozen_fingerprint,
    soft_iou_loss,
    total_loss,
)


def naive_bce(x, y):
    s = 1 / (1 + np.exp(-x))
    return float(np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s))))


def test_bce_matches_reference():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((2, 4, 4)), (rng.random((2, 4, 4)) > 0.5).astype(float)
    assert abs(float(bce_loss(Tensor(x), y).data) - naive_bce(x, y)) <= 1e-12


def test_bce_is_stable_for_large_logits():
    v = float(bce_loss(Tensor(np.array([800.0, -800.0])), np.array([0.0, 1.0])).data)
    assert v == pytest.approx(800.0)


def test_balanced_bce_reference():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 4))
    y = np.zeros((2, 4, 4))
    y[:, :1] = 1
    n, npos = y.size, y.sum()
    w = np.where(y > 0, (n - npos) / n, npos / n)
    s = 1 / (1 + np.exp(-x))
    ref = np.mean(-w * (y * np.log(s) + (1 - y) * np.log(1 - s)))
    assert abs(float(balanced_bce_loss(Tensor(x), y).data) - ref) <= 1e-12
    # a single-class batch falls back to plain BCE
    z = np.zeros_like(y)
    assert float(balanced_bce_loss(Tensor(x), z).data) == pytest.approx(naive_bce(x, z), abs=1e-12)


def test_soft_iou_reference():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 4))
    y = (rng.random((3, 4, 4)) > 0.5).astype(float)
    p = 1 / (1 + np.exp(-x))
    ref = np.mean([
        1 - ((p[i] * y[i]).sum() + 1) / (p[i].sum() + y[i].sum() - (p[i] * y[i]).sum() + 1) for i in range(3)
    ])
    assert abs(float(soft_iou_loss(Tensor(x), y).data) - ref) <= 1e-12


@pytest.mark.parametrize("kind", ["bce", "balanced_bce", "bce_plus_iou"])
def test_loss_gradcheck(kind):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 3))
    y = (rng.random((2, 3, 3)) > 0.5).astype(float)
    y[0, 0, 0], y[0, 0, 1] = 1, 0
    assert gradcheck(lambda t: total_loss(kind, t, y), [x]) <= 1e-4


def test_loss_rejects_non_binary_targets():
    with pytest.raises(DomainError):
        bce_loss(Tensor(np.zeros(3)), np.array([0, 0.5, 1]))
    with pytest.raises(ConfigError):
        total_loss("focal", Tensor(np.zeros(3)), np.zeros(3))


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(DomainError):
        cosine_lr(101, 100, 1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.data())
def test_cosine_schedule_monotone(total, data):
    t = data.draw(st.integers(0, total - 1))
    assert 0 <= cosine_lr(t + 1, total, 1.0) <= cosine_lr(t, total, 1.0) <= 1.0


def naive_adamw(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        p = p * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    return p


def test_adamw_matches_scalar_reference():
    rng = np.random.default_rng(4)
    grads = rng.standard_normal((5, 3))
    p, m, v = np.array([0.5, -1.0, 2.0]), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        adamw_update(p, g, m, v, t, 1e-2, weight_decay=0.01)
    for k in range(3):
        assert p[k] == pytest.approx(naive_adamw([0.5, -1.0, 2.0][k], grads[:, k], 1e-2), abs=1e-14)


def test_adamw_first_step_moves_by_lr():
    p = np.array([1.0])
    adamw_update(p, np.array([3.0]), np.zeros(1), np.zeros(1), 1, 0.1, eps=0.0)
    assert p[0] == pytest.approx(0.9)


def test_adamw_skips_parameters_without_grad():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    a.grad = np.ones(2)
    AdamW([("a", a), ("b", b)]).step(0.1)
    assert np.array_equal(b.data, np.ones(2)) and not np.array_equal(a.data, np.ones(2))


@pytest.fixture(scope="module")
def small_data():
    tr = stack(generate(SynthSpec("blur", 8, 32, seed=1)))
    te = stack(generate(SynthSpec("blur", 4, 32, seed=2)))
    return tr, te


@pytest.mark.parametrize("kind", ["decoder_only", "vpt_deep", "adaptformer", "evp"])
def test_frozen_parameters_bitwise_unchanged(tiny_config, small_data, kind):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy(kind), 0)
    before = {n: model.parameter(n).data.copy() for n in model.partition.frozen}
    seen = []

    def watch(step, loss):
        seen.extend(n for n in model.partition.frozen if model.parameter(n).grad is not None)

    (x, y), _ = small_data
    fit(model, x, y, TrainConfig(lr=1e-3, epochs=25, batch=4), on_step=watch)
    assert not seen
    for n, arr in before.items():
        assert np.array_equal(model.parameter(n).data, arr), n


def test_training_reduces_loss(tiny_config, small_data):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy("full"), 0)
    (x, y), _ = small_data
    rec = fit(model, x, y, TrainConfig(lr=2e-3, epochs=20, batch=4))
    assert rec.epoch_losses[-1] < rec.epoch_losses[0]


def test_fit_is_deterministic(tiny_config, small_data):
    (x, y), te = small_data
    bb = Backbone.create(tiny_config, 0)
    cfg = TrainConfig(lr=1e-3, epochs=2, batch=4)
    a = compare(bb, [Strategy("evp")], (x, y), te, cfg)[0]
    b = compare(bb, [Strategy("evp")], (x, y), te, cfg)[0]
    assert a == b and a.to_text() == b.to_text()


def test_run_record_round_trip():
    rec = RunRecord("evp(r=4)", {"lr": 1e-3}, [0.5, 0.25], {"test": {"f_beta": 0.5, "ber": float("nan")}}, 10, 20, "ab")
    back = RunRecord.from_text(rec.to_text())
    assert back.to_text() == rec.to_text()
    rec.wall_time = 99.0
    assert "wall_time" not in rec.to_text()


def test_nan_loss_raises_with_record(tiny_config, small_data):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy("decoder_only"), 0)
    model.parameter("decoder.pred.bias").data[:] = np.nan
    (x, y), _ = small_data
    with pytest.raises(NumericalError) as info:
        fit(model, x, y, TrainConfig(epochs=1))
    assert info.value.record.status.startswith("non-finite")


def test_comparison_table_rows(tiny_config, small_data):
    (x, y), te = small_data
    bb = Backbone.create(tiny_config, 0)
    recs = compare(bb, [Strategy("decoder_only"), Strategy("evp")], (x, y), te, TrainConfig(epochs=1))
    lines = comparison_table(recs).splitlines()
    assert len(lines) == 4 and lines[2].startswith("decoder_only") and lines[3].startswith("evp(")
    assert recs[0].fingerprint == recs[1].fingerprint == frozen_fingerprint(
        build_strategy(clone_backbone(bb), Strategy("full"), 0)
    )


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 4)) * 5
    y = (rng.random((2, 4, 4)) > 0.5).astype(float)
    for kind in ("bce", "balanced_bce", "bce_plus_iou"):
        assert float(total_loss(kind, Tensor(x), y).data) >= 0


def test_losses_vanish_in_the_confident_limit():
    y = np.zeros((1, 4, 4))
    y[0, :2] = 1
    logits = Tensor(np.where(y > 0, 40.0, -40.0))
    assert float(bce_loss(logits, y).data) < 1e-15
    assert float(balanced_bce_loss(logits, y).data) < 1e-15
    assert float(soft_iou_loss(logits, y, smooth=0.0).data) < 1e-15


def test_flip_consistency_for_equivariant_predictor():
    from evp.training import _flip

    rng = np.random.default_rng(6)
    x = rng.random((3, 3, 8, 8))
    y = (rng.random((3, 8, 8)) > 0.5).astype(float)

    def stub(images):  # per-pixel, hence flip-equivariant
        return Tensor(images.mean(axis=1) * 4 - 2)

    flags = np.array([True, False, True])
    base = float(bce_loss(stub(x), y).data)
    flipped = float(bce_loss(stub(_flip(x, flags)), _flip(y, flags)).data)
    assert flipped == pytest.approx(base, abs=1e-14)
