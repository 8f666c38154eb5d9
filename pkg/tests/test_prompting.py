from dataclasses import replace

import numpy as np
import pytest

from evp import tensor as T
from evp.backbone import Backbone, BackboneConfig
from evp.errors import ConfigError
from evp.frequency import extract_hfc
from evp.prompting import (
    EvpConfig,
    Strategy,
    adaptor,
    average_pool,
    bottleneck_dim,
    build_strategy,
    clone_backbone,
    count_params,
    resolve_strategy,
    stage_breakdown,
)
from evp.tensor import ShapeError, Tensor, gradcheck

from conftest import TINY


def lin_count(i, o):
    return i * o + o


def expected_evp_trainable(cfg, evp):
    """Closed-form trainable count: decoder plus the prompt modules."""
    e = cfg.decoder_dim
    total = sum(lin_count(d, e) for d in cfg.dims) + lin_count(4 * e, e) + lin_count(e, 1)
    for s in evp.stages:
        st = cfg.stages[s - 1]
        c = bottleneck_dim(st.embed_dim, evp.r)
        if evp.use_fpe:
            total += lin_count(st.embed_dim, c)
        if evp.use_fhfc:
            total += lin_count(cfg.in_chans * st.patch**2, c)
        total += (1 if evp.share_mlp_tune else st.depth) * lin_count(c, c)
        total += (1 if evp.share_mlp_up else st.depth) * lin_count(c, st.embed_dim)
    return total


def trainable(cfg, strategy, seed=0):
    return count_params(build_strategy(Backbone.create(cfg, seed), strategy, seed))[1]


@pytest.mark.parametrize("r", [1, 2, 4, 8, 16, 32, 64])
def test_evp_counts_match_closed_form(r):
    cfg = BackboneConfig(dtype="float32")
    evp = EvpConfig(r=r)
    assert trainable(cfg, Strategy("evp", evp=evp)) == expected_evp_trainable(cfg, evp)


def test_default_config_counts():
    cfg = BackboneConfig(dtype="float32")
    full_frozen, full_train = count_params(build_strategy(Backbone.create(cfg, 0), Strategy("full"), 0))
    assert full_frozen == 0 and full_train == 448289
    dec_frozen, dec_train = count_params(build_strategy(Backbone.create(cfg, 0), Strategy("decoder_only"), 0))
    assert (dec_frozen, dec_train) == (437344, 10945)
    assert trainable(cfg, Strategy("evp")) == 22365


def test_bottleneck_rounding():
    assert bottleneck_dim(16, 4) == 4
    assert bottleneck_dim(16, 32) == 1  # 0.5 rounds to even 0, floored at 1
    assert bottleneck_dim(96, 64) == 2  # 1.5 rounds to even 2
    assert bottleneck_dim(64, 3) == 21


def test_strategy_validation():
    with pytest.raises(ConfigError):
        Strategy("lora")
    with pytest.raises(ConfigError):
        Strategy("evp", evp=EvpConfig(r=0))
    with pytest.raises(ConfigError):
        Strategy("evp", evp=EvpConfig(use_fpe=False, use_fhfc=False))
    with pytest.raises(ConfigError):
        Strategy("evp", evp=EvpConfig(stages=(0, 5)))
    with pytest.raises(ConfigError):
        resolve_strategy("evp_magic", Strategy())


def test_variants_resolve():
    base = Strategy("evp")
    assert resolve_strategy("no_prompt", base).kind == "decoder_only"
    assert not resolve_strategy("evp_no_fpe", base).evp.use_fpe
    assert not resolve_strategy("evp_no_fhfc", base).evp.use_fhfc
    assert resolve_strategy("evp_shared_tune", base).evp.share_mlp_tune
    assert not resolve_strategy("evp_unshared_up", base).evp.share_mlp_up


@pytest.mark.parametrize("kind", ["decoder_only", "vpt_deep", "adaptformer", "evp"])
def test_partition_freezes_encoder(tiny_config, kind):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy(kind), 0)
    part = model.partition
    assert all(n.startswith("encoder.") for n in part.frozen)
    assert set(part.frozen) == set(model.backbone.encoder_names())
    assert all(not n.startswith("encoder.") for n in part.trainable)


def test_full_trains_everything(tiny_config):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy("full"), 0)
    assert model.partition.frozen == []


def test_adaptor_gradcheck():
    rng = np.random.default_rng(0)
    f_pe, f_hfc = rng.standard_normal((2, 5, 3)), rng.standard_normal((2, 5, 3))
    w_t, b_t = rng.standard_normal((3, 3)), rng.standard_normal(3)
    w_u, b_u = rng.standard_normal((3, 8)), rng.standard_normal(8)

    def fn(a, b, wt, bt, wu, bu):
        params = {"t.weight": wt, "t.bias": bt, "u.weight": wu, "u.bias": bu}
        out = adaptor(a, b, params, "t", "u")
        return T.tsum(out * out)

    assert gradcheck(fn, [f_pe, f_hfc, w_t, b_t, w_u, b_u]) <= 1e-4


def test_adaptor_shape_mismatch():
    params = {"t.weight": Tensor(np.ones((3, 3))), "t.bias": Tensor(np.zeros(3)),
              "u.weight": Tensor(np.ones((3, 4))), "u.bias": Tensor(np.zeros(4))}
    with pytest.raises(ShapeError):
        adaptor(Tensor(np.ones((1, 5, 3))), Tensor(np.ones((1, 4, 3))), params, "t", "u")


def test_average_pool_hand_value():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    assert np.array_equal(average_pool(x, 2)[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_prompt_images_are_hfc(tiny_config, images):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy("evp", evp=EvpConfig(tau=0.1)), 0)
    p = model.prompt_images(images)
    assert np.array_equal(p[1], extract_hfc(images[1], 0.1))


def zero_prompt(model):
    for name, t in model.tuning.params.items():
        t.data = np.zeros_like(t.data)


def test_zero_prompt_matches_decoder_only_bitwise(tiny_config, images):
    bb = Backbone.create(tiny_config, 4)
    evp = build_strategy(clone_backbone(bb), Strategy("evp"), 0)
    zero_prompt(evp)
    dec = build_strategy(clone_backbone(bb), Strategy("decoder_only"), 0)
    assert np.array_equal(evp.forward(images).data, dec.forward(images).data)


def test_nonzero_prompt_changes_output(tiny_config, images):
    bb = Backbone.create(tiny_config, 4)
    evp = build_strategy(clone_backbone(bb), Strategy("evp"), 0)
    for name, t in evp.tuning.params.items():
        if name.endswith("bias"):
            t.data = np.full_like(t.data, 0.5)
    dec = build_strategy(clone_backbone(bb), Strategy("decoder_only"), 0)
    assert not np.array_equal(evp.forward(images).data, dec.forward(images).data)


@pytest.mark.parametrize("kind", ["vpt_deep", "adaptformer", "evp"])
def test_strategy_gradients_reach_only_trainables(tiny_config, images, kind):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy(kind), 0)
    model.forward(images).sum().backward()
    for name, t in model.named_parameters():
        if t.requires_grad:
            assert t.grad is not None, name
        else:
            assert t.grad is None, name


def test_vpt_output_unchanged_shape(tiny_config, images):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy("vpt_deep", n_tokens=3), 0)
    assert model.forward(images).shape == (2, 32, 32)


def test_stage_breakdown_sums_to_total(tiny_config):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy("evp"), 0)
    rows = stage_breakdown(model)
    assert sum(f for f, _ in rows.values()) + sum(t for _, t in rows.values()) == sum(count_params(model))
    assert set(rows) == {"stage1", "stage2", "stage3", "stage4", "decoder"}


def test_count_orderings_default_config():
    cfg = BackboneConfig(dtype="float32")
    counts = [trainable(cfg, Strategy("evp", evp=EvpConfig(r=r))) for r in (1, 2, 4, 8, 16, 32, 64)]
    assert all(a > b for a, b in zip(counts, counts[1:]))
    base = Strategy("evp")
    shared = trainable(cfg, resolve_strategy("evp_shared_tune", base))
    unshared = trainable(cfg, resolve_strategy("evp_unshared_up", base))
    assert shared < counts[2] < unshared
    stages = [trainable(cfg, Strategy("evp", evp=replace(base.evp, stages=tuple(range(1, k + 1))))) for k in range(1, 5)]
    assert all(a < b for a, b in zip(stages, stages[1:]))


def test_single_linear_count():
    from evp.nn import ParamSet, stream

    p = ParamSet()
    p.linear("x", 8, 4, stream(0, "t"))
    assert p.count() == 36


@pytest.mark.parametrize("kind", ["full", "decoder_only", "vpt_deep", "adaptformer", "evp"])
def test_partition_is_total(tiny_config, kind):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy(kind), 0)
    part = model.partition
    names = [n for n, _ in model.named_parameters()]
    assert sorted(part.frozen + part.trainable) == sorted(names)
    assert not set(part.frozen) & set(part.trainable)


def test_full_equals_decoder_only_total():
    cfg = BackboneConfig(dtype="float32")
    full = count_params(build_strategy(Backbone.create(cfg, 0), Strategy("full"), 0))
    dec = count_params(build_strategy(Backbone.create(cfg, 0), Strategy("decoder_only"), 0))
    assert full[1] == dec[0] + dec[1]


def test_evp_count_lies_between_decoder_only_and_full():
    cfg = BackboneConfig(dtype="float32")
    dec, full = trainable(cfg, Strategy("decoder_only")), trainable(cfg, Strategy("full"))
    assert dec < trainable(cfg, Strategy("evp", evp=EvpConfig(r=16))) < trainable(cfg, Strategy("evp")) < full


def test_every_prompt_path_receives_gradient(tiny_config, images):
    model = build_strategy(Backbone.create(tiny_config, 0), Strategy("evp"), 0)
    model.forward(images).sum().backward()
    for name, t in model.tuning.params.items():
        if name.endswith("weight"):
            assert np.abs(t.grad).sum() > 0, name


def test_unshared_up_creates_one_per_block(tiny_config):
    model = build_strategy(Backbone.create(tiny_config, 0), resolve_strategy("evp_unshared_up", Strategy()), 0)
    ups = [n for n in model.tuning.params if n.startswith("prompt.stage2.mlp_up") and n.endswith("weight")]
    assert len(ups) == tiny_config.depths[1]


def test_state_round_trip_restores_logits(tiny_config, images):
    bb = Backbone.create(tiny_config, 1)
    a = build_strategy(clone_backbone(bb), Strategy("adaptformer"), 0)
    b = build_strategy(Backbone.create(tiny_config, 9), Strategy("adaptformer"), 5)
    b.load_state(a.state())
    assert np.array_equal(a.forward(images).data, b.forward(images).data)
    with pytest.raises(KeyError):
        b.load_state({"encoder.stage1.norm.weight": np.ones(8)})
