"""Visual prompting from frozen patch embeddings and high-frequency features (EVP),
plus the competing tuning strategies.

A strategy decides which backbone parameters train and how each
transformer block's tokens are modified:

* ``full``          every backbone parameter trains, nothing is added
* ``decoder_only``  only the decoder trains
* ``vpt_deep``      learnable tokens are prepended to every block's input
                    and stripped from its output
* ``adaptformer``   a bottleneck MLP runs in parallel with every block's MLP
* ``evp``           per stage, the frozen patch-embedding tokens and an
                    embedding of a frequency-filtered copy of the image are
                    projected to ``c = C_seg / r`` channels, summed, and sent
                    through one Adaptor per block,
                    ``P = up(gelu(tune_i(F_pe + F_hfc)))``, whose output is
                    added to that block's input tokens.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import Backbone, Tuning
from .errors import ConfigError
from .frequency import PROMPT_SOURCES, prompt_source
from .nn import ParamSet, stream, trunc_normal
from .tensor import ShapeError, Tensor

STRATEGY_KINDS = ("full", "decoder_only", "vpt_deep", "adaptformer", "evp")


@dataclass(frozen=True)
class EvpConfig:
    r: int = 4
    tau: float = 0.25
    prompt_source: str = "hfc"
    blur_sigma: float = 1.0
    stages: tuple = (1, 2, 3, 4)
    share_mlp_tune: bool = False
    share_mlp_up: bool = True
    use_fpe: bool = True
    use_fhfc: bool = True

    def validate(self):
        if int(self.r) != self.r or self.r < 1:
            raise ConfigError(f"scale factor r must be a positive integer, got {self.r!r}")
        if not self.stages or not set(self.stages) <= {1, 2, 3, 4}:
            raise ConfigError(f"stages must be a non-empty subset of 1..4, got {self.stages!r}")
        if not (self.use_fpe or self.use_fhfc):
            raise ConfigError("EVP needs at least one of use_fpe / use_fhfc")
        if self.prompt_source not in PROMPT_SOURCES:
            raise ConfigError(f"unknown prompt source {self.prompt_source!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {self.tau!r}")


@dataclass(frozen=True)
class Strategy:
    kind: str = "evp"
    n_tokens: int = 10
    mid_dim: int = 2
    adapt_scale: float = 0.1
    evp: EvpConfig = field(default_factory=EvpConfig)

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.kind == "evp":
            self.evp.validate()

    @property
    def label(self):
        if self.kind == "vpt_deep":
            return f"vpt_deep(n={self.n_tokens})"
        if self.kind == "adaptformer":
            return f"adaptformer(mid={self.mid_dim})"
        if self.kind != "evp":
            return self.kind
        e = self.evp
        bits = [f"r={e.r}", f"tau={e.tau:g}"]
        if e.prompt_source != "hfc":
            bits.append(f"src={e.prompt_source}")
        if tuple(e.stages) != (1, 2, 3, 4):
            bits.append("stages=" + "".join(map(str, e.stages)))
        if not e.use_fpe:
            bits.append("no_fpe")
        if not e.use_fhfc:
            bits.append("no_fhfc")
        if e.share_mlp_tune:
            bits.append("shared_tune")
        if not e.share_mlp_up:
            bits.append("unshared_up")
        return "evp(" + ",".join(bits) + ")"


# Ablation variants addressable by name from the command line.
VARIANTS = {
    "no_prompt": lambda base: replace(base, kind="decoder_only"),
    "evp_no_fpe": lambda base: replace(base, kind="evp", evp=replace(base.evp, use_fpe=False)),
    "evp_no_fhfc": lambda base: replace(base, kind="evp", evp=replace(base.evp, use_fhfc=False)),
    "evp_shared_tune": lambda base: replace(base, kind="evp", evp=replace(base.evp, share_mlp_tune=True)),
    "evp_unshared_up": lambda base: replace(base, kind="evp", evp=replace(base.evp, share_mlp_up=False)),
}


def resolve_strategy(name, base):
    """Strategy for a command-line tag, inheriting hyperparameters from ``base``."""
    if name in STRATEGY_KINDS:
        return replace(base, kind=name)
    if name in VARIANTS:
        return VARIANTS[name](base)
    raise ConfigError(f"unknown strategy tag {name!r}")


def bottleneck_dim(c_seg, r):
    """c = C_seg / r, rounded (half to even) and floored at 1 when r does not divide."""
    if c_seg % r == 0:
        return c_seg // r
    return max(1, int(round(c_seg / r)))


def _lin(params, prefix, x):
    return T.linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def embed_tune(tokens, params, prefix):
    """F_pe: project frozen patch-embedding tokens (B, N, C_seg) to c channels."""
    w = params[f"{prefix}.weight"]
    if tokens.shape[-1] != w.shape[0]:
        raise ShapeError(f"embed tune expects {w.shape[0]}-dim tokens, got {tokens.shape[-1]}")
    return _lin(params, prefix, tokens)


def hfc_tune(prompt_image, stage, params, prefix, n_tokens=None):
    """F_hfc: overlapped patchify of the prompt image at a stage's grid, then linear to c."""
    x = prompt_image if isinstance(prompt_image, Tensor) else Tensor(prompt_image)
    cols = T.unfold2d(x, stage.patch, stage.stride, stage.padding)
    if n_tokens is not None and cols.shape[1] != n_tokens:
        raise ShapeError(f"prompt grid gives {cols.shape[1]} tokens, stage has {n_tokens}")
    return _lin(params, prefix, cols)


def adaptor(f_pe, f_hfc, params, tune_prefix, up_prefix):
    """P = up(gelu(tune(F_pe + F_hfc))); either input may be None when disabled."""
    if f_pe is not None and f_hfc is not None and f_pe.shape != f_hfc.shape:
        raise ShapeError(f"F_pe {f_pe.shape} and F_hfc {f_hfc.shape} differ")
    f = f_pe if f_hfc is None else (f_hfc if f_pe is None else f_pe + f_hfc)
    return _lin(params, up_prefix, T.gelu(_lin(params, tune_prefix, f)))


def average_pool(images, factor):
    if factor == 1:
        return images
    b, c, h, w = images.shape
    return images.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


class EvpTuning(Tuning):
    def __init__(self, backbone, cfg, seed):
        self.cfg = cfg
        self.backbone = backbone
        self.params = ParamSet(backbone.config.dtype)
        rng = stream(seed, "prompt")
        in_chans = backbone.config.in_chans
        for s in sorted(cfg.stages):
            st = backbone.config.stages[s - 1]
            c = bottleneck_dim(st.embed_dim, cfg.r)
            pre = f"prompt.stage{s}"
            if cfg.use_fpe:
                self.params.linear(f"{pre}.embed_tune", st.embed_dim, c, rng)
            if cfg.use_fhfc:
                self.params.linear(f"{pre}.hfc_tune", in_chans * st.patch * st.patch, c, rng)
            for b in range(1 if cfg.share_mlp_tune else st.depth):
                self.params.linear(f"{pre}.mlp_tune{b}", c, c, rng)
            for b in range(1 if cfg.share_mlp_up else st.depth):
                self.params.linear(f"{pre}.mlp_up{b}", c, st.embed_dim, rng)

    def prompt_images(self, images):
        """Frequency-filtered copies of a (B, C, H, W) batch, as float64 numpy."""
        cfg = self.cfg
        return np.stack(
            [prompt_source(img, cfg.prompt_source, tau=cfg.tau, sigma=cfg.blur_sigma) for img in images]
        )

    def begin_stage(self, s, tokens, context):
        if s not in self.cfg.stages:
            return None
        pre = f"prompt.stage{s}"
        f_pe = embed_tune(tokens, self.params, f"{pre}.embed_tune") if self.cfg.use_fpe else None
        f_hfc = None
        if self.cfg.use_fhfc:
            if context is None:
                raise ValueError("EVP with use_fhfc needs prompt images")
            st = self.backbone.config.stages[s - 1]
            pooled = average_pool(context, self.backbone.config.stage_input_stride(s - 1))
            pooled = Tensor(self.backbone.config.scale_prompt(pooled))
            f_hfc = hfc_tune(pooled, st, self.params, f"{pre}.hfc_tune", tokens.shape[1])
        return f_pe, f_hfc

    def before_block(self, s, b, x, state):
        if state is None:
            return x
        pre = f"prompt.stage{s}"
        tune = f"{pre}.mlp_tune{0 if self.cfg.share_mlp_tune else b}"
        up = f"{pre}.mlp_up{0 if self.cfg.share_mlp_up else b}"
        return x + adaptor(state[0], state[1], self.params, tune, up)


class VptTuning(Tuning):
    def __init__(self, backbone, n_tokens, seed):
        self.n = n_tokens
        self.params = ParamSet(backbone.config.dtype)
        rng = stream(seed, "prompt")
        for s, st in enumerate(backbone.config.stages, start=1):
            for b in range(st.depth):
                self.params.add(f"vpt.stage{s}.block{b}.tokens", trunc_normal(rng, (n_tokens, st.embed_dim)))

    def before_block(self, s, b, x, state):
        tok = self.params[f"vpt.stage{s}.block{b}.tokens"]
        tok = T.broadcast_to(tok, (x.shape[0],) + tok.shape)
        return T.concat([tok, x], axis=1)

    def after_block(self, s, b, x, state):
        return x[:, self.n :]


class AdaptFormerTuning(Tuning):
    def __init__(self, backbone, mid_dim, scale, seed):
        self.scale = scale
        self.params = ParamSet(backbone.config.dtype)
        rng = stream(seed, "prompt")
        for s, st in enumerate(backbone.config.stages, start=1):
            for b in range(st.depth):
                self.params.linear(f"adapt.stage{s}.block{b}.down", st.embed_dim, mid_dim, rng)
                self.params.linear(f"adapt.stage{s}.block{b}.up", mid_dim, st.embed_dim, rng)

    def mlp_branch(self, s, b):
        pre = f"adapt.stage{s}.block{b}"

        def branch(x):
            h = T.relu(_lin(self.params, f"{pre}.down", x))
            return _lin(self.params, f"{pre}.up", h) * self.scale

        return branch


@dataclass
class Partition:
    frozen: list
    trainable: list

    def counts(self, model):
        return model.count(self.frozen), model.count(self.trainable)


class SegModel:
    """A backbone plus the tuning strategy applied to it."""

    def __init__(self, backbone, strategy, tuning):
        self.backbone = backbone
        self.strategy = strategy
        self.tuning = tuning

    @property
    def config(self):
        return self.backbone.config

    def named_parameters(self):
        yield from self.backbone.params.items()
        if self.tuning is not None:
            yield from self.tuning.params.items()

    def parameter(self, name):
        if name in self.backbone.params:
            return self.backbone.params[name]
        return self.tuning.params[name]

    def count(self, names):
        return int(sum(self.parameter(n).data.size for n in names))

    @property
    def partition(self):
        frozen, trainable = [], []
        for name, t in self.named_parameters():
            (trainable if t.requires_grad else frozen).append(name)
        return Partition(frozen, trainable)

    def trainable_parameters(self):
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def state(self):
        return {n: t.data for n, t in self.named_parameters()}

    def load_state(self, arrays):
        names = [n for n, _ in self.named_parameters()]
        if set(arrays) != set(names):
            missing = sorted(set(names) - set(arrays))
            extra = sorted(set(arrays) - set(names))
            raise KeyError(f"parameter names differ; missing={missing} unexpected={extra}")
        for n in names:
            t = self.parameter(n)
            if tuple(arrays[n].shape) != t.shape:
                raise ValueError(f"{n}: shape {arrays[n].shape} != {t.shape}")
            t.data = np.array(arrays[n], dtype=t.dtype)

    def needs_prompt_images(self):
        return isinstance(self.tuning, EvpTuning) and self.tuning.cfg.use_fhfc

    def prompt_images(self, images):
        if not self.needs_prompt_images():
            return None
        return self.tuning.prompt_images(images)

    def forward(self, images, prompt_images=None):
        if self.needs_prompt_images() and prompt_images is None:
            prompt_images = self.prompt_images(np.asarray(images))
        return self.backbone.forward(images, self.tuning, prompt_images)


def build_strategy(backbone, strategy, seed):
    """Freeze/unfreeze backbone parameters in place and attach the strategy's tuning.

    Returns a :class:`SegModel`; its ``partition`` lists frozen and
    trainable parameter names.
    """
    if not isinstance(strategy, Strategy):
        raise ConfigError(f"expected a Strategy, got {strategy!r}")
    kind = strategy.kind
    for name, t in backbone.params.items():
        t.requires_grad = kind == "full" or name.startswith("decoder.")
        t.grad = None
    if kind in ("full", "decoder_only"):
        tuning = Tuning()
        tuning.params = ParamSet(backbone.config.dtype)
    elif kind == "vpt_deep":
        tuning = VptTuning(backbone, strategy.n_tokens, seed)
    elif kind == "adaptformer":
        tuning = AdaptFormerTuning(backbone, strategy.mid_dim, strategy.adapt_scale, seed)
    else:
        tuning = EvpTuning(backbone, strategy.evp, seed)
    return SegModel(backbone, strategy, tuning)


def build_model(backbone_config, strategy, seed):
    return build_strategy(Backbone.create(backbone_config, seed), strategy, seed)


def clone_backbone(backbone):
    return Backbone(backbone.config, copy.deepcopy(backbone.params))


def count_params(model):
    """(frozen, trainable) scalar counts for a built model."""
    part = model.partition
    return model.count(part.frozen), model.count(part.trainable)


def stage_breakdown(model):
    """Per-stage (frozen, trainable) counts, keyed ``stage1`` .. ``stage4`` and ``decoder``."""
    rows = {}
    for name, t in model.named_parameters():
        parts = name.split(".")
        key = next((p for p in parts if p.startswith("stage")), parts[0])
        frozen, trainable = rows.get(key, (0, 0))
        if t.requires_grad:
            trainable += t.data.size
        else:
            frozen += t.data.size
        rows[key] = (frozen, trainable)
    return dict(sorted(rows.items()))
