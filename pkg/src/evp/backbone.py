"""Miniature SegFormer-style encoder and all-MLP decoder.

The encoder has four stages.  Each stage embeds its input with an
overlapped strided patch projection followed by layer norm, runs a stack
of pre-norm transformer blocks (full self-attention + GELU MLP), and
closes with a layer norm.  The decoder projects every stage to a common
width, upsamples to the stage-1 grid, concatenates, fuses, predicts one
channel and upsamples to the input size.

Parameter names are hierarchical, e.g. ``encoder.stage2.block1.attn.q.weight``
or ``decoder.fuse.weight``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import ParamSet, stream
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class StageConfig:
    embed_dim: int
    depth: int
    heads: int
    patch: int
    stride: int

    @property
    def padding(self):
        return self.patch // 2

    def validate(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.stride not in (2, 4):
            raise ValueError(f"stride must be 2 or 4, got {self.stride}")
        if self.patch <= self.stride:
            raise ValueError("patch size must exceed stride so patches overlap")
        if self.depth < 1:
            raise ValueError("each stage needs at least one block")


@dataclass(frozen=True)
class BackboneConfig:
    dims: tuple = (16, 32, 64, 96)
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (1, 2, 2, 4)
    strides: tuple = (4, 2, 2, 2)
    patches: tuple = (7, 3, 3, 3)
    in_chans: int = 3
    mlp_ratio: int = 4
    decoder_dim: int = 32
    dtype: str = "float64"
    init_std: float = 0.02
    input_mean: tuple = (0.485, 0.456, 0.406)
    input_std: tuple = (0.229, 0.224, 0.225)
    stages: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lengths = {len(self.dims), len(self.depths), len(self.heads), len(self.strides), len(self.patches)}
        if lengths != {4}:
            raise ValueError("backbone needs exactly four stages in every per-stage field")
        stages = tuple(
            StageConfig(d, n, h, p, s)
            for d, n, h, p, s in zip(self.dims, self.depths, self.heads, self.patches, self.strides)
        )
        for st in stages:
            st.validate()
        object.__setattr__(self, "stages", stages)

    def normalize(self, images):
        """Per-channel (x - mean) / std applied to [0, 1] images before embedding."""
        mean = np.asarray(self.input_mean, dtype=self.dtype)[:, None, None]
        std = np.asarray(self.input_std, dtype=self.dtype)[:, None, None]
        return (np.asarray(images, dtype=self.dtype) - mean) / std

    def scale_prompt(self, images):
        """Divide by the input std only, so an all-zero prompt stays zero."""
        std = np.asarray(self.input_std, dtype=self.dtype)[:, None, None]
        return np.asarray(images, dtype=self.dtype) / std

    @property
    def total_stride(self):
        return int(np.prod(self.strides))

    def stage_input_stride(self, s):
        """Downsampling factor of the map entering stage ``s`` (0-based)."""
        return int(np.prod(self.strides[:s]))


@lru_cache(maxsize=64)
def bilinear_matrix(n_in, n_out, dtype="float64"):
    """(n_out, n_in) interpolation weights, half-pixel centres (align_corners=False).

    Source coordinate for output o is (o + 0.5) * n_in / n_out - 0.5, clamped
    below at 0; the upper neighbour index is clamped at n_in - 1.
    """
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m.astype(dtype)


def upsample(x, size):
    """Bilinear resize of the last two axes of ``x`` to ``size``."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    rows = Tensor(bilinear_matrix(h, size[0], str(x.dtype)))
    cols = Tensor(bilinear_matrix(w, size[1], str(x.dtype)).T.copy())
    return T.matmul(T.matmul(rows, x), cols)


def init_backbone(config, seed):
    """Truncated-normal weights (std ``config.init_std``), zero biases, unit norms."""
    rng = stream(seed, "backbone")
    p = ParamSet(config.dtype)
    c_in = config.in_chans
    std = config.init_std
    for s, st in enumerate(config.stages, start=1):
        pre = f"encoder.stage{s}"
        p.linear(f"{pre}.patch_embed.proj", c_in * st.patch * st.patch, st.embed_dim, rng, std)
        p.norm(f"{pre}.patch_embed.norm", st.embed_dim)
        for b in range(st.depth):
            blk = f"{pre}.block{b}"
            p.norm(f"{blk}.norm1", st.embed_dim)
            for role in ("q", "k", "v", "proj"):
                p.linear(f"{blk}.attn.{role}", st.embed_dim, st.embed_dim, rng, std)
            p.norm(f"{blk}.norm2", st.embed_dim)
            hidden = st.embed_dim * config.mlp_ratio
            p.linear(f"{blk}.mlp.fc1", st.embed_dim, hidden, rng, std)
            p.linear(f"{blk}.mlp.fc2", hidden, st.embed_dim, rng, std)
        p.norm(f"{pre}.norm", st.embed_dim)
        c_in = st.embed_dim
    init_decoder(p, config, seed)
    return p


def init_decoder(p, config, seed):
    rng = stream(seed, "decoder")
    e = config.decoder_dim
    for s, st in enumerate(config.stages, start=1):
        p.linear(f"decoder.linear_c{s}", st.embed_dim, e, rng)
    p.linear("decoder.fuse", 4 * e, e, rng)
    p.linear("decoder.pred", e, 1, rng)


def reinit_decoder(params, config, seed):
    fresh = ParamSet(config.dtype)
    init_decoder(fresh, config, seed)
    for name, t in fresh.items():
        params[name].data = t.data.copy()


def _lin(params, prefix, x):
    bias = f"{prefix}.bias"
    return T.linear(x, params[f"{prefix}.weight"], params[bias] if bias in params else None)


def patch_embed(params, stage, s, x):
    """Overlapped strided projection of a (B, C, H, W) map to (B, N, C_seg) tokens."""
    h, w = x.shape[-2:]
    if h % stage.stride or w % stage.stride:
        raise ShapeError(f"stage{s} input {h}x{w} not divisible by stride {stage.stride}")
    cols = T.unfold2d(x, stage.patch, stage.stride, stage.padding)
    pre = f"encoder.stage{s}.patch_embed"
    tokens = _lin(params, f"{pre}.proj", cols)
    tokens = T.layer_norm(tokens, params[f"{pre}.norm.weight"], params[f"{pre}.norm.bias"])
    return tokens, h // stage.stride, w // stage.stride


def attention(params, prefix, x, heads):
    b, n, c = x.shape
    d = c // heads

    def split(t):
        return t.reshape(b, n, heads, d).transpose(0, 2, 1, 3)

    q = split(_lin(params, f"{prefix}.q", x))
    k = split(_lin(params, f"{prefix}.k", x))
    v = split(_lin(params, f"{prefix}.v", x))
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    out = T.matmul(T.softmax(scores, axis=-1), v)
    out = out.transpose(0, 2, 1, 3).reshape(b, n, c)
    return _lin(params, f"{prefix}.proj", out)


def transformer_block(params, prefix, x, heads, mlp_branch=None):
    """Pre-norm residual attention then residual MLP.

    ``mlp_branch`` (optional) maps the residual stream entering the MLP
    sub-layer to an extra term added in parallel with the MLP output.
    """
    ln = lambda t, name: T.layer_norm(t, params[f"{prefix}.{name}.weight"], params[f"{prefix}.{name}.bias"])
    x = x + attention(params, f"{prefix}.attn", ln(x, "norm1"), heads)
    h = T.gelu(_lin(params, f"{prefix}.mlp.fc1", ln(x, "norm2")))
    out = x + _lin(params, f"{prefix}.mlp.fc2", h)
    if mlp_branch is not None:
        out = out + mlp_branch(x)
    return out


def decode(params, config, features, out_size):
    """Fuse four (tokens, h, w) stage outputs into (B, H, W) logits."""
    if len(features) != 4:
        raise ShapeError(f"decoder needs 4 stage features, got {len(features)}")
    h1, w1 = features[0][1], features[0][2]
    e = config.decoder_dim
    maps = []
    for s, (tokens, h, w) in enumerate(features, start=1):
        b = tokens.shape[0]
        if tokens.shape[1] != h * w:
            raise ShapeError(f"stage{s} feature has {tokens.shape[1]} tokens for a {h}x{w} grid")
        y = _lin(params, f"decoder.linear_c{s}", tokens).reshape(b, h, w, e).transpose(0, 3, 1, 2)
        maps.append(upsample(y, (h1, w1)))
    fused = T.concat(maps, axis=1).transpose(0, 2, 3, 1)
    fused = T.relu(_lin(params, "decoder.fuse", fused))
    logits = _lin(params, "decoder.pred", fused).reshape(fused.shape[0], h1, w1)
    return upsample(logits, out_size)


class Tuning:
    """Per-block feature modifications; the base class changes nothing."""

    def begin_stage(self, s, tokens, context):
        return None

    def before_block(self, s, b, x, state):
        return x

    def after_block(self, s, b, x, state):
        return x

    def mlp_branch(self, s, b):
        return None


class Backbone:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config, seed):
        return cls(config, init_backbone(config, seed))

    def encode(self, images, tuning=None, context=None, prompts=None):
        """Run the four stages; returns a list of (tokens, h, w).

        Raw [0, 1] arrays are normalized per channel; a Tensor is taken as
        already normalized.

        ``prompts`` maps (stage, block) with 1-based stage and 0-based block
        to tensors added to that block's input tokens.
        """
        tuning = tuning or Tuning()
        shape = images.shape if isinstance(images, Tensor) else np.shape(images)
        if len(shape) != 4 or shape[1] != self.config.in_chans:
            raise ShapeError(f"expected (B, {self.config.in_chans}, H, W) images, got {tuple(shape)}")
        x = images if isinstance(images, Tensor) else Tensor(self.config.normalize(images))
        feats = []
        feat = x
        for s, st in enumerate(self.config.stages, start=1):
            tokens, h, w = patch_embed(self.params, st, s, feat)
            state = tuning.begin_stage(s, tokens, context)
            for b in range(st.depth):
                if prompts is not None and (s, b) in prompts:
                    p = prompts[(s, b)]
                    if tuple(p.shape[-2:]) != tuple(tokens.shape[-2:]):
                        raise ShapeError(f"prompt for stage{s}.block{b} has shape {p.shape}, tokens {tokens.shape}")
                    tokens = tokens + p
                tokens = tuning.before_block(s, b, tokens, state)
                tokens = transformer_block(
                    self.params, f"encoder.stage{s}.block{b}", tokens, st.heads, tuning.mlp_branch(s, b)
                )
                tokens = tuning.after_block(s, b, tokens, state)
            tokens = T.layer_norm(
                tokens, self.params[f"encoder.stage{s}.norm.weight"], self.params[f"encoder.stage{s}.norm.bias"]
            )
            feats.append((tokens, h, w))
            bsz = tokens.shape[0]
            feat = tokens.reshape(bsz, h, w, st.embed_dim).transpose(0, 3, 1, 2)
        return feats

    def forward(self, images, tuning=None, context=None, prompts=None):
        size = tuple(np.shape(images.data if isinstance(images, Tensor) else images)[-2:])
        if size[0] % self.config.total_stride or size[1] % self.config.total_stride:
            raise ShapeError(f"image size {size} not divisible by total stride {self.config.total_stride}")
        feats = self.encode(images, tuning, context, prompts)
        return decode(self.params, self.config, feats, size)

    def encoder_names(self):
        return [n for n in self.params if n.startswith("encoder.")]

    def decoder_names(self):
        return [n for n in self.params if n.startswith("decoder.")]
