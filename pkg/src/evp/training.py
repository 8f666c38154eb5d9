"""Losses, AdamW, cosine schedule, the training loop and strategy comparison."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import tensor as T
from .errors import ConfigError, DomainError, NumericalError
from .metrics import evaluate_dataset
from .nn import stream
from .prompting import build_strategy, clone_backbone, count_params
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSSES = ("bce", "balanced_bce", "bce_plus_iou")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 30
    batch: int = 4
    loss: str = "bce"
    seed: int = 0
    flip_augment: bool = True
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threshold: float = 0.5

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigError("batch and epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")


# ---------------------------------------------------------------- losses


def _target(target, like):
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    if y.shape != like.shape:
        raise DomainError(f"target shape {y.shape} != logits shape {like.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("targets must be binary {0, 1}")
    return y.astype(like.dtype)


def _bce_terms(logits, y):
    # softplus(x) - x*y == -[y log s(x) + (1-y) log(1-s(x))]
    return T.softplus(logits) - logits * Tensor(y)


def bce_loss(logits, target):
    y = _target(target, logits)
    return T.mean(_bce_terms(logits, y))


def class_weights(y):
    """(w_pos, w_neg) = (N_neg / N, N_pos / N); None when only one class is present."""
    n = y.size
    n_pos = float(np.count_nonzero(y))
    if n_pos == 0 or n_pos == n:
        return None
    return (n - n_pos) / n, n_pos / n


def balanced_bce_loss(logits, target):
    """BCE with inverse class-frequency weights computed over the batch."""
    y = _target(target, logits)
    w = class_weights(y)
    if w is None:
        return bce_loss(logits, y)
    weights = np.where(y > 0, w[0], w[1]).astype(logits.dtype)
    return T.mean(_bce_terms(logits, y) * Tensor(weights))


def soft_iou_loss(logits, target, smooth=1.0):
    """1 - (sum p*y + s) / (sum p + sum y - sum p*y + s), averaged over the batch."""
    y = _target(target, logits)
    p = T.sigmoid(logits)
    axes = tuple(range(1, logits.ndim)) if logits.ndim > 2 else None
    yt = Tensor(y)
    inter = T.tsum(p * yt, axis=axes)
    union = T.tsum(p, axis=axes) + T.tsum(yt, axis=axes) - inter
    return T.mean(1.0 - (inter + smooth) / (union + smooth))


def total_loss(kind, logits, target):
    if kind == "bce":
        return bce_loss(logits, target)
    if kind == "balanced_bce":
        return balanced_bce_loss(logits, target)
    if kind == "bce_plus_iou":
        return bce_loss(logits, target) + soft_iou_loss(logits, target)
    raise ConfigError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------- optimizer


def cosine_lr(t, total, lr0):
    """lr0 * (1 + cos(pi t / T)) / 2 for 0 <= t <= T."""
    if t < 0 or t > total:
        raise DomainError(f"step {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr):
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            adamw_update(p.data, p.grad, self.m[name], self.v[name], self.t, lr,
                         self.beta1, self.beta2, self.eps, self.weight_decay)


def adamw_update(p, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """In-place AdamW update of ``p`` with moment buffers ``m``, ``v`` at step ``t`` (1-based)."""
    if not (p.shape == g.shape == m.shape == v.shape):
        raise T.ShapeError(f"AdamW shapes disagree: p{p.shape} g{g.shape} m{m.shape} v{v.shape}")
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    if weight_decay:
        p *= 1.0 - lr * weight_decay
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- records


@dataclass
class RunRecord:
    strategy: str
    config: dict
    epoch_losses: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    trainable: int = 0
    frozen: int = 0
    fingerprint: str = ""
    status: str = "ok"
    wall_time: float = field(default=0.0, compare=False)

    def to_text(self):
        """Self-describing JSON document; wall time is left out so reruns are byte-identical."""
        doc = asdict(self)
        doc.pop("wall_time")
        doc["format"] = "evp-run-record/1"
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_text(cls, text):
        doc = json.loads(text)
        doc.pop("format", None)
        return cls(**doc)


# ---------------------------------------------------------------- training loop


def _flip(x, flags):
    x = x.copy()
    x[flags] = x[flags][..., ::-1]
    return x


def predict(model, images, batch=8, prompt_images=None):
    """Sigmoid probabilities (N, H, W) for a stack of images."""
    dtype = model.config.dtype
    out = []
    for i in range(0, len(images), batch):
        chunk = images[i : i + batch]
        prompts = None if prompt_images is None else prompt_images[i : i + batch]
        if prompts is None and model.needs_prompt_images():
            prompts = model.prompt_images(chunk)
        logits = model.forward(np.asarray(chunk, dtype=dtype), prompts).data.astype(np.float64)
        out.append(expit(logits))
    return np.concatenate(out)


def evaluate(model, images, masks, threshold=0.5, aggregate="per_image"):
    probs = predict(model, images)
    return evaluate_dataset(list(probs), list(masks), threshold, aggregate)


def frozen_fingerprint(model):
    return model.backbone.params.fingerprint(model.backbone.encoder_names())


def fit(model, images, masks, cfg, eval_sets=None, on_step=None):
    """Train ``model``'s trainable partition in place; returns a RunRecord.

    ``images`` is (N, 3, H, W), ``masks`` (N, H, W).  Shuffling and flip
    coin tosses come from streams split off ``cfg.seed``, so data order is
    shared by every strategy trained with the same seed.
    """
    start = time.perf_counter()
    n = len(images)
    if n == 0:
        raise DomainError("empty training set")
    dtype = model.config.dtype
    frozen, trainable = count_params(model)
    record = RunRecord(
        strategy=model.strategy.label,
        config=asdict(cfg),
        trainable=trainable,
        frozen=frozen,
        fingerprint=frozen_fingerprint(model),
    )
    prompts = model.prompt_images(images)
    prompts_flipped = model.prompt_images(images[..., ::-1]) if cfg.flip_augment and prompts is not None else None

    shuffle_rng = stream(cfg.seed, "shuffle")
    flip_rng = stream(cfg.seed, "flip")
    steps_per_epoch = math.ceil(n / cfg.batch)
    total = cfg.epochs * steps_per_epoch
    opt = AdamW(model.trainable_parameters(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        running = 0.0
        for k in range(steps_per_epoch):
            idx = order[k * cfg.batch : (k + 1) * cfg.batch]
            x, y = images[idx], masks[idx]
            p = None if prompts is None else prompts[idx]
            if cfg.flip_augment:
                flags = flip_rng.random(len(idx)) < 0.5
                x, y = _flip(x, flags), _flip(y, flags)
                if p is not None:
                    p = np.where(flags[:, None, None, None], prompts_flipped[idx], p)
            logits = model.forward(np.asarray(x, dtype=dtype), p)
            loss = total_loss(cfg.loss, logits, y)
            value = float(loss.data)
            if not math.isfinite(value):
                record.status = f"non-finite loss at epoch {epoch} step {step}"
                record.wall_time = time.perf_counter() - start
                raise NumericalError(record.status, record)
            model.zero_grad()
            loss.backward()
            opt.step(cosine_lr(step, total, cfg.lr))
            running += value * len(idx)
            step += 1
            if on_step is not None:
                on_step(step, value)
        record.epoch_losses.append(running / n)
        log.debug("%s epoch %d loss %.5f", record.strategy, epoch, record.epoch_losses[-1])
    for name, (ims, ms) in (eval_sets or {}).items():
        record.metrics[name] = evaluate(model, ims, ms, cfg.threshold).as_dict()
    record.wall_time = time.perf_counter() - start
    return record


def compare(backbone, strategies, train, test, cfg, seed=None):
    """Train every strategy from the same backbone initialization and data order.

    ``train`` and ``test`` are (images, masks) pairs.  Returns one
    RunRecord per strategy, in order.
    """
    seed = cfg.seed if seed is None else seed
    records = []
    for strategy in strategies:
        model = build_strategy(clone_backbone(backbone), strategy, seed)
        records.append(fit(model, train[0], train[1], cfg, {"train": train, "test": test}))
    return records


def comparison_table(records, dataset="test"):
    """Plain-text table: one row per strategy with parameter counts and metrics."""
    header = f"{'strategy':<44} {'trainable':>10} {'frozen':>9} {'F_beta':>7} {'F1':>7} {'MAE':>7} {'BER':>7} {'AUC':>7} {'backbone':>16}"
    lines = [header, "-" * len(header)]
    for r in records:
        m = r.metrics.get(dataset, {})

        def fmt(key):
            v = m.get(key)
            return f"{v:7.4f}" if v is not None else f"{'-':>7}"

        lines.append(
            f"{r.strategy:<44} {r.trainable:>10d} {r.frozen:>9d} {fmt('f_beta')} {fmt('f1')} "
            f"{fmt('mae')} {fmt('ber')} {fmt('auc')} {r.fingerprint:>16}"
        )
    return "\n".join(lines) + "\n"


def pretrain_backbone(backbone, images, steps, seed, lr=1e-3, noise=0.1, batch=4):
    """Toy denoising pretraining: regress the clean grey image from a noisy input.

    Trains encoder and decoder jointly, then re-initializes the decoder so
    downstream tuning starts from a pretrained encoder and a fresh head.
    """
    from .backbone import reinit_decoder

    rng = stream(seed, "pretrain")
    for _, t in backbone.params.items():
        t.requires_grad = True
    opt = AdamW(list(backbone.params.items()), weight_decay=0.0)
    dtype = backbone.config.dtype
    for step in range(steps):
        idx = rng.integers(0, len(images), batch)
        clean = images[idx]
        noisy = np.clip(clean + noise * rng.standard_normal(clean.shape), 0, 1)
        pred = backbone.forward(np.asarray(noisy, dtype=dtype))
        diff = pred - Tensor(clean.mean(axis=1).astype(dtype))
        loss = T.mean(diff * diff)
        backbone.params.zero_grad()
        loss.backward()
        opt.step(cosine_lr(step, steps, lr))
    backbone.params.zero_grad()
    reinit_decoder(backbone.params, backbone.config, seed)
    return backbone


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)
