"""Deterministic synthetic segmentation tasks with exact ground-truth masks.

Four task families, each hiding a region set apart by low-level image statistics:

``blur``        a region is Gaussian-blurred (out-of-focus pixels)
``shadow``      a region is darkened by a gain with a soft penumbra
``splice``      a region is pasted from another image, with its own noise
                and 8-bit requantization
``camouflage``  a region is refilled with a phase-scrambled copy of the
                surrounding texture, preserving its amplitude spectrum

Every random draw comes from a Philox counter-based generator keyed on
(root seed, task, sample index), so a dataset is reproduced bit for bit
from its :class:`SynthSpec`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DomainError, IntegrityError
from .frequency import gaussian_blur
from .nn import stream

TASKS = ("blur", "shadow", "splice", "camouflage")
REGIONS = ("ellipse", "rectangle", "blob", "any")
DEFAULT_SEVERITY = {"blur": 3.0, "shadow": 0.45, "splice": 0.04, "camouflage": 1.0}
SEVERITY_RANGE = {"blur": (0.0, 8.0), "shadow": (0.2, 1.0), "splice": (0.0, 0.5), "camouflage": (0.0, 1.0)}
MASK_FRACTION = (0.05, 0.6)
MAX_REGION_TRIES = 10


@dataclass(frozen=True)
class SynthSpec:
    task: str = "blur"
    count: int = 8
    size: int = 64
    seed: int = 0
    region: str = "any"
    severity: float = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.region not in REGIONS:
            raise ConfigError(f"unknown region family {self.region!r}")
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.size < 32:
            raise ConfigError("size must be >= 32")
        if self.severity is None:
            object.__setattr__(self, "severity", DEFAULT_SEVERITY[self.task])
        lo, hi = SEVERITY_RANGE[self.task]
        if not lo <= self.severity <= hi:
            raise ConfigError(f"{self.task} severity must lie in [{lo}, {hi}], got {self.severity}")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    meta: dict = field(default_factory=dict)

    @property
    def degenerate(self):
        return bool(self.meta.get("degenerate", False))


def _grid(size):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return y, x


def band_limited_noise(rng, size, low=0.08, high=0.75):
    """White noise restricted to radial frequencies in [low, high] cycles/pixel, unit std.

    The default upper edge lies past the spectral corners (radius 1/sqrt(2)),
    so the texture keeps energy in every direction up to Nyquist.
    """
    white = rng.standard_normal((size, size))
    f = np.fft.fftfreq(size)
    radius = np.hypot(f[:, None], f[None, :])
    spectrum = np.fft.fft2(white) * ((radius >= low) & (radius <= high))
    out = np.fft.ifft2(spectrum).real
    return out / (out.std() + 1e-12)


def gen_base(seed, size=64):
    """Colour gradient + band-limited texture + a few sparse shapes, clipped to [0, 1]."""
    rng = stream(seed, "base")
    y, x = _grid(size)
    c0, c1 = rng.uniform(0.25, 0.75, 3), rng.uniform(0.25, 0.75, 3)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * x + np.sin(angle) * y) / size
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]

    luma = band_limited_noise(rng, size)
    tint = rng.uniform(0.7, 1.0, 3)
    img = img + rng.uniform(0.10, 0.16) * tint[:, None, None] * luma[None]
    img = img + 0.03 * np.stack([band_limited_noise(rng, size) for _ in range(3)])

    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, size, 2)
        rad = rng.uniform(0.04, 0.1) * size
        disc = (((y - cy) ** 2 + (x - cx) ** 2) <= rad * rad).astype(np.float64)
        colour = rng.uniform(0.1, 0.9, 3)
        alpha = rng.uniform(0.3, 0.6)
        img = img * (1 - alpha * disc) + alpha * disc * colour[:, None, None]
    return np.clip(img, 0.0, 1.0)


def _ellipse(rng, size):
    y, x = _grid(size)
    cy, cx = rng.uniform(0.25, 0.75, 2) * size
    ry, rx = rng.uniform(0.15, 0.4, 2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = y - cy, x - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _rectangle(rng, size):
    y, x = _grid(size)
    h, w = rng.uniform(0.25, 0.7, 2) * size
    top = rng.uniform(0, size - h)
    left = rng.uniform(0, size - w)
    return (y >= top) & (y < top + h) & (x >= left) & (x < left + w)


def _blob(rng, size):
    field_ = gaussian_blur(rng.standard_normal((size, size)), size / 8.0)
    frac = rng.uniform(0.12, 0.45)
    return field_ >= np.quantile(field_, 1.0 - frac)


_REGION_MAKERS = {"ellipse": _ellipse, "rectangle": _rectangle, "blob": _blob}


def random_region(rng, size, family="any"):
    """Binary region whose area fraction lies in [0.05, 0.6]; up to 10 redraws."""
    for _ in range(MAX_REGION_TRIES):
        fam = family if family != "any" else ("ellipse", "rectangle", "blob")[rng.integers(3)]
        mask = _REGION_MAKERS[fam](rng, size)
        if MASK_FRACTION[0] <= mask.mean() <= MASK_FRACTION[1]:
            return mask.astype(np.uint8)
    raise DomainError(f"could not draw a {family} region within the area bounds in {MAX_REGION_TRIES} tries")


def _sample_rng(spec, index):
    return stream(spec.seed, f"{spec.task}:{index}")


def _seed_from(rng):
    return int(rng.integers(0, 2**31 - 1))


def gen_blur(spec, index=0):
    rng = _sample_rng(spec, index)
    base = gen_base(_seed_from(rng), spec.size)
    mask = random_region(rng, spec.size, spec.region)
    degenerate = spec.severity < 1e-3
    image = base if degenerate else np.where(mask[None] > 0, gaussian_blur(base, spec.severity), base)
    return _sample(image, mask, spec, index, degenerate)


def gen_shadow(spec, index=0):
    rng = _sample_rng(spec, index)
    base = gen_base(_seed_from(rng), spec.size)
    mask = random_region(rng, spec.size, spec.region)
    gain = spec.severity
    soft = gaussian_blur(mask.astype(np.float64), 1.5)
    image = base * (1.0 - (1.0 - gain) * soft)[None]
    return _sample(image, mask, spec, index, gain >= 1.0)


def gen_splice(spec, index=0):
    rng = _sample_rng(spec, index)
    base = gen_base(_seed_from(rng), spec.size)
    donor = gen_base(_seed_from(rng), spec.size)
    mask = random_region(rng, spec.size, spec.region)
    patch = donor + spec.severity * rng.standard_normal(donor.shape)
    patch = np.round(np.clip(patch, 0.0, 1.0) * 255.0) / 255.0
    image = np.where(mask[None] > 0, patch, base)
    return _sample(image, mask, spec, index, spec.severity == 0.0)


def phase_scramble(texture, ratio, rng):
    """Keep each channel's amplitude spectrum, perturb phases by ``ratio`` x a random real-signal phase."""
    h, w = texture.shape[-2:]
    noise_phase = np.angle(np.fft.fft2(rng.standard_normal((h, w))))
    noise_phase[0, 0] = 0.0
    out = np.empty_like(texture)
    for c, plane in enumerate(texture):
        spec = np.fft.fft2(plane)
        out[c] = np.fft.ifft2(np.abs(spec) * np.exp(1j * (np.angle(spec) + ratio * noise_phase))).real
    return out


def gen_camouflage(spec, index=0):
    rng = _sample_rng(spec, index)
    base = gen_base(_seed_from(rng), spec.size)
    mask = random_region(rng, spec.size, spec.region)
    smooth = gaussian_blur(base, spec.size / 8.0)
    fill = smooth + phase_scramble(base - smooth, spec.severity, rng)
    image = np.where(mask[None] > 0, np.clip(fill, 0.0, 1.0), base)
    return _sample(image, mask, spec, index, spec.severity == 0.0)


def _sample(image, mask, spec, index, degenerate):
    meta = {
        "index": index,
        "task": spec.task,
        "seed": spec.seed,
        "severity": spec.severity,
        "degenerate": bool(degenerate),
    }
    return Sample(np.clip(image, 0.0, 1.0), mask.astype(np.uint8), meta)


GENERATORS = {"blur": gen_blur, "shadow": gen_shadow, "splice": gen_splice, "camouflage": gen_camouflage}


def generate(spec):
    return [GENERATORS[spec.task](spec, i) for i in range(spec.count)]


def stack(samples):
    """(images (N, 3, H, W), masks (N, H, W)) arrays from a sample list."""
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def save_dataset(directory, samples):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        rgb = np.round(np.clip(s.image, 0, 1).transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(os.path.join(directory, "images", f"{i:05d}.png"))
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255, "L").save(os.path.join(directory, "masks", f"{i:05d}.png"))
        m = s.meta
        lines.append(f"{i} {m.get('task', 'unknown')} {m.get('seed', 0)} {float(m.get('severity', 0.0))!r}\n")
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def load_dataset(directory):
    path = os.path.join(directory, "manifest.txt")
    if not os.path.exists(path):
        raise IntegrityError(f"{directory}: no manifest.txt")
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                index, task, seed, severity = int(parts[0]), parts[1], int(parts[2]), float(parts[3])
                if len(parts) != 4:
                    raise ValueError
            except (ValueError, IndexError):
                raise IntegrityError(f"{path}:{lineno}: malformed manifest line {line.rstrip()!r}") from None
            img_path = os.path.join(directory, "images", f"{index:05d}.png")
            mask_path = os.path.join(directory, "masks", f"{index:05d}.png")
            if not os.path.exists(img_path):
                raise IntegrityError(f"{path}:{lineno}: missing image {img_path}")
            if not os.path.exists(mask_path):
                raise IntegrityError(f"{path}:{lineno}: missing mask for image {img_path}")
            with Image.open(img_path) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
            with Image.open(mask_path) as im:
                mask = (np.asarray(im.convert("L")) > 127).astype(np.uint8)
            meta = {"index": index, "task": task, "seed": seed, "severity": severity, "degenerate": False}
            samples.append(Sample(image, mask, meta))
    if not samples:
        raise IntegrityError(f"{path}: manifest lists no samples")
    return samples
