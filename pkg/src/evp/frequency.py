"""High/low-frequency decomposition of images in the shifted Fourier domain.

Masks are defined on the *shifted* spectrum (DC moved to the centre).  For
a cell (i, j) of an H x W grid let

    q(i, j) = 4 |(i - H/2)(j - W/2)| / (H W)

with the centre taken as exact reals.  The high-pass mask is 0 where
``q <= tau`` and the low-pass mask is 0 where ``1 - q <= tau``; everything
else passes.  Filtering multiplies the shifted spectrum by the mask, undoes
the shift, and inverts; the imaginary residue of the inverse is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError, DomainError
from .tensor import fft2, fftshift, ifft2, ifftshift

HIGH_PASS = "high"
LOW_PASS = "low"

PROMPT_SOURCES = ("hfc", "lfc", "original", "zero", "gaussian_blur")


@dataclass(frozen=True)
class FrequencyMask:
    height: int
    width: int
    tau: float
    kind: str
    cells: np.ndarray

    @property
    def masked_fraction(self):
        return float(1.0 - self.cells.mean())


def _check_tau(tau):
    if not (0.0 <= tau <= 1.0) or not np.isfinite(tau):
        raise DomainError(f"mask ratio tau must lie in [0, 1], got {tau!r}")


def product_ratio(height, width):
    """q(i, j) over the grid, computed in float64 from exact half-integer centres."""
    i = np.arange(height, dtype=np.float64)[:, None] - height / 2.0
    j = np.arange(width, dtype=np.float64)[None, :] - width / 2.0
    return 4.0 * np.abs(i * j) / float(height * width)


def make_hfc_mask(height, width, tau):
    if height < 2 or width < 2:
        raise DomainError("mask grids need H, W >= 2")
    _check_tau(tau)
    cells = (product_ratio(height, width) > tau).astype(np.float64)
    return FrequencyMask(height, width, float(tau), HIGH_PASS, cells)


def make_lfc_mask(height, width, tau):
    if height < 2 or width < 2:
        raise DomainError("mask grids need H, W >= 2")
    _check_tau(tau)
    # (HW - 4|..|)/(HW) evaluated with integer-exact numerator where possible
    hw = float(height * width)
    i = np.arange(height, dtype=np.float64)[:, None] - height / 2.0
    j = np.arange(width, dtype=np.float64)[None, :] - width / 2.0
    ratio = (hw - 4.0 * np.abs(i * j)) / hw
    cells = (ratio > tau).astype(np.float64)
    return FrequencyMask(height, width, float(tau), LOW_PASS, cells)


def _as_channels(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image[None], True
    if image.ndim != 3:
        raise DomainError(f"expected an H x W or C x H x W image, got shape {image.shape}")
    return image, False


def apply_spectral_mask(image, cells):
    """Filter every channel through ``cells`` applied on the shifted spectrum."""
    channels, squeeze = _as_channels(image)
    if not np.all(np.isfinite(channels)):
        raise DomainError("image contains non-finite values")
    out = np.empty_like(channels)
    for c, plane in enumerate(channels):
        shifted = fftshift(fft2(plane)) * cells
        out[c] = ifft2(ifftshift(shifted))
    return out[0] if squeeze else out


def extract_hfc(image, tau):
    channels, _ = _as_channels(image)
    mask = make_hfc_mask(channels.shape[-2], channels.shape[-1], tau)
    return apply_spectral_mask(image, mask.cells)


def extract_lfc(image, tau):
    channels, _ = _as_channels(image)
    mask = make_lfc_mask(channels.shape[-2], channels.shape[-1], tau)
    return apply_spectral_mask(image, mask.cells)


def hfc_complement(image, tau):
    """The part of the image removed by the high-pass mask (spectrum under 1 - M_h)."""
    channels, _ = _as_channels(image)
    mask = make_hfc_mask(channels.shape[-2], channels.shape[-1], tau)
    return apply_spectral_mask(image, 1.0 - mask.cells)


def gaussian_kernel1d(sigma, truncate=4.0):
    """Sampled Gaussian on [-ceil(truncate*sigma), +ceil(truncate*sigma)], unit sum."""
    if sigma <= 0:
        raise DomainError(f"gaussian sigma must be positive, got {sigma!r}")
    radius = int(np.ceil(truncate * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image, sigma, truncate=4.0):
    """Separable Gaussian blur over the last two axes with reflected borders."""
    kernel = gaussian_kernel1d(sigma, truncate)
    out = correlate1d(np.asarray(image, dtype=np.float64), kernel, axis=-2, mode="reflect")
    return correlate1d(out, kernel, axis=-1, mode="reflect")


def prompt_source(image, source, tau=0.25, sigma=1.0):
    """Build the image that feeds the high-frequency prompt branch.

    ``source`` is one of ``hfc``, ``lfc``, ``original``, ``zero`` or
    ``gaussian_blur``; ``tau`` applies to the spectral sources and ``sigma``
    to the blur.
    """
    image = np.asarray(image, dtype=np.float64)
    if source == "hfc":
        return extract_hfc(image, tau)
    if source == "lfc":
        return extract_lfc(image, tau)
    if source == "original":
        return image.copy()
    if source == "zero":
        return np.zeros_like(image)
    if source == "gaussian_blur":
        return gaussian_blur(image, sigma)
    raise ConfigError(f"unknown prompt source {source!r}; expected one of {PROMPT_SOURCES}")


def energy(x):
    return float(np.sum(np.asarray(x, dtype=np.float64) ** 2))
