import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evp.errors import ConfigError, DomainError
from evp.frequency import (
    energy,
    extract_hfc,
    extract_lfc,
    gaussian_blur,
    hfc_complement,
    make_hfc_mask,
    make_lfc_mask,
    prompt_source,
)


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def brute_filter(plane, cells):
    """Direct O(N^4)-style DFT filtering with explicit index shifting."""
    h, w = plane.shape
    z = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            z[u, v] = sum(
                plane[i, j] * np.exp(-2j * np.pi * (u * i / h + v * j / w)) for i in range(h) for j in range(w)
            )
    # shifted index (a, b) holds frequency ((a - H//2) mod H, (b - W//2) mod W)
    masked = np.zeros_like(z)
    for a in range(h):
        for b in range(w):
            u, v = (a - h // 2) % h, (b - w // 2) % w
            masked[u, v] = z[u, v] * cells[a, b]
    out = np.zeros((h, w), dtype=complex)
    for i in range(h):
        for j in range(w):
            out[i, j] = sum(
                masked[u, v] * np.exp(2j * np.pi * (u * i / h + v * j / w)) for u in range(h) for v in range(w)
            )
    return (out / (h * w)).real


def naive_mask(h, w, tau):
    cells = np.ones((h, w))
    for i in range(h):
        for j in range(w):
            if 4 * abs((i - h / 2) * (j - w / 2)) / (h * w) <= tau:
                cells[i, j] = 0
    return cells


def test_hfc_mask_4x4_quarter():
    expected = [[1, 1, 0, 1], [1, 0, 0, 0], [0, 0, 0, 0], [1, 0, 0, 0]]
    assert np.array_equal(make_hfc_mask(4, 4, 0.25).cells, expected)


def test_hfc_mask_boundaries():
    assert not make_hfc_mask(6, 8, 1.0).cells.any()
    zero = make_hfc_mask(6, 8, 0.0).cells
    expected = np.ones((6, 8))
    expected[3, :] = 0
    expected[:, 4] = 0
    assert np.array_equal(zero, expected)


@pytest.mark.parametrize("h,w,tau", [(4, 4, 0.25), (5, 7, 0.3), (8, 6, 0.1), (9, 9, 0.5), (16, 16, 0.05)])
def test_hfc_mask_matches_formula(h, w, tau):
    assert np.array_equal(make_hfc_mask(h, w, tau).cells, naive_mask(h, w, tau))


@pytest.mark.parametrize("tau", [-0.01, 1.2, float("nan")])
def test_tau_out_of_range(tau):
    with pytest.raises(DomainError):
        make_hfc_mask(4, 4, tau)
    with pytest.raises(DomainError):
        make_lfc_mask(4, 4, tau)


def test_lfc_mask_boundaries():
    zero = make_lfc_mask(4, 4, 0.0).cells
    expected = np.ones((4, 4))
    expected[0, 0] = 0  # the only cell with 4|..| == HW
    assert np.array_equal(zero, expected)
    assert not make_lfc_mask(4, 4, 1.0).cells.any()


def test_lfc_half_is_complement_of_hfc_half_off_boundary():
    hi = make_hfc_mask(4, 4, 0.5).cells
    lo = make_lfc_mask(4, 4, 0.5).cells
    i = np.arange(4)[:, None] - 2.0
    j = np.arange(4)[None, :] - 2.0
    q = 4 * np.abs(i * j) / 16
    # q < 0.5: high-pass blocks, low-pass keeps; q > 0.5: the reverse; q == 0.5 blocked by both
    assert np.array_equal(lo[q < 0.5], np.ones((q < 0.5).sum()))
    assert np.array_equal(hi[q > 0.5], np.ones((q > 0.5).sum()))
    assert not lo[q >= 0.5].any()
    assert not hi[q == 0.5].any()


def test_constant_image_has_no_hfc():
    img = np.full((3, 8, 8), 0.7)
    for tau in (0.0, 0.1, 0.25, 1.0):
        assert np.max(np.abs(extract_hfc(img, tau))) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("tau", [0.0, 0.1, 0.25, 0.5, 1.0])
def test_spectrum_partition_reconstructs(seed, tau):
    img = np.random.default_rng(seed).random((3, 10, 12))
    assert np.max(np.abs(extract_hfc(img, tau) + hfc_complement(img, tau) - img)) <= 1e-9


def test_hfc_matches_brute_force_dft():
    img = np.random.default_rng(11).random((8, 8))
    ref = brute_filter(img, make_hfc_mask(8, 8, 0.25).cells)
    assert np.max(np.abs(extract_hfc(img, 0.25) - ref)) <= 1e-9


def test_lfc_matches_brute_force_dft():
    img = np.random.default_rng(12).random((8, 8))
    ref = brute_filter(img, make_lfc_mask(8, 8, 0.3).cells)
    assert np.max(np.abs(extract_lfc(img, 0.3) - ref)) <= 1e-9


def test_lfc_extremes():
    img = np.random.default_rng(2).random((3, 8, 8))
    assert np.max(np.abs(extract_lfc(img, 1.0))) == 0.0
    const = np.full((8, 8), 0.3)
    assert np.max(np.abs(extract_lfc(const, 0.0) - const)) <= 1e-9


def test_mask_monotone_in_tau():
    taus = np.linspace(0, 1, 21)
    for h, w in [(8, 8), (7, 10)]:
        zero_sets = [make_hfc_mask(h, w, t).cells == 0 for t in taus]
        for a, b in zip(zero_sets, zero_sets[1:]):
            assert np.all(b[a])


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 6).map(lambda k: 2 * k),
    st.integers(1, 6).map(lambda k: 2 * k),
    st.floats(0, 1),
    st.integers(0, 2**31 - 1),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_hfc_linear_and_parseval(h, w, tau, seed, a, b):
    # even sizes make the centred mask conjugate-symmetric, so the two parts are orthogonal
    rng = np.random.default_rng(seed)
    i1, i2 = rng.standard_normal((h, w)), rng.standard_normal((h, w))
    lhs = extract_hfc(a * i1 + b * i2, tau)
    rhs = a * extract_hfc(i1, tau) + b * extract_hfc(i2, tau)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9
    total = energy(i1)
    parts = energy(extract_hfc(i1, tau)) + energy(hfc_complement(i1, tau))
    assert abs(parts - total) <= 1e-6 * total


def test_prompt_sources():
    img = np.random.default_rng(5).random((3, 8, 8))
    assert not prompt_source(img, "zero").any()
    assert np.array_equal(prompt_source(img, "original"), img)
    assert np.array_equal(prompt_source(img, "hfc", tau=0.25), extract_hfc(img, 0.25))
    assert np.array_equal(prompt_source(img, "lfc", tau=0.25), extract_lfc(img, 0.25))
    with pytest.raises(ConfigError):
        prompt_source(img, "noise_filter")
    with pytest.raises(DomainError):
        prompt_source(img, "gaussian_blur", sigma=0.0)


def test_gaussian_blur_of_delta_is_the_kernel():
    sigma = 1.0
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    out = prompt_source(img, "gaussian_blur", sigma=sigma)
    # direct 2-D kernel evaluation on the same 9x9 support
    r = np.arange(-4, 5)
    k2 = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    k2 /= k2.sum()
    ref = np.zeros_like(img)
    ref[6:15, 6:15] = k2
    assert np.max(np.abs(out - ref)) <= 1e-12
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    continuous = 1.0 / (2 * np.pi * sigma**2)
    renorm = 1.0 / np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / 2.0).sum()
    assert abs(out[10, 10] - continuous * (2 * np.pi * sigma**2) * renorm) <= 1e-6


def test_blur_is_smoother():
    img = np.random.default_rng(9).random((16, 16))
    assert energy(extract_hfc(gaussian_blur(img, 2.0), 0.25)) < energy(extract_hfc(img, 0.25))
