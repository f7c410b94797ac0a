import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsdif.volume import (
    Ellipsoid,
    PhantomSpec,
    ShapeMismatchError,
    VolumeError,
    VoxelVolume,
    generate_phantom,
    psnr,
    sample_trilinear,
    sphere_spec,
    ssim,
)


def random_volume(seed, shape=(9, 10, 11), spacing=(2.0, 3.0, 1.5)):
    rng = np.random.default_rng(seed)
    return VoxelVolume.centered(rng.random(shape).astype(np.float32), spacing)


def trilinear_oracle(vol, p):
    """Scalar reference: explicit 8-corner weights in index space."""
    t = [(p[i] - vol.origin[i]) / vol.spacing[i] for i in range(3)]
    dims = vol.dims
    if any(t[i] < 0 or t[i] > dims[i] - 1 for i in range(3)):
        return 0.0
    base = [min(int(math.floor(t[i])), dims[i] - 2) for i in range(3)]
    frac = [t[i] - base[i] for i in range(3)]
    acc = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (frac[0] if dx else 1 - frac[0]) * (frac[1] if dy else 1 - frac[1]) * (frac[2] if dz else 1 - frac[2])
                acc += w * float(vol.data[base[2] + dz, base[1] + dy, base[0] + dx])
    return acc


def test_sphere_center_value():
    vol = generate_phantom(sphere_spec(10.0, 0.5), (16, 16, 16), 2.0)
    # centred 16^3 grid has no voxel at the origin; the 8 nearest all lie inside the sphere
    nearest = np.argmin(np.linalg.norm(vol.voxel_centers(), axis=1))
    assert vol.data.reshape(-1)[nearest] == np.float32(0.5)


def test_outside_voxels_zero():
    vol = generate_phantom(sphere_spec(10.0, 0.5), (16, 16, 16), 2.0)
    far = np.linalg.norm(vol.voxel_centers(), axis=1) > 10.0
    assert np.all(vol.data.reshape(-1)[far] == 0)


def test_overlap_against_pointwise_oracle():
    a = Ellipsoid((-3.0, 0.0, 1.0), (12.0, 7.0, 9.0), 0.4, 0.3)
    b = Ellipsoid((4.0, 2.0, -1.0), (8.0, 11.0, 6.0), -0.7, 0.4)
    vol = generate_phantom(PhantomSpec((a, b)), (20, 18, 16), 1.5)
    pts = vol.voxel_centers()

    def inside(e, p):
        d = p - np.array(e.center)
        c, s = math.cos(e.z_rotation), math.sin(e.z_rotation)
        x, y = c * d[0] + s * d[1], -s * d[0] + c * d[1]
        return (x / e.semi_axes[0]) ** 2 + (y / e.semi_axes[1]) ** 2 + (d[2] / e.semi_axes[2]) ** 2 <= 1

    expected = np.array([0.3 * inside(a, p) + 0.4 * inside(b, p) for p in pts])
    np.testing.assert_allclose(vol.data.reshape(-1), np.clip(expected, 0, 1), atol=1e-7)
    both = np.array([inside(a, p) and inside(b, p) for p in pts])
    assert both.any()
    np.testing.assert_allclose(vol.data.reshape(-1)[both], 0.7, atol=1e-7)


def test_phantom_clamps_and_validates():
    vol = generate_phantom(PhantomSpec((Ellipsoid((0, 0, 0), (20, 20, 20), 0, 0.8),) * 2), (8, 8, 8), 2.0)
    assert vol.data.max() == 1.0
    with pytest.raises(VolumeError):
        generate_phantom(PhantomSpec((Ellipsoid((0, 0, 0), (1, 0, 1), 0, 1.0),)), (8, 8, 8), 1.0)
    with pytest.raises(VolumeError):
        generate_phantom(sphere_spec(3.0), (8, 8, 7), 1.0)


def test_trilinear_at_voxel_center_and_midpoint():
    vol = random_volume(0)
    pts = vol.voxel_centers()
    flat = vol.data.reshape(-1)
    for i in [0, 7, 123, len(flat) - 1]:
        assert sample_trilinear(vol, pts[i]) == pytest.approx(float(flat[i]), abs=0)
    # neighbours along x
    mid = 0.5 * (pts[40] + pts[41])
    assert sample_trilinear(vol, mid) == pytest.approx(0.5 * (float(flat[40]) + float(flat[41])), abs=1e-7)


def test_trilinear_matches_scalar_oracle():
    vol = random_volume(1)
    lo, hi = vol.bounds()
    rng = np.random.default_rng(2)
    pts = lo + (hi - lo) * rng.random((1000, 3))
    err = max(abs(sample_trilinear(vol, p) - trilinear_oracle(vol, p)) for p in pts)
    assert err < 1e-6


def test_trilinear_out_of_bounds_zero():
    vol = random_volume(3)
    lo, hi = vol.bounds()
    assert sample_trilinear(vol, lo - 1e-6) == 0.0
    assert sample_trilinear(vol, hi + np.array([0, 0, 1e-3])) == 0.0


def test_trilinear_lipschitz():
    vol = random_volume(4)
    flat = vol.data.astype(np.float64)
    max_jump = max(np.abs(np.diff(flat, axis=a)).max() for a in range(3))
    lip = math.sqrt(3) * max_jump / min(vol.spacing)
    lo, hi = vol.bounds()
    rng = np.random.default_rng(5)
    for _ in range(300):
        p = lo + (hi - lo) * rng.random(3)
        delta = rng.normal(size=3) * 0.05
        q = np.clip(p + delta, lo, hi)
        assert abs(sample_trilinear(vol, p) - sample_trilinear(vol, q)) <= lip * np.linalg.norm(q - p) + 1e-7


def test_psnr_values():
    a = random_volume(6)
    assert psnr(a, a) == 100.0
    b = a.with_data(a.data.astype(np.float64) + 0.1)
    assert psnr(a, b, 1.0) == pytest.approx(20.0, abs=1e-5)
    c = a.with_data(a.data.astype(np.float64) + 0.5)
    assert psnr(a, c, 1.0) == pytest.approx(10 * math.log10(4), abs=1e-5)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ShapeMismatchError):
        psnr(a, random_volume(0, (9, 10, 12)))


def test_ssim_identity_and_constant_case():
    a = random_volume(7, (3, 16, 16))
    assert ssim(a, a) == 1.0
    assert ssim(a, a.with_data(a.data * 1.0)) == 1.0
    c1 = VoxelVolume.centered(np.full((2, 16, 16), 0.2, np.float32), 1.0)
    c2 = VoxelVolume.centered(np.full((2, 16, 16), 0.6, np.float32), 1.0)
    C1 = 0.01**2
    lo, hi = np.float64(np.float32(0.2)), np.float64(np.float32(0.6))
    expected = (2 * lo * hi + C1) / (lo**2 + hi**2 + C1)
    assert ssim(c1, c2) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.2401 / 0.4001, abs=1e-7)


def ssim_direct(a, b, data_range=1.0):
    """Slow reference: explicit 11x11 window per output pixel."""
    g1 = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5**2))
    g1 /= g1.sum()
    w = np.outer(g1, g1)
    C1, C2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for x, y in zip(a.data.astype(np.float64), b.data.astype(np.float64)):
        for i in range(x.shape[0] - 10):
            for j in range(x.shape[1] - 10):
                px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * px * px).sum() - mx * mx
                vy = (w * py * py).sum() - my * my
                cxy = (w * px * py).sum() - mx * my
                vals.append(((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx**2 + my**2 + C1) * (vx + vy + C2)))
    return float(np.mean(vals))


def test_ssim_against_direct_window():
    a = random_volume(8, (3, 17, 14))
    b = a.with_data(np.clip(a.data + np.random.default_rng(9).normal(0, 0.2, a.data.shape), 0, 1))
    assert abs(ssim(a, b) - ssim_direct(a, b)) < 1e-6


def test_ssim_errors():
    a = random_volume(1, (2, 10, 16))
    with pytest.raises(VolumeError):
        ssim(a, a.with_data(a.data * 0.5))
    with pytest.raises(ShapeMismatchError):
        ssim(random_volume(1, (2, 16, 16)), random_volume(1, (2, 16, 17)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = VoxelVolume.centered(rng.random((2, 12, 13)).astype(np.float32), 1.0)
    b = a.with_data(rng.random((2, 12, 13)))
    s_ab, s_ba = ssim(a, b), ssim(b, a)
    assert abs(s_ab - s_ba) <= 1e-12
    assert -1.0 <= s_ab <= 1.0
