"""Voxel volumes, ellipsoid phantoms, trilinear sampling and PSNR/SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

PSNR_CAP_DB = 100.0


class VolumeError(ValueError):
    pass


class ShapeMismatchError(VolumeError):
    pass


@dataclass(frozen=True)
class VoxelVolume:
    """Regular attenuation grid.

    ``data`` is stored as float32 with array shape ``(n_z, n_y, n_x)`` so a
    C-order flatten runs x fastest. ``origin`` is the world position (mm) of
    the centre of voxel (0, 0, 0).
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(not s > 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @classmethod
    def centered(cls, data: np.ndarray, spacing) -> "VoxelVolume":
        """Volume whose voxel-centre box is centred on the isocenter."""
        spacing = tuple(float(s) for s in np.broadcast_to(spacing, (3,)))
        nz, ny, nx = data.shape
        origin = tuple(-0.5 * (n - 1) * s for n, s in zip((nx, ny, nz), spacing))
        return cls(np.ascontiguousarray(data, dtype=np.float32), spacing, origin)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World box spanned by the voxel centres (lo, hi)."""
        lo = np.array(self.origin, dtype=np.float64)
        hi = lo + (np.array(self.dims) - 1) * np.array(self.spacing)
        return lo, hi

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel centre, ``[N, 3]`` in storage order."""
        nx, ny, nz = self.dims
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, (nx, ny, nz))]
        z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    def with_data(self, data: np.ndarray) -> "VoxelVolume":
        return VoxelVolume(np.ascontiguousarray(data, dtype=np.float32), self.spacing, self.origin)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    z_rotation: float = 0.0
    value: float = 1.0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.asarray(pts, dtype=np.float64) - np.asarray(self.center)
        c, s = math.cos(self.z_rotation), math.sin(self.z_rotation)
        # rotate into the ellipsoid frame (inverse z rotation)
        x = c * d[..., 0] + s * d[..., 1]
        y = -s * d[..., 0] + c * d[..., 1]
        a, b, cz = self.semi_axes
        return (x / a) ** 2 + (y / b) ** 2 + (d[..., 2] / cz) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    ellipsoids: tuple[Ellipsoid, ...] = field(default_factory=tuple)

    def rotated(self, angle: float) -> "PhantomSpec":
        """The same phantom rotated by ``angle`` about the z axis."""
        c, s = math.cos(angle), math.sin(angle)
        out = []
        for e in self.ellipsoids:
            x, y, z = e.center
            out.append(Ellipsoid((c * x - s * y, s * x + c * y, z), e.semi_axes, e.z_rotation + angle, e.value))
        return PhantomSpec(tuple(out))

    def to_json(self) -> list[dict]:
        return [
            {"center": list(e.center), "semi_axes": list(e.semi_axes), "z_rotation": e.z_rotation, "value": e.value}
            for e in self.ellipsoids
        ]

    @classmethod
    def from_json(cls, items: list[dict]) -> "PhantomSpec":
        return cls(
            tuple(
                Ellipsoid(
                    tuple(float(v) for v in it["center"]),
                    tuple(float(v) for v in it["semi_axes"]),
                    float(it.get("z_rotation", 0.0)),
                    float(it.get("value", 1.0)),
                )
                for it in items
            )
        )


def generate_phantom(spec: PhantomSpec, dims=(32, 32, 32), spacing=5.0) -> VoxelVolume:
    """Rasterise ellipsoids at voxel centres, summing values and clamping to [0, 1]."""
    dims = tuple(int(n) for n in np.broadcast_to(dims, (3,)))
    if min(dims) < 8:
        raise VolumeError(f"phantom dims must be >= 8 per axis, got {dims}")
    for e in spec.ellipsoids:
        if min(e.semi_axes) <= 0:
            raise VolumeError(f"ellipsoid semi-axes must be positive, got {e.semi_axes}")
    nx, ny, nz = dims
    vol = VoxelVolume.centered(np.zeros((nz, ny, nx), dtype=np.float32), spacing)
    pts = vol.voxel_centers()
    acc = np.zeros(len(pts), dtype=np.float64)
    for e in spec.ellipsoids:
        acc += np.where(e.contains(pts), e.value, 0.0)
    return vol.with_data(np.clip(acc, 0.0, 1.0).reshape(nz, ny, nx))


def random_phantom_spec(rng: np.random.Generator, half_extent: float = 77.5) -> PhantomSpec:
    """Torso-like random phantom: body, two low-density lobes, a dense core and nodules.

    All sizes scale with ``half_extent`` (half the voxel-centre box width).
    """
    h = half_extent
    u = rng.uniform
    body = Ellipsoid(
        (u(-0.05, 0.05) * h, u(-0.05, 0.05) * h, 0.0),
        (u(0.75, 0.9) * h, u(0.6, 0.78) * h, u(0.8, 0.95) * h),
        u(-0.3, 0.3),
        u(0.35, 0.45),
    )
    ells = [body]
    bx, by, _ = body.center
    for side in (-1.0, 1.0):
        ells.append(
            Ellipsoid(
                (bx + side * u(0.3, 0.4) * h, by + u(-0.1, 0.1) * h, u(-0.1, 0.1) * h),
                (u(0.2, 0.3) * h, u(0.3, 0.42) * h, u(0.45, 0.65) * h),
                u(-0.4, 0.4),
                -u(0.2, 0.28),
            )
        )
    ells.append(
        Ellipsoid(
            (bx + u(-0.08, 0.08) * h, by + u(0.15, 0.35) * h, 0.0),
            (u(0.08, 0.14) * h, u(0.08, 0.14) * h, u(0.6, 0.9) * h),
            0.0,
            u(0.35, 0.5),
        )
    )
    for _ in range(int(rng.integers(2, 5))):
        r = u(0.06, 0.14) * h
        ells.append(
            Ellipsoid(
                (u(-0.5, 0.5) * h, u(-0.45, 0.45) * h, u(-0.6, 0.6) * h),
                (r * u(0.7, 1.3), r * u(0.7, 1.3), r * u(0.7, 1.3)),
                u(0, math.pi),
                u(0.15, 0.4),
            )
        )
    return PhantomSpec(tuple(ells))


def sphere_spec(radius: float, value: float = 1.0, center=(0.0, 0.0, 0.0)) -> PhantomSpec:
    return PhantomSpec((Ellipsoid(tuple(center), (radius, radius, radius), 0.0, value),))


def sample_trilinear_tensor(vol: VoxelVolume, pts: torch.Tensor, data: torch.Tensor | None = None) -> torch.Tensor:
    """Trilinear interpolation at ``[..., 3]`` world points; zero outside the voxel-centre box.

    ``data`` overrides the volume values with a ``(n_z, n_y, n_x)`` tensor of
    the same grid; gradients flow into it (used by the matched SART operator).
    """
    dt = pts.dtype
    if data is None:
        data = torch.as_tensor(vol.data).to(dt)
    nx, ny, nz = vol.dims
    origin = torch.tensor(vol.origin, dtype=dt)
    spacing = torch.tensor(vol.spacing, dtype=dt)
    t = (pts - origin) / spacing
    upper = torch.tensor([nx - 1, ny - 1, nz - 1], dtype=dt)
    inside = ((t >= 0) & (t <= upper)).all(dim=-1)
    i0 = torch.minimum(torch.floor(t), upper - 1).clamp(min=0)
    f = t - i0
    i0 = i0.long()
    ix, iy, iz = i0[..., 0].clamp(0, nx - 2), i0[..., 1].clamp(0, ny - 2), i0[..., 2].clamp(0, nz - 2)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    flat = data.reshape(-1)

    def at(dz, dy, dx):
        return flat[((iz + dz) * ny + (iy + dy)) * nx + (ix + dx)]

    c00 = at(0, 0, 0) * (1 - fx) + at(0, 0, 1) * fx
    c01 = at(0, 1, 0) * (1 - fx) + at(0, 1, 1) * fx
    c10 = at(1, 0, 0) * (1 - fx) + at(1, 0, 1) * fx
    c11 = at(1, 1, 0) * (1 - fx) + at(1, 1, 1) * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    return torch.where(inside, out, torch.zeros_like(out))


def sample_trilinear(vol: VoxelVolume, p) -> float:
    pts = torch.as_tensor(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return float(sample_trilinear_tensor(vol, pts)[0])


def _check_same(a: VoxelVolume, b: VoxelVolume):
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"volume shapes differ: {a.dims} vs {b.dims}")


def psnr(a: VoxelVolume, b: VoxelVolume, data_range: float = 1.0) -> float:
    _check_same(a, b)
    if not data_range > 0:
        raise VolumeError("data_range must be positive")
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable valid-mode filtering over the last two axes
    w = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, w, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, w, axis=-2) @ g


def ssim(a: VoxelVolume, b: VoxelVolume, data_range: float = 1.0, win: int = 11, sigma: float = 1.5) -> float:
    """Mean 2D SSIM over axial slices (valid-mode Gaussian window)."""
    _check_same(a, b)
    nz, ny, nx = a.data.shape
    if ny < win or nx < win:
        raise VolumeError(f"axial slices must be at least {win}x{win}, got {nx}x{ny}")
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    if np.array_equal(x, y):
        return 1.0
    g = gaussian_window(win, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean())
