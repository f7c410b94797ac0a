"""Discrete ray attenuation integral and DRR synthesis.

A ray ``R(lam) = p_s + lam * (p_d - p_s)`` is integrated with the uniform
``N_r + 1`` point rule

    e(R) ~= |p_d - p_s| * (1 / N_r) * sum_{i=0..N_r} mu(p_s + (i / N_r) (p_d - p_s))

Both end points are included, so the rule overshoots a constant field by the
factor ``(N_r + 1) / N_r``. That is intended.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import _kernels
from .geometry import Ray, ScanGeometry, view_rays
from .volume import VoxelVolume

DRR_SAMPLES = 512


@dataclass(frozen=True)
class ProjectionStack:
    """``data`` has shape ``(K, n_v, n_u)``; a C-order flatten runs u fastest."""

    geometry: ScanGeometry
    data: np.ndarray

    def __post_init__(self):
        n_u, n_v = self.geometry.det_shape
        want = (self.geometry.n_views, n_v, n_u)
        if self.data.shape != want:
            raise ValueError(f"projection data shape {self.data.shape} does not match geometry {want}")


def line_integral(mu: Callable[[np.ndarray], np.ndarray], ray: Ray, n_r: int) -> float:
    """Integrate ``mu`` (called on an ``[n_r + 1, 3]`` array) along ``ray``."""
    if n_r < 1:
        raise ValueError("n_r must be >= 1")
    lam = np.arange(n_r + 1, dtype=np.float64) / n_r
    pts = ray.p_s[None, :] + lam[:, None] * (ray.p_d - ray.p_s)[None, :]
    vals = np.asarray(mu(pts), dtype=np.float64)
    return ray.length * float(vals.sum()) / n_r


def active_sample_range(geom: ScanGeometry, radius: float, n_r: int) -> tuple[int, int]:
    """Sample indices ``[lo, hi]`` that can land inside a ball of ``radius`` about the isocenter.

    Every ray point at parameter ``lam`` has depth ``lam * sdd`` along the
    principal direction, and points of the ball have depth within
    ``sid +- radius``; samples outside this window sit outside the ball.
    """
    lo = math.floor(n_r * (geom.sid - radius) / geom.sdd) - 1
    hi = math.ceil(n_r * (geom.sid + radius) / geom.sdd) + 1
    return max(lo, 0), min(hi, n_r)


def support_radius(vol: VoxelVolume) -> float:
    lo, hi = vol.bounds()
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    return float(np.linalg.norm(corners, axis=1).max())


def integrate_rays(
    mu: Callable[[torch.Tensor], torch.Tensor],
    p_s: torch.Tensor,
    p_d: torch.Tensor,
    n_r: int,
    sample_range: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Batched ray rule over rays ``p_s [..., 3] -> p_d [..., 3]``.

    ``mu`` maps ``[..., S, 3]`` points to ``[..., S]`` values. With
    ``sample_range=(lo, hi)`` only samples ``lo..hi`` are evaluated; callers
    must guarantee ``mu`` vanishes at all other samples.
    """
    lo, hi = sample_range if sample_range is not None else (0, n_r)
    lam = torch.arange(lo, hi + 1, dtype=p_d.dtype) / n_r
    p_s, p_d = torch.broadcast_tensors(p_s, p_d)
    d = p_d - p_s
    pts = p_s.unsqueeze(-2) + lam[:, None] * d.unsqueeze(-2)
    vals = mu(pts)
    return torch.linalg.vector_norm(d, dim=-1) * vals.sum(-1) / n_r


def _view_pixels(geom: ScanGeometry, k: int) -> tuple[np.ndarray, np.ndarray]:
    src, p_d = view_rays(geom, k)
    return src.numpy(), np.ascontiguousarray(p_d.numpy().reshape(-1, 3))


def forward_project(vol: VoxelVolume, geom: ScanGeometry, k: int, n_r: int = DRR_SAMPLES,
                    data: np.ndarray | None = None) -> np.ndarray:
    """Ray rule applied to the trilinear field of ``vol`` for all pixels of view ``k``.

    Returns a float64 ``(n_v, n_u)`` image. ``data`` substitutes voxel values
    on the same grid.
    """
    if n_r < 1:
        raise ValueError("n_r must be >= 1")
    src, p_d = _view_pixels(geom, k)
    lo, hi = active_sample_range(geom, support_radius(vol), n_r)
    arr = np.ascontiguousarray(vol.data if data is None else data, dtype=np.float64)
    out = _kernels.forward_rays(arr, np.array(vol.origin), np.array(vol.spacing), src, p_d, n_r, lo, hi)
    n_u, n_v = geom.det_shape
    return out.reshape(n_v, n_u)


def back_project(image: np.ndarray, vol: VoxelVolume, geom: ScanGeometry, k: int, n_r: int = DRR_SAMPLES) -> np.ndarray:
    """Adjoint of :func:`forward_project` for view ``k``; returns ``(n_z, n_y, n_x)`` float64."""
    src, p_d = _view_pixels(geom, k)
    lo, hi = active_sample_range(geom, support_radius(vol), n_r)
    vals = np.ascontiguousarray(image, dtype=np.float64).reshape(-1)
    return _kernels.backproject_rays(vals, vol.data.shape, np.array(vol.origin), np.array(vol.spacing),
                                     src, p_d, n_r, lo, hi)


def drr(vol: VoxelVolume, geom: ScanGeometry, n_r: int = DRR_SAMPLES) -> ProjectionStack:
    """Digitally reconstructed radiographs of ``vol`` for every view of ``geom``."""
    views = [forward_project(vol, geom, k, n_r) for k in range(geom.n_views)]
    return ProjectionStack(geom, np.stack(views).astype(np.float32))
