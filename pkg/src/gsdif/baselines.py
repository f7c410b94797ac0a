"""Classical reconstructions: SART and a simplified FDK.

The FDK here has no Parker weighting, so it is only an approximation of the
short-scan algorithm over 180 degrees. It is kept for context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import bilinear_sample
from .geometry import ScanGeometry, project_points
from .model import DivergenceError
from .projector import ProjectionStack, back_project, forward_project
from .volume import VoxelVolume

SART_SAMPLES = 256


@dataclass(frozen=True)
class SartConfig:
    iterations: int = 30
    relaxation: float = 0.5
    n_r: int = SART_SAMPLES

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.relaxation < 2:
            raise ValueError("relaxation must lie in (0, 2)")


def _empty(out_dims, out_spacing) -> VoxelVolume:
    nx, ny, nz = (int(n) for n in np.broadcast_to(out_dims, (3,)))
    return VoxelVolume.centered(np.zeros((nz, ny, nx), dtype=np.float32), out_spacing)


def _check(proj: ProjectionStack, geom: ScanGeometry):
    if proj.geometry.to_dict() != geom.to_dict():
        raise ValueError("projection stack geometry differs from the requested geometry")


class Sart:
    """View-by-view SART with a matched projector/backprojector pair.

    Exposes the per-view update so callers can start from any volume and
    monitor residuals between iterations.
    """

    def __init__(self, proj: ProjectionStack, geom: ScanGeometry, grid: VoxelVolume, cfg: SartConfig):
        _check(proj, geom)
        self.proj, self.geom, self.grid, self.cfg = proj, geom, grid, cfg
        ones = np.ones(grid.data.shape)
        self.row_sums = [forward_project(grid, geom, k, cfg.n_r, ones) for k in range(geom.n_views)]
        self.col_sums = [back_project(np.ones_like(r), grid, geom, k, cfg.n_r) for k, r in enumerate(self.row_sums)]
        meas = proj.data.astype(np.float64)
        ratios = [m[r > 0] / r[r > 0] for m, r in zip(meas, self.row_sums)]
        self.scale = max([float(np.abs(q).max()) for q in ratios if q.size] + [1e-12])

    def residuals(self, x: np.ndarray) -> list[np.ndarray]:
        return [self.proj.data[k].astype(np.float64) - forward_project(self.grid, self.geom, k, self.cfg.n_r, x)
                for k in range(self.geom.n_views)]

    def residual_norm(self, x: np.ndarray) -> float:
        return float(math.sqrt(sum(float((r**2).sum()) for r in self.residuals(x))))

    def iterate(self, x: np.ndarray) -> np.ndarray:
        x = x.copy()
        lam = self.cfg.relaxation
        for k in range(self.geom.n_views):
            rs, cs = self.row_sums[k], self.col_sums[k]
            resid = self.proj.data[k].astype(np.float64) - forward_project(self.grid, self.geom, k, self.cfg.n_r, x)
            corr = np.divide(resid, rs, out=np.zeros_like(resid), where=rs > 1e-12)
            upd = back_project(corr, self.grid, self.geom, k, self.cfg.n_r)
            x += lam * np.divide(upd, cs, out=np.zeros_like(upd), where=cs > 1e-12)
        np.maximum(x, 0.0, out=x)
        if not np.isfinite(x).all() or np.abs(x).max() > 1e3 * self.scale:
            raise DivergenceError("SART estimate exceeded 1e3 x the projection-implied attenuation scale")
        return x


def sart_reconstruct(proj: ProjectionStack, geom: ScanGeometry, out_dims=(32, 32, 32), out_spacing=5.0,
                     cfg: SartConfig = SartConfig(), x0: np.ndarray | None = None) -> VoxelVolume:
    grid = _empty(out_dims, out_spacing)
    solver = Sart(proj, geom, grid, cfg)
    x = np.zeros(grid.data.shape) if x0 is None else np.asarray(x0, dtype=np.float64)
    for _ in range(cfg.iterations):
        x = solver.iterate(x)
    return grid.with_data(x)


def ramp_filter_rows(img: np.ndarray, spacing: float) -> np.ndarray:
    """Row-wise ramp filter ``|f|`` (cycles/mm), band-limited at Nyquist, zero-padded to avoid wrap."""
    n = img.shape[-1]
    n_pad = 1 << int(math.ceil(math.log2(2 * n)))
    freqs = np.abs(np.fft.rfftfreq(n_pad, d=spacing))
    spec = np.fft.rfft(img, n=n_pad, axis=-1) * freqs
    return np.fft.irfft(spec, n=n_pad, axis=-1)[..., :n]


def fdk_reconstruct(proj: ProjectionStack, geom: ScanGeometry, out_dims=(32, 32, 32), out_spacing=5.0) -> VoxelVolume:
    """Cosine weighting, ramp filtering at the isocenter plane, distance-weighted backprojection."""
    _check(proj, geom)
    grid = _empty(out_dims, out_spacing)
    n_u, n_v = geom.det_shape
    mag = geom.sid / geom.sdd
    du = geom.det_spacing * mag
    uc, vc = geom.det_center
    a = (np.arange(n_u) - uc) * du
    b = (np.arange(n_v) - vc) * du
    cosw = geom.sid / np.sqrt(geom.sid**2 + a[None, :] ** 2 + b[:, None] ** 2)
    filtered = ramp_filter_rows(proj.data.astype(np.float64) * cosw, du)

    pts = torch.as_tensor(grid.voxel_centers())
    uv, valid = project_points(geom, pts)
    st = geom.stacked()
    depth = geom.sid + pts @ torch.as_tensor(np.cross(st["v_axis"], st["u_axis"])).T  # [N, K]
    vals = bilinear_sample(torch.as_tensor(filtered).unsqueeze(1), uv)[..., 0]  # [K, N]
    weight = (geom.sid / depth.T) ** 2
    recon = (vals * weight * valid).sum(0) * (math.pi / geom.n_views)
    return grid.with_data(recon.numpy().reshape(grid.data.shape))
