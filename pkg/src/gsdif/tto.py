"""Test-time optimisation: fine-tune a trained model on one projection stack.

The model is rendered through the ray rule of :mod:`gsdif.projector` and the
squared difference to the measured detector values is minimised with the same
heavy-ball SGD used in training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import diffcore as dc
from .geometry import Ray, ScanGeometry, view_rays
from .model import DivergenceError, Forward, ModelConfig, normalize_projections, predict_points, prepare
from .projector import ProjectionStack, active_sample_range, integrate_rays

log = logging.getLogger(__name__)

TTO_SAMPLES = 192


@dataclass(frozen=True)
class RaySample:
    ray: Ray
    view: int
    pixel: tuple[int, int]
    e_true: float


@dataclass(frozen=True)
class RayBatch:
    """Struct-of-arrays form of a list of :class:`RaySample`."""

    views: np.ndarray  # [R]
    pixels: np.ndarray  # [R, 2] (u, v)
    p_s: np.ndarray  # [R, 3]
    p_d: np.ndarray  # [R, 3]
    e_true: np.ndarray  # [R]

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, i: int) -> RaySample:
        return RaySample(Ray(self.p_s[i], self.p_d[i]), int(self.views[i]),
                         (int(self.pixels[i, 0]), int(self.pixels[i, 1])), float(self.e_true[i]))


def _rays_for(proj: ProjectionStack, flat_ids: np.ndarray) -> RayBatch:
    geom = proj.geometry
    n_u, n_v = geom.det_shape
    views = flat_ids // (n_u * n_v)
    rem = flat_ids % (n_u * n_v)
    vs, us = rem // n_u, rem % n_u
    p_s = np.empty((len(flat_ids), 3))
    p_d = np.empty((len(flat_ids), 3))
    for k in np.unique(views):
        src, det = view_rays(geom, int(k))
        sel = views == k
        p_s[sel] = src.numpy()
        p_d[sel] = det.numpy()[vs[sel], us[sel]]
    e = proj.data[views, vs, us].astype(np.float64)
    return RayBatch(views, np.stack([us, vs], axis=1), p_s, p_d, e)


def sample_rays(proj: ProjectionStack, n: int, rng: np.random.Generator | int = 0) -> RayBatch:
    """``n`` detector pixels drawn uniformly without replacement over all views."""
    n_u, n_v = proj.geometry.det_shape
    total = proj.geometry.n_views * n_u * n_v
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > total:
        raise ValueError(f"cannot draw {n} rays from {total} pixels")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return _rays_for(proj, np.sort(rng.choice(total, size=n, replace=False)))


def all_rays(proj: ProjectionStack) -> RayBatch:
    n_u, n_v = proj.geometry.det_shape
    return _rays_for(proj, np.arange(proj.geometry.n_views * n_u * n_v))


def render_rays(fw: Forward, p_s: torch.Tensor, p_d: torch.Tensor, n_r: int = TTO_SAMPLES,
                clip_to_box: bool = True) -> torch.Tensor:
    """Model-rendered accumulated attenuation for rays ``[R, 3] -> [R, 3]``.

    With ``clip_to_box`` the field is zero outside the reconstruction box (as
    the voxel phantoms are), and only samples that can reach the box are
    evaluated. Without it every one of the ``n_r + 1`` samples queries the model.
    """
    h = fw.cfg.field_half_extent_mm
    dtype = fw.f.dtype

    if not clip_to_box:
        def mu(pts):
            return predict_points(fw, pts.reshape(-1, 3)).reshape(pts.shape[:-1])
        return integrate_rays(mu, p_s, p_d, n_r).to(dtype)

    def mu_clipped(pts):
        flat = pts.reshape(-1, 3)
        inside = (flat.abs() <= h).all(-1)
        out = torch.zeros(flat.shape[0], dtype=dtype)
        if bool(inside.any()):
            out = out.index_put((inside.nonzero().squeeze(1),), predict_points(fw, flat[inside]))
        return out.reshape(pts.shape[:-1])

    rng = active_sample_range(fw.geom, h * math.sqrt(3.0), n_r)
    return integrate_rays(mu_clipped, p_s, p_d, n_r, rng).to(dtype)


def render_ray(params: dc.ParamStore, proj: ProjectionStack, ray: Ray, cfg: ModelConfig,
               n_r: int = TTO_SAMPLES, clip_to_box: bool = True) -> torch.Tensor:
    fw = prepare(normalize_projections(proj, params.dtype), proj.geometry, params, cfg)
    return render_rays(fw, torch.as_tensor(ray.p_s).unsqueeze(0), torch.as_tensor(ray.p_d).unsqueeze(0),
                       n_r, clip_to_box)[0]


def projection_loss(fw: Forward, rays: RayBatch, n_r: int = TTO_SAMPLES, clip_to_box: bool = True,
                    chunk: int | None = None) -> torch.Tensor:
    """Mean squared difference between rendered and measured ray values."""
    p_s = torch.as_tensor(rays.p_s)
    p_d = torch.as_tensor(rays.p_d)
    e = torch.as_tensor(rays.e_true)
    chunk = chunk or len(rays)
    total = 0
    for s in range(0, len(rays), chunk):
        est = render_rays(fw, p_s[s:s + chunk], p_d[s:s + chunk], n_r, clip_to_box).to(torch.float64)
        total = total + ((est - e[s:s + chunk]) ** 2).sum()
    return total / len(rays)


@dataclass
class TTOConfig:
    steps: int = 100
    lr: float | None = None  # None: 0.1 x the final training learning rate
    rays_per_step: int = 256
    n_r: int = TTO_SAMPLES
    momentum: float = 0.98
    clip_to_box: bool = True

    def resolved_lr(self, cfg: ModelConfig) -> float:
        if self.lr is not None:
            return self.lr
        tc = cfg.training
        return 0.1 * dc.lr_at_epoch(tc.lr0, max(tc.epochs - 1, 0), max(tc.epochs, 1))


def tto_finetune(params: dc.ParamStore, proj: ProjectionStack, cfg: ModelConfig, tto: TTOConfig = TTOConfig(),
                 seed: int = 0) -> tuple[dc.ParamStore, list[tuple[int, float]]]:
    """Fine-tune a copy of ``params`` on ``proj``; returns it with the per-step loss log."""
    if tto.steps < 0:
        raise ValueError("steps must be >= 0")
    tuned = params.clone()
    for m in tuned.momentum.values():
        m.zero_()
    lr = tto.resolved_lr(cfg)
    rng = np.random.default_rng(seed)
    x = normalize_projections(proj, tuned.dtype)
    losses = []
    for step in range(tto.steps):
        rays = sample_rays(proj, tto.rays_per_step, rng)
        fw = prepare(x, proj.geometry, tuned, cfg)
        loss = projection_loss(fw, rays, tto.n_r, tto.clip_to_box)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite projection loss at TTO step {step}")
        dc.backward(loss)
        tuned.fill_missing_grads()
        dc.sgd_momentum_step(tuned, lr, tto.momentum)
        losses.append((step, float(loss.detach())))
        log.debug("tto step %d loss %.6g", step, losses[-1][1])
    return tuned, losses
