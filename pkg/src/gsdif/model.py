"""Hybrid 2D + 3D feature model for sparse-view attenuation fields.

Forward pass for one projection stack:

1. a shared strided-conv encoder with two upsampling stages yields, per view,
   a deep low-resolution map ``F_t`` and a stride-4 feature map ``F``;
2. every grid position ``u_hat`` is projected into all views, ``F_t`` is
   sampled bilinearly and max-pooled over views, and the Gaussian head turns
   the pooled vector into ``[delta_u | F_g | r | s]``;
3. a query point gets ``concat[Gaussian-field feature, max-pooled F feature]``
   and the attenuation head maps it to a scalar.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import diffcore as dc
from .gaussian_field import GaussianGrid, GaussianSet, activate, query_field
from .geometry import ScanGeometry, project_points
from .projector import ProjectionStack
from .volume import VoxelVolume, sample_trilinear_tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class AllViewsInvalidError(ValueError):
    pass


@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 1
    points_per_sample: int = 10000
    lr0: float = 0.01
    momentum: float = 0.98


@dataclass
class ModelConfig:
    k_views: int = 6
    det_nu: int = 128
    det_nv: int = 128
    C: int = 32
    C_t: int = 128
    C_g: int = 32
    V: int = 8
    k_nearest: int = 3
    enable_gaussians: bool = True
    enc_widths: tuple[int, ...] = (16, 32, 64)
    dec_widths: tuple[int, ...] = (64,)
    atten_hidden: tuple[int, ...] = (64, 64)
    gauss_hidden: tuple[int, ...] = (128,)
    field_half_extent_mm: float = 77.5
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.V < 1 or min(self.C, self.C_t, self.C_g) < 1 or self.training.points_per_sample < 1:
            raise ValueError("invalid model config")
        if self.det_nu % self.stride_t or self.det_nv % self.stride_t:
            raise ValueError(f"detector {self.det_nu}x{self.det_nv} not divisible by encoder stride {self.stride_t}")

    @property
    def stride_t(self) -> int:
        """Detector pixels per pixel of the deepest map."""
        return 2 ** (len(self.enc_widths) + 1)

    @property
    def stride_f(self) -> int:
        """Detector pixels per pixel of the final feature map."""
        return self.stride_t // 2 ** (len(self.dec_widths) + 1)

    @property
    def gaussian_width(self) -> int:
        return 3 + self.C_g + 4 + 3

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f_ in fields(self):
            val = getattr(self, f_.name)
            if f_.name == "training":
                for k, v in asdict(val).items():
                    out[f"training.{k}"] = _fmt(v)
            else:
                out[f"model.{f_.name}"] = _fmt(val)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        kw, tr = {}, {}
        types = {f_.name: f_.type for f_ in fields(cls)}
        ttypes = {f_.name: f_.type for f_ in fields(TrainingConfig)}
        for key, raw in flat.items():
            sect, _, name = key.partition(".")
            if sect == "model" and name in types:
                kw[name] = _parse(raw, types[name])
            elif sect == "training" and name in ttypes:
                tr[name] = _parse(raw, ttypes[name])
        return cls(**kw, training=TrainingConfig(**tr))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, typ):
    typ = str(typ)
    raw = raw.strip()
    if "bool" in typ:
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes", "on")
    if "tuple" in typ:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if "float" in typ:
        return float(raw)
    return int(raw)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=dc.DEFAULT_DTYPE) -> dc.ParamStore:
    """Glorot-uniform weights, zero biases; the Gaussian head output starts at zero."""
    gen = torch.Generator().manual_seed(seed)
    store = dc.ParamStore()
    widths = (*cfg.enc_widths, cfg.C_t)
    c_in = 1
    for i, w in enumerate(widths):
        dc.add_conv(store, f"enc.{i}", c_in, w, gen, dtype)
        c_in = w
    # decoder: upsample, concat the matching encoder stage, conv
    dec_out = (*cfg.dec_widths, cfg.C)
    for j, w in enumerate(dec_out):
        skip = widths[len(widths) - 2 - j]
        dc.add_conv(store, f"dec.{j}", c_in + skip, w, gen, dtype)
        c_in = w
    dc.add_mlp(store, "gauss_head", (cfg.C_t, *cfg.gauss_hidden, cfg.gaussian_width), gen, dtype, zero_last=True)
    dc.add_mlp(store, "atten_head", (cfg.C_g + cfg.C, *cfg.atten_hidden, 1), gen, dtype)
    return store


def normalize_projections(proj: ProjectionStack, dtype=dc.DEFAULT_DTYPE) -> torch.Tensor:
    """Encoder input ``[K, 1, n_v, n_u]`` scaled by the stack maximum."""
    data = torch.as_tensor(proj.data, dtype=torch.float64)
    peak = float(data.max())
    if peak > 0:
        data = data / peak
    return data.unsqueeze(1).to(dtype)


def encode(x: torch.Tensor, params: dc.ParamStore, cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-view features from shared weights: ``(F_t [K, C_t, h_t, w_t], F [K, C, h, w])``."""
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[0] != cfg.k_views or tuple(x.shape[2:]) != (cfg.det_nv, cfg.det_nu):
        raise ValueError(
            f"encoder input {tuple(x.shape)} does not match K={cfg.k_views}, detector {cfg.det_nu}x{cfg.det_nv}"
        )
    skips = []
    h = x
    n_enc = len(cfg.enc_widths) + 1
    for i in range(n_enc):
        h = dc.conv_block_forward(h, params[f"enc.{i}.weight"], params[f"enc.{i}.bias"], stride=2)
        skips.append(h)
    f_t = h
    for j in range(len(cfg.dec_widths) + 1):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.cat([h, skips[n_enc - 2 - j]], dim=1)
        h = dc.conv_block_forward(h, params[f"dec.{j}.weight"], params[f"dec.{j}.bias"], stride=1)
    return f_t, h


def query_pooled(fmaps: torch.Tensor, points: torch.Tensor, geom: ScanGeometry, stride: int) -> torch.Tensor:
    """Project world points into each view, sample ``fmaps`` bilinearly and max-pool over views.

    ``fmaps`` is ``[K, C', h', w']`` at ``stride`` detector pixels per feature
    pixel; ``points`` is ``[N, 3]`` in mm. Returns ``[N, C']``.
    """
    uv, valid = project_points(geom, points.to(torch.float64))
    if not bool(valid.any(0).all()):
        bad = int((~valid.any(0)).nonzero()[0])
        raise AllViewsInvalidError(f"point {points[bad].tolist()} is behind the source in every view")
    coords = (uv / stride).to(fmaps.dtype)
    samples = dc.bilinear_sample(fmaps, coords)
    return dc.max_over_views(samples, valid)


@dataclass
class Forward:
    """Per-stack quantities shared by every point query of one forward pass."""

    cfg: ModelConfig
    geom: ScanGeometry
    params: dc.ParamStore
    f_t: torch.Tensor
    f: torch.Tensor
    gaussians: GaussianSet | None

    @property
    def lo(self) -> torch.Tensor:
        return torch.full((3,), -self.cfg.field_half_extent_mm, dtype=torch.float64)

    def to_unit(self, points: torch.Tensor) -> torch.Tensor:
        """World mm -> unit cube of the reconstruction box."""
        return ((points.to(torch.float64) - self.lo) / (2 * self.cfg.field_half_extent_mm)).to(self.f.dtype)


def field_grid(cfg: ModelConfig) -> GaussianGrid:
    return GaussianGrid(cfg.V)


def u_hat_world(cfg: ModelConfig, grid: GaussianGrid | None = None) -> torch.Tensor:
    grid = grid or field_grid(cfg)
    h = cfg.field_half_extent_mm
    return grid.positions(torch.float64) * (2 * h) - h


def build_gaussians(f_t: torch.Tensor, geom: ScanGeometry, params: dc.ParamStore, cfg: ModelConfig) -> GaussianSet:
    """Gaussian parameters from max-pooled ``F_t`` features at the fixed grid positions."""
    grid = field_grid(cfg)
    pooled = query_pooled(f_t, u_hat_world(cfg, grid), geom, cfg.stride_t)
    raw = dc.mlp_forward(pooled, dc.mlp_layers(params, "gauss_head"))
    return activate(raw, grid, grid.positions(f_t.dtype), cfg.C_g)


def prepare(x: torch.Tensor, geom: ScanGeometry, params: dc.ParamStore, cfg: ModelConfig) -> Forward:
    if geom.n_views != cfg.k_views:
        raise ValueError(f"geometry has K={geom.n_views} views but the model expects K={cfg.k_views}")
    f_t, f = encode(x, params, cfg)
    gs = build_gaussians(f_t, geom, params, cfg) if cfg.enable_gaussians else None
    return Forward(cfg, geom, params, f_t, f, gs)


def predict_points(fw: Forward, points: torch.Tensor) -> torch.Tensor:
    """Attenuation at ``[N, 3]`` world points -> ``[N]``."""
    cfg = fw.cfg
    feat_2d = query_pooled(fw.f, points, fw.geom, cfg.stride_f)
    if fw.gaussians is not None:
        feat_3d = query_field(fw.to_unit(points), fw.gaussians, cfg.k_nearest)
    else:
        feat_3d = torch.zeros(points.shape[0], cfg.C_g, dtype=feat_2d.dtype)
    hybrid = torch.cat([feat_3d, feat_2d], dim=-1)
    return dc.mlp_forward(hybrid, dc.mlp_layers(fw.params, "atten_head")).squeeze(-1)


def predict_point(p, fw: Forward) -> torch.Tensor:
    pts = torch.as_tensor(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return predict_points(fw, pts)[0]


def sample_points(vol: VoxelVolume, n: int = 10000, rng: np.random.Generator | int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Uniform points over the voxel-centre box with trilinear ground truth."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    lo, hi = vol.bounds()
    pts = lo + (hi - lo) * rng.random((n, 3))
    vals = sample_trilinear_tensor(vol, torch.as_tensor(pts)).numpy()
    return pts, vals


@dataclass
class TrainResult:
    params: dc.ParamStore
    loss_log: list[tuple[int, float, float]]  # (epoch, lr, mean mse)


def _check_dataset(dataset, cfg: ModelConfig) -> ScanGeometry:
    if not dataset:
        raise ValueError("dataset is empty")
    geom = dataset[0][1].geometry
    for _, proj in dataset:
        if proj.geometry.to_dict() != geom.to_dict():
            raise ValueError("all projection stacks must share one geometry")
    if geom.n_views != cfg.k_views or geom.det_shape != (cfg.det_nu, cfg.det_nv):
        raise ValueError(
            f"dataset geometry K={geom.n_views}, detector {geom.det_shape} does not match "
            f"model K={cfg.k_views}, detector {(cfg.det_nu, cfg.det_nv)}"
        )
    return geom


def train(
    dataset: Sequence[tuple[VoxelVolume, ProjectionStack]],
    cfg: ModelConfig,
    seed: int = 0,
    params: dc.ParamStore | None = None,
    dtype=dc.DEFAULT_DTYPE,
) -> TrainResult:
    """Point-wise MSE training with heavy-ball SGD and per-epoch exponential decay.

    Samples are visited in a freshly shuffled order each epoch; each one
    contributes one optimizer step (``batch_size`` stacks accumulate gradients
    before a step).
    """
    geom = _check_dataset(dataset, cfg)
    tc = cfg.training
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(cfg, seed, dtype)
    inputs = [normalize_projections(p, dtype) for _, p in dataset]
    log_rows = []
    names = list(params)
    for epoch in range(tc.epochs):
        lr = dc.lr_at_epoch(tc.lr0, epoch, tc.epochs)
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start:start + tc.batch_size]
            for i in batch:
                pts, gt = sample_points(dataset[i][0], tc.points_per_sample, rng)
                fw = prepare(inputs[i], geom, params, cfg)
                pred = predict_points(fw, torch.as_tensor(pts))
                loss = torch.mean((pred - torch.as_tensor(gt, dtype=pred.dtype)) ** 2)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}, sample {i}")
                dc.backward(loss / len(batch))
                total += float(loss.detach())
            params.fill_missing_grads(names)
            dc.sgd_momentum_step(params, lr, tc.momentum)
        mse = total / len(dataset)
        log_rows.append((epoch, lr, mse))
        log.info("epoch %d lr %.6g mse %.6g", epoch, lr, mse)
    return TrainResult(params, log_rows)


@torch.no_grad()
def reconstruct(
    params: dc.ParamStore,
    proj: ProjectionStack,
    cfg: ModelConfig,
    out_dims=(32, 32, 32),
    out_spacing=5.0,
    chunk: int = 8192,
) -> VoxelVolume:
    """Predict every voxel centre of a centred output grid, clamped to [0, 1]."""
    nx, ny, nz = (int(n) for n in np.broadcast_to(out_dims, (3,)))
    vol = VoxelVolume.centered(np.zeros((nz, ny, nx), dtype=np.float32), out_spacing)
    fw = prepare(normalize_projections(proj, params.dtype), proj.geometry, params, cfg)
    pts = torch.as_tensor(vol.voxel_centers())
    out = torch.cat([predict_points(fw, pts[s:s + chunk]) for s in range(0, len(pts), chunk)])
    data = out.clamp(0.0, 1.0).to(torch.float64).numpy().reshape(nz, ny, nx)
    return vol.with_data(data)
