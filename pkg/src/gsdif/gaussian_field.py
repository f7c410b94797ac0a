"""3D Gaussians used as a feature field.

Each Gaussian carries a position ``u = u_hat + delta_u``, a rotation quaternion
``r = (r1, r2, r3, r4)`` (scalar first), per-axis scales ``s`` and a feature
vector. A point's feature is the weighted sum of the features of its nearest
Gaussians, where "nearest" is measured against the fixed grid positions
``u_hat``. Weights are the normalised Gaussian density, not renormalised.

Coordinates here are unit-agnostic; the model evaluates the field in the
unit cube spanned by its reconstruction box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

INV_SQRT_2PI_CUBED = (2.0 * math.pi) ** -1.5
MIN_COV_DET = 1e-30
MIN_QUAT_NORM = 1e-12


class SingularCovarianceError(ArithmeticError):
    pass


class ZeroQuaternionError(ArithmeticError):
    pass


def init_positions(v: int, lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Centroids of a ``v x v x v`` partition of the box, x fastest."""
    if v < 1:
        raise ValueError(f"grid resolution must be >= 1, got {v}")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("degenerate bounds")
    c = (np.arange(v) + 0.5) / v
    axes = [lo[i] + (hi[i] - lo[i]) * c for i in range(3)]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def normalize_quaternion(r: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(r, dim=-1, keepdim=True)
    if bool((norm < MIN_QUAT_NORM).any()):
        raise ZeroQuaternionError("quaternion norm below 1e-12")
    return r / norm


def rotation_from_quaternion(r) -> torch.Tensor:
    """Rotation matrix ``[..., 3, 3]`` of unit quaternions ``[..., 4]`` (scalar first)."""
    r = torch.as_tensor(r, dtype=torch.float64) if not torch.is_tensor(r) else r
    r1, r2, r3, r4 = r.unbind(-1)
    rows = [
        [1 - 2 * r3**2 - 2 * r4**2, 2 * r2 * r3 - 2 * r1 * r4, 2 * r2 * r4 + 2 * r1 * r3],
        [2 * r2 * r3 + 2 * r1 * r4, 1 - 2 * r2**2 - 2 * r4**2, 2 * r3 * r4 - 2 * r1 * r2],
        [2 * r2 * r4 - 2 * r1 * r3, 2 * r3 * r4 + 2 * r1 * r2, 1 - 2 * r2**2 - 2 * r3**2],
    ]
    return torch.stack([torch.stack(row, dim=-1) for row in rows], dim=-2)


def build_covariance(r, s) -> torch.Tensor:
    """``Sigma = L L^T`` with ``L = M_r M_s``, i.e. ``M_r diag(s^2) M_r^T``."""
    s = torch.as_tensor(s, dtype=torch.float64) if not torch.is_tensor(s) else s
    L = rotation_from_quaternion(r) * s.unsqueeze(-2)
    return L @ L.transpose(-1, -2)


def gaussian_weight(p, u, sigma) -> float:
    """Density of ``N(u, sigma)`` at ``p`` for an explicit covariance matrix."""
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    det = float(np.linalg.det(sigma))
    if det < MIN_COV_DET:
        raise SingularCovarianceError(f"covariance determinant {det} below {MIN_COV_DET}")
    d = p - u
    m = float(d @ np.linalg.solve(sigma, d))
    return INV_SQRT_2PI_CUBED / math.sqrt(det) * math.exp(-0.5 * m)


def gaussian_weights(p: torch.Tensor, u: torch.Tensor, quat: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Batched weights with the closed-form inverse ``M_r M_s^-2 M_r^T``.

    All inputs broadcast over leading axes; ``quat`` must be unit length.
    """
    sdet = scale.prod(-1)
    if bool((sdet * sdet < MIN_COV_DET).any()):
        raise SingularCovarianceError("covariance determinant below 1e-30")
    rot = rotation_from_quaternion(quat)
    local = ((p - u).unsqueeze(-1) * rot).sum(-2)  # M_r^T (p - u)
    maha = ((local / scale) ** 2).sum(-1)
    return INV_SQRT_2PI_CUBED / sdet * torch.exp(-0.5 * maha)


def nearest_k(p, u_hat, k: int) -> np.ndarray:
    """Indices of the ``k`` positions closest to each query, ties to the lower index.

    Exhaustive reference search; ``p`` is ``[3]`` or ``[N, 3]``.
    """
    p_t = torch.as_tensor(np.asarray(p, dtype=np.float64))
    u_t = torch.as_tensor(np.asarray(u_hat, dtype=np.float64))
    if k > len(u_t):
        raise ValueError(f"k={k} exceeds the number of positions {len(u_t)}")
    single = p_t.dim() == 1
    p_t = p_t.reshape(-1, 3)
    d2 = ((p_t[:, None, :] - u_t[None, :, :]) ** 2).sum(-1)
    idx = torch.sort(d2, dim=1, stable=True).indices[:, :k].numpy()
    return idx[0] if single else idx


@dataclass(frozen=True)
class GaussianGrid:
    """Fixed regular grid of initial positions over a box."""

    v: int
    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def n_g(self) -> int:
        return self.v**3

    @property
    def cell(self) -> float:
        """Grid pitch (the smallest axis pitch for non-cubic boxes)."""
        return float(min((h - l) / self.v for l, h in zip(self.lo, self.hi)))

    def positions(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(init_positions(self.v, self.lo, self.hi)).to(dtype)

    def nearest(self, p: torch.Tensor, k: int, u_hat: torch.Tensor | None = None) -> torch.Tensor:
        """Grid-accelerated :func:`nearest_k` for ``[N, 3]`` queries -> ``[N, k]``.

        Squared distance separates over axes, so each of the ``k`` nearest
        centroids has, on every axis, one of the ``k`` nearest slab indices
        or a slab tied with the k-th. At most two slabs share a distance, so
        the ``k + 1`` nearest slabs per axis hold the exact answer for any
        query, inside the box or not.
        """
        if u_hat is None:
            u_hat = self.positions(p.dtype)
        if k > self.n_g:
            raise ValueError(f"k={k} exceeds the number of Gaussians {self.n_g}")
        v = self.v
        w = min(k + 1, v)
        lo = torch.tensor(self.lo, dtype=p.dtype)
        hi = torch.tensor(self.hi, dtype=p.dtype)
        # continuous slab index, centroid j sits at j
        xc = (p - lo) / (hi - lo) * v - 0.5
        start = torch.ceil(xc - 0.5 * w).long().clamp(0, v - w)
        slab = start[:, None, :] + torch.arange(w)[None, :, None]  # [N, w, 3]
        # per-axis centroid coordinates, read from u_hat so values match it bit for bit
        axis_pos = torch.stack([u_hat[:v, 0], u_hat[0:v * v:v, 1], u_hat[0::v * v, 2]], dim=1)
        d = (p[:, None, :] - torch.gather(axis_pos.expand(len(p), v, 3), 1, slab)) ** 2
        dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
        # same summation order as ((p - u) ** 2).sum(-1)
        d2 = ((dx[:, None, None, :] + dy[:, None, :, None]) + dz[:, :, None, None]).reshape(len(p), -1)
        ids = (slab[:, None, None, :, 0] + v * slab[:, None, :, None, 1]
               + v * v * slab[:, :, None, None, 2]).reshape(len(p), -1)
        # candidate ids ascend along the last axis, so a stable sort breaks ties by index
        vals, order = torch.topk(d2, k, dim=1, largest=False, sorted=True)
        tied = (d2 <= vals[:, -1:]).sum(1) > k
        if k > 1:
            tied |= (vals[:, 1:] == vals[:, :-1]).any(1)
        if bool(tied.any()):
            order[tied] = torch.sort(d2[tied], dim=1, stable=True).indices[:, :k]
        return torch.gather(ids, 1, order)


@dataclass
class GaussianSet:
    """Activated Gaussians: ``u_hat, delta_u [N_g, 3]``, ``feat [N_g, C_g]``, ``quat [N_g, 4]``, ``scale [N_g, 3]``."""

    grid: GaussianGrid
    u_hat: torch.Tensor
    delta_u: torch.Tensor
    feat: torch.Tensor
    quat: torch.Tensor
    scale: torch.Tensor

    @property
    def n_g(self) -> int:
        return self.u_hat.shape[0]

    @property
    def positions(self) -> torch.Tensor:
        return self.u_hat + self.delta_u

    def scale_bounds(self) -> tuple[float, float]:
        return scale_bounds(self.grid.cell)


def scale_bounds(cell: float) -> tuple[float, float]:
    return 1e-3 * cell, 4.0 * cell


def activate(raw: torch.Tensor, grid: GaussianGrid, u_hat: torch.Tensor, c_g: int) -> GaussianSet:
    """Split ``raw [N_g, 3 + C_g + 4 + 3]`` into ``[delta_u | feat | r | s]`` and constrain each part.

    ``delta_u = tanh(.) * cell / 2``, ``r = normalize(. + (1, 0, 0, 0))``,
    ``s = s_min + (s_max - s_min) * sigmoid(.)``.
    """
    want = 3 + c_g + 4 + 3
    if raw.shape[-1] != want:
        raise ValueError(f"Gaussian head width {raw.shape[-1]} != 3 + {c_g} + 4 + 3")
    d_raw, feat, r_raw, s_raw = torch.split(raw, [3, c_g, 4, 3], dim=-1)
    cell = grid.cell
    s_min, s_max = scale_bounds(cell)
    identity = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=raw.dtype)
    return GaussianSet(
        grid=grid,
        u_hat=u_hat,
        delta_u=torch.tanh(d_raw) * (0.5 * cell),
        feat=feat,
        quat=normalize_quaternion(r_raw + identity),
        scale=s_min + (s_max - s_min) * torch.sigmoid(s_raw),
    )


def query_field(p: torch.Tensor, gs: GaussianSet, k: int = 3) -> torch.Tensor:
    """Feature ``sum_i w(p, G_i) F_i`` over the ``k`` nearest Gaussians; ``[N, 3] -> [N, C_g]``."""
    idx = gs.grid.nearest(p, k, gs.u_hat)
    u = gs.u_hat[idx] + gs.delta_u[idx]
    w = gaussian_weights(p.unsqueeze(1), u, gs.quat[idx], gs.scale[idx])
    return (w.unsqueeze(-1) * gs.feat[idx]).sum(1)
