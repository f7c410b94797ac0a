"""Circular cone-beam acquisition geometry.

World convention: isocenter at the origin, rotation axis = +z, and view angle 0
puts the source on +x. The detector raster runs u along the tangential
direction and v along +z; pixel (0, 0) is the corner pixel at the most
negative u and v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

#: Minimum perspective depth (mm) in front of the source.
BEHIND_SOURCE_EPS = 1e-9


class GeometryError(ValueError):
    """Invalid acquisition parameters or an impossible projection."""


class BehindSourceError(GeometryError):
    """The point lies on or behind the plane through the source."""


@dataclass(frozen=True)
class ViewPose:
    angle: float
    source_pos: np.ndarray
    detector_origin: np.ndarray
    detector_u_axis: np.ndarray
    detector_v_axis: np.ndarray


@dataclass(frozen=True)
class Ray:
    p_s: np.ndarray
    p_d: np.ndarray

    def at(self, lam: float) -> np.ndarray:
        return self.p_s + lam * (self.p_d - self.p_s)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p_d - self.p_s))


@dataclass(frozen=True)
class ScanGeometry:
    n_views: int
    sid: float
    sdd: float
    det_shape: tuple[int, int]
    det_spacing: float
    poses: tuple[ViewPose, ...]

    @property
    def angles(self) -> np.ndarray:
        return np.array([p.angle for p in self.poses])

    @property
    def det_center(self) -> tuple[float, float]:
        """Continuous pixel coordinate hit by the principal ray."""
        return ((self.det_shape[0] - 1) / 2.0, (self.det_shape[1] - 1) / 2.0)

    def to_dict(self) -> dict:
        return {
            "n_views": self.n_views,
            "sid_mm": self.sid,
            "sdd_mm": self.sdd,
            "det_nu": self.det_shape[0],
            "det_nv": self.det_shape[1],
            "det_spacing_mm": self.det_spacing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return make_circular_geometry(
            int(d["n_views"]),
            float(d["sid_mm"]),
            float(d["sdd_mm"]),
            (int(d["det_nu"]), int(d["det_nv"])),
            float(d["det_spacing_mm"]),
        )

    def stacked(self) -> dict[str, np.ndarray]:
        """Per-view pose vectors stacked into ``[K, 3]`` float64 arrays."""
        return {
            "source": np.stack([p.source_pos for p in self.poses]),
            "origin": np.stack([p.detector_origin for p in self.poses]),
            "u_axis": np.stack([p.detector_u_axis for p in self.poses]),
            "v_axis": np.stack([p.detector_v_axis for p in self.poses]),
        }


def make_circular_geometry(
    k_views: int = 6,
    sid: float = 1000.0,
    sdd: float = 1500.0,
    det_shape: tuple[int, int] = (128, 128),
    det_spacing: float = 3.0,
) -> ScanGeometry:
    """Build K views uniformly covering 180 degrees, endpoint excluded.

    View ``k`` sits at angle ``k * pi / K``. The flat detector is orthogonal to
    the principal ray, ``sdd`` mm from the source and centred on the ray.
    """
    if k_views < 1:
        raise GeometryError(f"k_views must be >= 1, got {k_views}")
    if not (0 < sid < sdd):
        raise GeometryError(f"need 0 < sid < sdd, got sid={sid}, sdd={sdd}")
    n_u, n_v = (int(n) for n in det_shape)
    if n_u < 2 or n_v < 2:
        raise GeometryError(f"detector must be at least 2x2, got {det_shape}")
    if not det_spacing > 0:
        raise GeometryError(f"det_spacing must be positive, got {det_spacing}")

    poses = []
    for k in range(k_views):
        angle = k * math.pi / k_views
        c, s = math.cos(angle), math.sin(angle)
        source = np.array([sid * c, sid * s, 0.0])
        principal = np.array([-c, -s, 0.0])
        u_axis = np.array([-s, c, 0.0])
        v_axis = np.array([0.0, 0.0, 1.0])
        center = source + sdd * principal
        origin = (
            center
            - 0.5 * (n_u - 1) * det_spacing * u_axis
            - 0.5 * (n_v - 1) * det_spacing * v_axis
        )
        poses.append(ViewPose(angle, source, origin, u_axis, v_axis))
    return ScanGeometry(k_views, float(sid), float(sdd), (n_u, n_v), float(det_spacing), tuple(poses))


def _principal(pose: ViewPose) -> np.ndarray:
    return np.cross(pose.detector_v_axis, pose.detector_u_axis)


def project_point(geom: ScanGeometry, k: int, p) -> tuple[float, float]:
    """Perspective projection of world point ``p`` onto view ``k`` in pixels."""
    pose = geom.poses[k]
    w = np.asarray(p, dtype=np.float64) - pose.source_pos
    depth = float(w @ _principal(pose))
    if depth <= BEHIND_SOURCE_EPS:
        raise BehindSourceError(f"point {p} has depth {depth} mm in view {k}")
    hit = pose.source_pos + w * (geom.sdd / depth) - pose.detector_origin
    return (
        float(hit @ pose.detector_u_axis) / geom.det_spacing,
        float(hit @ pose.detector_v_axis) / geom.det_spacing,
    )


def pixel_ray(geom: ScanGeometry, k: int, uv) -> Ray:
    """Ray from the source of view ``k`` to detector coordinate ``uv``."""
    pose = geom.poses[k]
    u, v = uv
    p_d = (
        pose.detector_origin
        + (u * geom.det_spacing) * pose.detector_u_axis
        + (v * geom.det_spacing) * pose.detector_v_axis
    )
    return Ray(pose.source_pos.copy(), p_d)


def project_points(geom: ScanGeometry, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorised projection of ``[N, 3]`` points into every view.

    Returns ``uv`` of shape ``[K, N, 2]`` (detector pixels) and a boolean
    ``valid`` mask ``[K, N]`` that is False for points behind the source.
    Invalid entries hold NaN-free placeholder coordinates.
    """
    st = geom.stacked()
    dt = points.dtype
    src = torch.as_tensor(st["source"], dtype=dt)
    org = torch.as_tensor(st["origin"], dtype=dt)
    ua = torch.as_tensor(st["u_axis"], dtype=dt)
    va = torch.as_tensor(st["v_axis"], dtype=dt)
    pr = torch.linalg.cross(va, ua)
    w = points.unsqueeze(0) - src[:, None, :]
    depth = (w * pr[:, None, :]).sum(-1)
    valid = depth > BEHIND_SOURCE_EPS
    scale = geom.sdd / torch.where(valid, depth, torch.ones_like(depth))
    hit = src[:, None, :] + w * scale[..., None] - org[:, None, :]
    u = (hit * ua[:, None, :]).sum(-1) / geom.det_spacing
    v = (hit * va[:, None, :]).sum(-1) / geom.det_spacing
    return torch.stack([u, v], dim=-1), valid


def view_rays(geom: ScanGeometry, k: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Source ``[3]`` and detector pixel-centre points ``[n_v, n_u, 3]`` of view ``k``."""
    pose = geom.poses[k]
    n_u, n_v = geom.det_shape
    u = torch.arange(n_u, dtype=torch.float64) * geom.det_spacing
    v = torch.arange(n_v, dtype=torch.float64) * geom.det_spacing
    org = torch.as_tensor(pose.detector_origin)
    ua = torch.as_tensor(pose.detector_u_axis)
    va = torch.as_tensor(pose.detector_v_axis)
    p_d = org + v[:, None, None] * va + u[None, :, None] * ua
    return torch.as_tensor(pose.source_pos, dtype=dtype), p_d.to(dtype)
