"""Binary file formats and the run configuration file.

Every format is an ASCII header (magic line, ``key=value`` lines, then
``end_header``) followed by a raw little-endian float32 payload with no
padding. Floats in headers are written with ``repr`` so they round-trip
exactly.
"""

from __future__ import annotations

import configparser
import io as _io
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .diffcore import ParamStore
from .geometry import ScanGeometry, make_circular_geometry
from .model import ModelConfig, init_params
from .projector import DRR_SAMPLES, ProjectionStack
from .tto import TTOConfig
from .volume import VoxelVolume

VOL_MAGIC = "GSDIF-VOL v1"
PROJ_MAGIC = "GSDIF-PROJ v1"
CKPT_MAGIC = "GSDIF-CKPT v1"
END = "end_header"
F32LE = np.dtype("<f4")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ShapeInconsistencyError(FormatError):
    pass


def _header(lines: list[str]) -> bytes:
    return ("\n".join(lines + [END]) + "\n").encode("ascii")


def _read(path, magic: str) -> tuple[list[tuple[str, str]], bytes]:
    raw = Path(path).read_bytes()
    first, _, rest = raw.partition(b"\n")
    if first.decode("ascii", "replace").strip() != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {first[:32]!r}")
    items = []
    while True:
        line, sep, rest = rest.partition(b"\n")
        if not sep:
            raise TruncatedPayloadError(f"{path}: header has no {END!r} line")
        text = line.decode("ascii")
        if text == END:
            return items, rest
        key, eq, val = text.partition("=")
        if not eq:
            raise FormatError(f"{path}: malformed header line {text!r}")
        items.append((key, val))


def _floats(payload: bytes, count: int, path) -> np.ndarray:
    want = 4 * count
    if len(payload) < want:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header promises {want}")
    if len(payload) > want:
        raise ShapeInconsistencyError(f"{path}: payload has {len(payload)} bytes, header promises {want}")
    return np.frombuffer(payload, dtype=F32LE).astype(np.float32)


def _fl(v) -> str:
    return repr(float(v))


def _get(h: dict, key: str, path):
    if key not in h:
        raise FormatError(f"{path}: header is missing {key!r}")
    return h[key]


# -- volumes -----------------------------------------------------------------

def save_volume(path, vol: VoxelVolume):
    lines = [
        VOL_MAGIC,
        "dims=" + " ".join(str(n) for n in vol.dims),
        "spacing_mm=" + " ".join(_fl(s) for s in vol.spacing),
        "origin_mm=" + " ".join(_fl(o) for o in vol.origin),
        "dtype=f32le",
    ]
    Path(path).write_bytes(_header(lines) + vol.data.astype(F32LE).tobytes())


def load_volume(path) -> VoxelVolume:
    items, payload = _read(path, VOL_MAGIC)
    h = dict(items)
    if _get(h, "dtype", path) != "f32le":
        raise FormatError(f"{path}: unsupported dtype {h['dtype']!r}")
    try:
        dims = tuple(int(x) for x in _get(h, "dims", path).split())
        spacing = tuple(float(x) for x in _get(h, "spacing_mm", path).split())
        origin = tuple(float(x) for x in _get(h, "origin_mm", path).split())
    except ValueError as exc:
        raise FormatError(f"{path}: unparsable header value ({exc})") from None
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or min(dims) < 1:
        raise ShapeInconsistencyError(f"{path}: dims/spacing/origin must have 3 components")
    nx, ny, nz = dims
    data = _floats(payload, nx * ny * nz, path).reshape(nz, ny, nx)
    return VoxelVolume(data, spacing, origin)


# -- projections -------------------------------------------------------------

GEOMETRY_KEYS = ("n_views", "sid_mm", "sdd_mm", "det_nu", "det_nv", "det_spacing_mm")


def save_projections(path, proj: ProjectionStack):
    g = proj.geometry.to_dict()
    lines = [PROJ_MAGIC] + [f"{k}={_fl(g[k]) if k.endswith('_mm') else g[k]}" for k in GEOMETRY_KEYS] + ["dtype=f32le"]
    Path(path).write_bytes(_header(lines) + proj.data.astype(F32LE).tobytes())


def load_projections(path) -> ProjectionStack:
    items, payload = _read(path, PROJ_MAGIC)
    h = dict(items)
    try:
        geom = ScanGeometry.from_dict({k: _get(h, k, path) for k in GEOMETRY_KEYS})
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: bad geometry block ({exc})") from None
    n_u, n_v = geom.det_shape
    data = _floats(payload, geom.n_views * n_u * n_v, path).reshape(geom.n_views, n_v, n_u)
    return ProjectionStack(geom, data)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: ParamStore, cfg: ModelConfig):
    lines = [CKPT_MAGIC]
    lines += [f"config.{k}={v}" for k, v in cfg.to_flat().items()]
    lines += [f"tensor={name} " + ",".join(str(d) for d in t.shape) for name, t in params.items()]
    payload = b"".join(t.detach().to(torch.float32).numpy().astype(F32LE).tobytes() for _, t in params.items())
    Path(path).write_bytes(_header(lines) + payload)


def load_checkpoint(path) -> tuple[ParamStore, ModelConfig]:
    """Load parameters (float32) and the echoed model config.

    Raises :class:`ShapeInconsistencyError` unless the tensor list matches the
    parameters the config implies exactly once each.
    """
    items, payload = _read(path, CKPT_MAGIC)
    flat = {k[len("config."):]: v for k, v in items if k.startswith("config.")}
    try:
        cfg = ModelConfig.from_flat(flat)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad config echo ({exc})") from None
    specs = []
    for k, v in items:
        if k == "tensor":
            name, _, shape = v.partition(" ")
            specs.append((name, tuple(int(d) for d in shape.split(",") if d)))
    expected = OrderedDict((n, tuple(t.shape)) for n, t in init_params(cfg, 0).items())
    names = [n for n, _ in specs]
    if len(set(names)) != len(names) or set(names) != set(expected):
        raise ShapeInconsistencyError(f"{path}: tensor list does not match the model config")
    for n, shape in specs:
        if expected[n] != shape:
            raise ShapeInconsistencyError(f"{path}: tensor {n} has shape {shape}, config implies {expected[n]}")
    counts = [int(np.prod(s)) for _, s in specs]
    values = _floats(payload, sum(counts), path)
    store = ParamStore()
    off = 0
    for (name, shape), c in zip(specs, counts):
        store.add(name, torch.from_numpy(values[off:off + c].reshape(shape).copy()))
        off += c
    return store, cfg


# -- run configuration -------------------------------------------------------

@dataclass
class VolumeSettings:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing_mm: float = 5.0
    drr_samples: int = DRR_SAMPLES


@dataclass
class RunConfig:
    geometry: ScanGeometry = field(default_factory=make_circular_geometry)
    model: ModelConfig = field(default_factory=ModelConfig)
    tto: TTOConfig = field(default_factory=TTOConfig)
    volume: VolumeSettings = field(default_factory=VolumeSettings)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["geometry"] = {k: str(v) for k, v in self.geometry.to_dict().items()}
        flat = self.model.to_flat()
        cp["model"] = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("model.")}
        cp["training"] = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("training.")}
        cp["tto"] = {k: ("" if v is None else str(v).lower() if isinstance(v, bool) else str(v))
                     for k, v in asdict(self.tto).items()}
        cp["volume"] = {
            "dims": ",".join(str(n) for n in self.volume.dims),
            "spacing_mm": str(self.volume.spacing_mm),
            "drr_samples": str(self.volume.drr_samples),
        }
        buf = _io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        out = cls()
        if cp.has_section("geometry"):
            g = dict(out.geometry.to_dict(), **cp["geometry"])
            out.geometry = ScanGeometry.from_dict(g)
        flat = {f"model.{k}": v for k, v in (cp["model"].items() if cp.has_section("model") else [])}
        flat.update({f"training.{k}": v for k, v in (cp["training"].items() if cp.has_section("training") else [])})
        base = ModelConfig(k_views=out.geometry.n_views, det_nu=out.geometry.det_shape[0],
                           det_nv=out.geometry.det_shape[1])
        out.model = ModelConfig.from_flat(dict(base.to_flat(), **flat))
        if cp.has_section("tto"):
            kw = {}
            types = {f_.name: str(f_.type) for f_ in fields(TTOConfig)}
            for k, v in cp["tto"].items():
                if k not in types:
                    raise ValueError(f"unknown tto key {k!r}")
                if k == "lr":
                    kw[k] = None if v.strip() == "" else float(v)
                elif "bool" in types[k]:
                    kw[k] = cp["tto"].getboolean(k)
                elif "float" in types[k]:
                    kw[k] = float(v)
                else:
                    kw[k] = int(v)
            out.tto = TTOConfig(**kw)
        if cp.has_section("volume"):
            s = cp["volume"]
            out.volume = VolumeSettings(
                tuple(int(x) for x in s.get("dims", "32,32,32").split(",")),
                float(s.get("spacing_mm", "5.0")),
                int(s.get("drr_samples", str(DRR_SAMPLES))),
            )
        return out


def load_config(path) -> RunConfig:
    return RunConfig.from_ini(Path(path).read_text())
