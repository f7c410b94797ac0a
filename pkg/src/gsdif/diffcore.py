"""Differentiable building blocks, parameter storage and the optimizer.

Reverse-mode gradients come from torch autograd; this module fixes the small
set of layers the model is allowed to use, their initialisation, the
heavy-ball SGD update and the learning-rate schedule, plus a central
finite-difference checker used to verify every backward pass.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

DEFAULT_DTYPE = torch.float32
VERIFY_DTYPE = torch.float64


class MissingGradientError(RuntimeError):
    pass


class ParamStore:
    """Ordered map of named leaf tensors with per-parameter momentum buffers."""

    def __init__(self, tensors: dict[str, torch.Tensor] | None = None):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.momentum: dict[str, torch.Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value.detach().clone().requires_grad_(True)
        self.params[name] = t
        self.momentum[name] = torch.zeros_like(t)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype

    def to(self, dtype: torch.dtype) -> "ParamStore":
        """Copy with every tensor (and momentum buffer) cast to ``dtype``."""
        out = ParamStore({n: t.to(dtype) for n, t in self.params.items()})
        for n, m in self.momentum.items():
            out.momentum[n] = m.to(dtype)
        return out

    def clone(self) -> "ParamStore":
        return self.to(self.dtype)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def fill_missing_grads(self, names: Iterable[str] | None = None):
        """Give unreached parameters an explicit zero gradient."""
        for n in names if names is not None else self.params:
            t = self.params[n]
            if t.grad is None:
                t.grad = torch.zeros_like(t)

    def state_dict(self) -> OrderedDict[str, torch.Tensor]:
        return OrderedDict((n, t.detach()) for n, t in self.params.items())


def glorot_uniform(shape: Sequence[int], fan_in: int, fan_out: int, gen: torch.Generator,
                   dtype=DEFAULT_DTYPE) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(tuple(shape), generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


def add_conv(store: ParamStore, name: str, c_in: int, c_out: int, gen: torch.Generator, dtype=DEFAULT_DTYPE):
    store.add(f"{name}.weight", glorot_uniform((c_out, c_in, 3, 3), 9 * c_in, 9 * c_out, gen, dtype))
    store.add(f"{name}.bias", torch.zeros(c_out, dtype=dtype))


def add_mlp(store: ParamStore, name: str, widths: Sequence[int], gen: torch.Generator, dtype=DEFAULT_DTYPE,
            zero_last: bool = False):
    """Register affine layers ``name.{i}.weight [in, out]`` / ``name.{i}.bias``."""
    n_layers = len(widths) - 1
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if zero_last and i == n_layers - 1:
            w = torch.zeros(a, b, dtype=dtype)
        else:
            w = glorot_uniform((a, b), a, b, gen, dtype)
        store.add(f"{name}.{i}.weight", w)
        store.add(f"{name}.{i}.bias", torch.zeros(b, dtype=dtype))


def mlp_layers(store: ParamStore, name: str) -> list[tuple[torch.Tensor, torch.Tensor]]:
    layers = []
    i = 0
    while f"{name}.{i}.weight" in store:
        layers.append((store[f"{name}.{i}.weight"], store[f"{name}.{i}.bias"]))
        i += 1
    return layers


def conv_block_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, stride: int = 1) -> torch.Tensor:
    """3x3 cross-correlation, zero padding 1, then bias and ReLU.

    ``x`` is ``[views, C_in, H, W]``; the result is ``[views, C_out, H/stride, W/stride]``.
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.dim() != 4 or weight.shape[1] != x.shape[1] or weight.shape[2:] != (3, 3):
        raise ValueError(f"conv shape mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}")
    if x.shape[2] % stride or x.shape[3] % stride:
        raise ValueError(f"spatial size {tuple(x.shape[2:])} not divisible by stride {stride}")
    return F.relu(F.conv2d(x, weight, bias, stride=stride, padding=1))


def mlp_forward(x: torch.Tensor, layers: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Affine chain with ReLU between layers and a linear output."""
    for i, (w, b) in enumerate(layers):
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"mlp layer {i}: input width {x.shape[-1]} != weight rows {w.shape[0]}")
        x = x @ w + b
        if i < len(layers) - 1:
            x = F.relu(x)
    return x


def bilinear_sample(featmap: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Channel-wise bilinear interpolation at continuous pixel coordinates.

    ``featmap`` is ``[C, H, W]`` or batched ``[B, C, H, W]``; ``coords`` is
    ``[..., 2]`` holding ``(x, y)`` = (column, row), with a leading ``B`` axis
    in the batched case. Returns ``[..., C]``. Neighbours outside the raster
    contribute zero, so coordinates at least one pixel outside give zeros.
    Gradients reach ``featmap`` only.
    """
    batched = featmap.dim() == 4
    if not batched:
        featmap, coords = featmap.unsqueeze(0), coords.unsqueeze(0)
    b, c, h, w = featmap.shape
    lead = coords.shape[1:-1]
    xy = coords.detach().reshape(b, -1, 2).to(featmap.dtype)
    x, y = xy[..., 0], xy[..., 1]
    x0, y0 = torch.floor(x), torch.floor(y)
    fx, fy = x - x0, y - y0
    x0, y0 = x0.long(), y0.long()
    # channels-last rows so each neighbour fetch is a contiguous row gather
    rows = featmap.permute(0, 2, 3, 1).reshape(b * h * w, c)
    base = (torch.arange(b) * (h * w)).unsqueeze(1)
    out = None
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = torch.where(ok, yi * w + xi, torch.zeros_like(xi)) + base
            term = rows.index_select(0, idx.reshape(-1)) * (wx * wy * ok).reshape(-1, 1)
            out = term if out is None else out + term
    out = out.reshape(b, *lead, c)
    return out if batched else out[0]


def max_over_views(stack: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Maximum over the leading view axis of ``[K, ..., C]``.

    Gradient goes to the arg-max element; ties go to the lowest view index.
    ``valid`` (``[K, ...]``) masks views out of the maximum entirely.
    """
    k = stack.shape[0]
    if k < 1:
        raise ValueError("need at least one view")
    keyed = stack.detach()
    if valid is not None:
        keyed = keyed.masked_fill(~valid.unsqueeze(-1), float("-inf"))
    out, best = stack[0], keyed[0]
    for i in range(1, k):
        # strict comparison keeps the earlier view on ties
        take = keyed[i] > best
        best = torch.where(take, keyed[i], best)
        out = torch.where(take, stack[i], out)
    return out


def backward(loss: torch.Tensor):
    """``loss.backward()`` with intra-op threads pinned to one.

    Weight-gradient reductions in the convolution backward split their sums
    by thread, so the float result would depend on the worker count.
    """
    with _single_thread():
        loss.backward()


@contextmanager
def _single_thread():
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def lr_at_epoch(lr0: float, epoch: int, max_epoch: int) -> float:
    if max_epoch < 1 or epoch > max_epoch:
        raise ValueError(f"need 0 <= epoch <= max_epoch >= 1, got epoch={epoch}, max_epoch={max_epoch}")
    return lr0 * 0.001 ** (epoch / max_epoch)


@torch.no_grad()
def sgd_momentum_step(store: ParamStore, lr: float, momentum: float = 0.98):
    """Heavy-ball update ``m <- momentum*m + g; p <- p - lr*m``, then clear gradients."""
    for name, p in store.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    for name, p in store.items():
        m = store.momentum[name]
        m.mul_(momentum).add_(p.grad)
        p.sub_(lr * m)
        p.grad = None


def finite_difference_grad(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-5,
                           index: Iterable[int] | None = None) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor`` (perturbed in place)."""
    flat = tensor.data.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in index if index is not None else range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn())
            flat[i] = orig - h
            fm = float(fn())
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
    return grad.view_as(tensor)


def gradient_check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], h: float = 1e-5,
                   max_entries: int | None = None, gen: torch.Generator | None = None) -> float:
    """Largest relative discrepancy between autograd and central differences.

    The error for each tensor is ``max|analytic - numeric| / max(max|numeric|, 1e-12)``
    (a norm-wise relative error, robust to entries whose gradient is ~0).
    ``max_entries`` limits the probe to a random subset per tensor.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, list(tensors), allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            n = t.numel()
            if max_entries is not None and n > max_entries:
                idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
            else:
                idx = list(range(n))
            num = finite_difference_grad(fn, t, h, idx).view(-1)[idx]
            ana = g.reshape(-1)[idx]
            scale = max(float(num.abs().max()), float(ana.abs().max()), 1e-12)
            worst = max(worst, float((ana - num).abs().max()) / scale)
    return worst
