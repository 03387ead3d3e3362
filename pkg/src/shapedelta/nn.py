"""Small differentiable blocks: residual two-layer MLPs and max-pooling set encoders.

Reverse-mode gradients come from torch autograd; :func:`gradient_check`
verifies them against central finite differences.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

LEAK = 0.01
NORM_GROUPS = 8


class NonFiniteError(FloatingPointError):
    pass


def leaky(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAK)


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values entering {where}")
    return x


def init_linear(layer: nn.Linear, gen: torch.Generator) -> nn.Linear:
    """Scaled-uniform fan-in init drawn from an explicit generator."""
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)
    return layer


class MlpBlock(nn.Module):
    """``y = W2 act(norm(W1 x + b1)) + b2 (+ x)``; width-preserving."""

    def __init__(self, width: int, gen: torch.Generator, skip: bool = True,
                 group_norm: bool = True, groups: int = NORM_GROUPS):
        super().__init__()
        self.width = width
        self.skip = skip
        self.fc1 = init_linear(nn.Linear(width, width), gen)
        self.fc2 = init_linear(nn.Linear(width, width), gen)
        self.norm = nn.GroupNorm(min(groups, width), width) if group_norm else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.width:
            raise ValueError(f"expected width {self.width}, got {tuple(x.shape)}")
        check_finite(x, "MlpBlock")
        h = self.fc1(x)
        if self.norm is not None:
            h = self.norm(h.reshape(-1, self.width)).reshape(h.shape)
        y = self.fc2(leaky(h))
        return y + x if self.skip else y


class FeatureNet(nn.Module):
    """Input projection to the feature width, one :class:`MlpBlock`, optional output head."""

    def __init__(self, in_dim: int, width: int, gen: torch.Generator, out_dim: int | None = None,
                 skip: bool = True, group_norm: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.inp = init_linear(nn.Linear(in_dim, width), gen)
        self.block = MlpBlock(width, gen, skip, group_norm)
        self.head = init_linear(nn.Linear(width, out_dim), gen) if out_dim else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {tuple(x.shape)}")
        h = self.block(leaky(self.inp(x)))
        return self.head(leaky(h)) if self.head is not None else h


def masked_max(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Feature-wise max over dim 1 of a padded ``(sets, elements, width)`` batch.

    Ties route the gradient to the lowest element index.
    """
    neg = torch.finfo(x.dtype).min
    filled = x.masked_fill(~mask.unsqueeze(-1), neg)
    idx = filled.argmax(dim=1, keepdim=True)
    return filled.gather(1, idx).squeeze(1)


class SetPool(nn.Module):
    """Permutation-invariant set encoder: per-element net, max-pool, then a block."""

    def __init__(self, in_dim: int, width: int, gen: torch.Generator, skip: bool = True,
                 group_norm: bool = True):
        super().__init__()
        self.element = FeatureNet(in_dim, width, gen, skip=skip, group_norm=group_norm)
        self.post = MlpBlock(width, gen, skip, group_norm)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``x``: ``(elements, in_dim)`` for one set or ``(sets, elements, in_dim)`` padded."""
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool)
        if x.shape[1] == 0 or not mask.any(dim=1).all():
            raise ValueError("SetPool needs at least one element per set")
        h = self.element(x)
        out = self.post(masked_max(h, mask))
        return out[0] if single else out


# ----------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    non_smooth: list[int] = field(default_factory=list)
    worst_index: int = -1

    def ok(self, tol: float = 1e-4) -> bool:
        return self.checked > 0 and self.max_rel_error <= tol


# central-difference steps, coarse to fine, a factor sqrt(10) apart
FD_STEPS = tuple(1e-3 * 10 ** (-k / 2) for k in range(7))


def fd_resolution(f0: float, eps: float) -> float:
    """Smallest gradient a central difference can resolve to 1e-4 relative in float64."""
    return 1e4 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / eps


def numeric_partial(f_at, f0: float, kink_tol: float = 1e-3):
    """Finite-difference partial derivative of ``f_at(h) = f(x + h e_i)`` at ``h = 0``.

    Returns ``(estimate, resolution)``, or ``None`` when the one-sided
    quotients at the finest step disagree (a kink at ``x``). The estimate is
    the finer value of the adjacent pair of steps whose central differences
    agree best: coarse steps lose to truncation or to a nearby kink, fine
    steps to rounding, and the best-agreeing pair sits between the two.
    """
    h = FD_STEPS[-1]
    fp, fm = f_at(h), f_at(-h)
    fwd, bwd = (fp - f0) / h, (f0 - fm) / h
    if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
        return None
    ests = [(f_at(s) - f_at(-s)) / (2 * s) for s in FD_STEPS[:-1]] + [(fp - fm) / (2 * h)]
    k = min(range(len(ests) - 1), key=lambda k: abs(ests[k] - ests[k + 1]))
    return ests[k + 1], fd_resolution(f0, FD_STEPS[k + 1])


def _relative_error(a: float, num: float, resolution: float) -> float:
    return abs(a - num) / max(abs(a), abs(num), resolution)


def gradient_check(func, x: torch.Tensor, coords=None, kink_tol: float = 1e-3) -> GradCheckResult:
    """Compare autograd against finite differences of scalar ``func`` at ``x``.

    Non-smooth coordinates (see :func:`numeric_partial`) are reported and
    excluded. Relative error is ``|a - n| / max(|a|, |n|, resolution)``, so
    gradients below what float64 differences can resolve are compared absolutely.
    """
    x = x.detach().clone().requires_grad_(True)
    y = func(x)
    (grad,) = torch.autograd.grad(y, x, allow_unused=True)
    grad = torch.zeros_like(x) if grad is None else grad
    f0 = float(y.detach())
    flat = x.detach().reshape(-1).clone()
    ga = grad.reshape(-1)
    idxs = range(flat.numel()) if coords is None else coords
    worst, worst_i, checked = 0.0, -1, 0
    non_smooth = []
    with torch.no_grad():
        for i in idxs:
            old = flat[i].item()

            def f_at(h):
                flat[i] = old + h
                out = float(func(flat.view_as(x)))
                flat[i] = old
                return out

            est = numeric_partial(f_at, f0, kink_tol)
            if est is None:
                non_smooth.append(i)
                continue
            checked += 1
            err = _relative_error(float(ga[i]), *est)
            if err > worst:
                worst, worst_i = err, i
    return GradCheckResult(worst, checked, non_smooth, worst_i)


def check_parameter_gradients(module: nn.Module, loss_fn, per_param: int = 4, seed: int = 0,
                              kink_tol: float = 1e-3) -> GradCheckResult:
    """Finite-difference check of ``loss_fn()`` w.r.t. a random subset of each parameter."""
    rng = np.random.default_rng(seed)
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    f0 = float(loss.detach())
    worst, worst_i, checked, non_smooth = 0.0, -1, 0, []
    counter = 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            picks = rng.choice(flat.numel(), size=min(per_param, flat.numel()), replace=False)
            for i in picks:
                old = flat[i].item()

                def f_at(h):
                    flat[i] = old + h
                    out = float(loss_fn())
                    flat[i] = old
                    return out

                est = numeric_partial(f_at, f0, kink_tol)
                if est is None:
                    non_smooth.append(counter)
                else:
                    checked += 1
                    err = _relative_error(float(gflat[i]), *est)
                    if err > worst:
                        worst, worst_i = err, counter
                counter += 1
    return GradCheckResult(worst, checked, non_smooth, worst_i)


# ----------------------------------------------------------------------------
# optimizer


def adam_init(params) -> dict:
    return {
        "step": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


def adam_step(params, grads, state: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update, in place on ``params``; returns ``(params, state)``."""
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(eps), value=-lr)
    return params, state


# ----------------------------------------------------------------------------
# checkpoints

MAGIC = b"SDCKPT\x00\x01"
CHECKPOINT_VERSION = 1
_DTYPES = {"float64": ("<f8", torch.float64), "float32": ("<f4", torch.float32)}


def save_checkpoint(path, tensors: dict[str, torch.Tensor], header: dict) -> None:
    """Header JSON + raw little-endian tensor payloads."""
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        dtype = str(t.dtype).replace("torch.", "")
        np_dtype, _ = _DTYPES[dtype]
        raw = t.detach().cpu().numpy().astype(np_dtype).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({"version": CHECKPOINT_VERSION, "header": header, "tensors": entries},
                      sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    meta = json.loads(data[start:start + hlen])
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    body = start + hlen
    tensors = {}
    for e in meta["tensors"]:
        np_dtype, _ = _DTYPES[e["dtype"]]
        chunk = data[body + e["offset"]: body + e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, meta["header"]
