"""Tensor math, autodiff entry points and the optimizer used across tah.

Tensors are ``torch.Tensor``; this module pins down the handful of
contracts the rest of the package relies on (shape checks, stabilized
softmax, scalar-only backward, AdamW with warmup + cosine decay, global
norm clipping) plus a central finite-difference helper used as an
independent gradient oracle.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch

from .errors import ContractError, DimensionError, NumericError

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def resolve_dtype(name: str | torch.dtype) -> torch.dtype:
    if isinstance(name, torch.dtype):
        if name not in DTYPES.values():
            raise DimensionError(f"unsupported dtype {name}")
        return name
    try:
        return DTYPES[name]
    except KeyError:
        raise DimensionError(f"unsupported dtype {name!r}; expected one of {sorted(DTYPES)}") from None


def dtype_name(dtype: torch.dtype) -> str:
    for k, v in DTYPES.items():
        if v == dtype:
            return k
    raise DimensionError(f"unsupported dtype {dtype}")


def seed_everything(seed: int, threads: int | None = 1) -> None:
    """Seed python, numpy and torch. A fixed thread count makes float reductions repeatable."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if threads is not None:
        torch.set_num_threads(threads)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError("matmul needs at least 1-d operands")
    inner_a = a.shape[-1]
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if inner_a != inner_b:
        raise DimensionError(f"inner extents disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise DimensionError(f"axis {axis} invalid for {x.dim()}-d tensor")
    if not torch.isfinite(x).all():
        raise NumericError("softmax input contains non-finite values")
    z = x - x.amax(dim=axis, keepdim=True)
    e = z.exp()
    return e / e.sum(dim=axis, keepdim=True)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a tracked graph")
    loss.backward()


def central_difference_grad(
    f: Callable[[], torch.Tensor], param: torch.Tensor, h: float = 1e-5
) -> torch.Tensor:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``param``.

    ``param`` is perturbed in place under ``no_grad`` and restored exactly.
    """
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + h
            fp = float(f())
            flat[idx] = orig - h
            fm = float(f())
            flat[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
    return grad


@dataclass
class OptimConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    warmup_fraction: float = 0.03
    min_lr_ratio: float = 0.1
    schedule: str = "cosine"  # or "constant"


def lr_multiplier(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Linear warmup then cosine decay to ``min_lr_ratio``."""
    if cfg.schedule == "constant" or total_steps <= 0:
        return 1.0
    warmup = int(math.ceil(cfg.warmup_fraction * total_steps))
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    cos = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cos


class Optimizer:
    """AdamW with decoupled weight decay, global-norm clipping and a step counter.

    Moment buffers live in the wrapped torch optimizer; ``state_tensors`` and
    ``load_state_tensors`` flatten them by parameter name for checkpointing.
    """

    def __init__(self, named_params: Iterable[tuple[str, torch.nn.Parameter]], cfg: OptimConfig, total_steps: int):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.cfg = cfg
        self.total_steps = total_steps
        self.step_count = 0
        self.opt = torch.optim.AdamW(
            [p for _, p in self.named], lr=cfg.lr, betas=cfg.betas,
            weight_decay=cfg.weight_decay, foreach=False,
        )

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)

    def step(self) -> float:
        """Clip, update, advance the schedule. Returns the pre-clip global grad norm."""
        params = [p for _, p in self.named if p.grad is not None]
        norm = clip_grad_norm(params, self.cfg.grad_clip)
        lr = self.cfg.lr * lr_multiplier(self.step_count, self.total_steps, self.cfg)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        self.step_count += 1
        return norm

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in self.named:
            st = self.opt.state.get(p)
            if not st:
                continue
            out[f"{name}.exp_avg"] = st["exp_avg"].detach().clone()
            out[f"{name}.exp_avg_sq"] = st["exp_avg_sq"].detach().clone()
            out[f"{name}.step"] = st["step"].detach().clone().reshape(1).to(torch.float64)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step_count: int) -> None:
        self.step_count = step_count
        for name, p in self.named:
            key = f"{name}.exp_avg"
            if key not in tensors:
                continue
            self.opt.state[p] = {
                "exp_avg": tensors[key].clone().to(p.dtype),
                "exp_avg_sq": tensors[f"{name}.exp_avg_sq"].clone().to(p.dtype),
                "step": tensors[f"{name}.step"].reshape(()).to(torch.float32).clone(),
            }


def clip_grad_norm(params: list[torch.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads)).item()
    if not math.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if max_norm and max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total
