"""Continuation gate: a small MLP over tapped backbone hidden states."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError, ContractError

EPS = 1e-7


class IterationDecider(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.in_dim = 3 * config.hidden_dim
        widths = (self.in_dim,) + tuple(config.decider_widths) + (1,)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in self.layers:
                bound = 1.0 / lin.in_features ** 0.5
                lin.weight.copy_((torch.rand(lin.weight.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
                lin.bias.zero_()
        self.to(torch.float64 if config.dtype == "float64" else torch.float32)

    def logits(self, taps: torch.Tensor) -> torch.Tensor:
        if taps.shape[-1] != self.in_dim:
            raise ConfigError(f"decider expects {self.in_dim} input features, got {taps.shape[-1]}")
        x = taps.to(self.layers[0].weight.dtype)
        for lin in self.layers[:-1]:
            x = F.silu(lin(x))
        return self.layers[-1](x)[..., 0]

    def forward(self, taps: torch.Tensor) -> torch.Tensor:
        """Continuation probability in (0, 1)."""
        return torch.sigmoid(self.logits(taps))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class GateDecision:
    c_hat: float
    action: str  # "continue" | "verbalize"
    depth: int


def should_continue(c_hat, c_threshold: float, depth: int, d_max: int):
    """Strictly above threshold and below the depth cap; equality verbalizes."""
    if depth < 1:
        raise ContractError("depth must be >= 1")
    return (c_hat > c_threshold) & (depth < d_max)


def decide(taps: torch.Tensor, decider: IterationDecider, c_threshold: float, depth: int, d_max: int):
    """Gate one token (taps of shape [3h]) or a batch ([..., 3h]).

    Returns a ``GateDecision`` for a single token, else (c_hat, continue_mask).
    """
    with torch.no_grad():
        c = decider(taps)
    cont = should_continue(c, c_threshold, depth, d_max)
    if c.dim() == 0:
        return GateDecision(float(c), "continue" if bool(cont) else "verbalize", depth)
    return c, cont


def decider_loss(c_hat: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor,
                 reduction: str = "sum") -> torch.Tensor:
    """Class-reweighted BCE; ``weights`` multiplies the continue term.

    Only the decisions passed in are scored; the caller restricts them to
    depths d <= min(d_max - 1, oracle depth).
    """
    c = c_hat.clamp(EPS, 1 - EPS)
    labels = labels.to(c.dtype)
    weights = weights.to(c.dtype)
    per = -(weights * labels * torch.log(c) + (1 - labels) * torch.log(1 - c))
    if reduction == "sum":
        return per.sum()
    if reduction == "mean":
        return per.mean()
    return per


def decider_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Mean reweighted BCE computed in log space; used for training."""
    labels = labels.to(logits.dtype)
    weights = weights.to(logits.dtype)
    per = -(weights * labels * F.logsigmoid(logits) + (1 - labels) * F.logsigmoid(-logits))
    return per.mean()


@dataclass
class DeciderAccuracy:
    accuracy: float
    balanced_accuracy: float
    true_continue: int
    true_stop: int
    overthink: int  # predicted continue, oracle stop
    underthink: int  # predicted stop, oracle continue

    @property
    def total(self) -> int:
        return self.true_continue + self.true_stop + self.overthink + self.underthink


def decider_accuracy(predictions, labels, threshold: float) -> DeciderAccuracy:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if p.size == 0:
        raise ContractError("empty evaluation set")
    pred = p > threshold
    tc = int((pred & y).sum())
    ts = int((~pred & ~y).sum())
    over = int((pred & ~y).sum())
    under = int((~pred & y).sum())
    recalls = []
    if y.any():
        recalls.append(tc / int(y.sum()))
    if (~y).any():
        recalls.append(ts / int((~y).sum()))
    return DeciderAccuracy((tc + ts) / p.size, float(np.mean(recalls)), tc, ts, over, under)
