"""Shared transformer with depth-gated low-rank adapters.

Depth 1 runs the base weights; every deeper depth runs ``W + B @ A`` on the
targeted projections. A token's depth-(d+1) input is the probability-weighted
sum of embedding rows over its top-K depth-d logits, plus its depth-d input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import KVCache2D, additive, allowed_keys, attend
from .config import ModelConfig
from .errors import ConfigError, ContractError, NumericError
from .numerics import resolve_dtype

LORA_SEED_OFFSET = 7919
EMBED_STD = 0.5


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rope(x: torch.Tensor, positions: torch.Tensor, theta: float) -> torch.Tensor:
    """Rotary encoding. x [B, H, m, dh], positions [B, m] (token index, same at every depth)."""
    dh = x.shape[-1]
    inv = 1.0 / (theta ** (torch.arange(0, dh, 2, dtype=x.dtype) / dh))
    ang = positions.to(x.dtype)[:, None, :, None] * inv  # [B, 1, m, dh/2]
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., : dh // 2], x[..., dh // 2:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class AdaptedLinear(nn.Module):
    """Bias-free linear map with an optional low-rank delta used only at depth > 1."""

    def __init__(self, in_features: int, out_features: int, rank: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.rank = rank
        if rank > 0:
            self.lora_A = nn.Parameter(torch.empty(rank, in_features))
            self.lora_B = nn.Parameter(torch.zeros(out_features, rank))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)

    def forward(self, x, deep: bool):
        out = x @ self.weight.T
        if deep and self.rank > 0:
            out = out + (x @ self.lora_A.T) @ self.lora_B.T
        return out


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig, layer: int):
        super().__init__()
        self.cfg = cfg
        self.layer = layer
        h, inner = cfg.hidden_dim, cfg.num_heads * cfg.head_dim
        r = lambda name: cfg.lora_rank if name in cfg.lora_targets else 0
        self.q = AdaptedLinear(h, inner, r("q"))
        self.k = AdaptedLinear(h, inner, r("k"))
        self.v = AdaptedLinear(h, inner, r("v"))
        self.o = AdaptedLinear(inner, h, r("o"))

    def _heads(self, t):
        B, m, _ = t.shape
        return t.view(B, m, self.cfg.num_heads, self.cfg.head_dim).transpose(1, 2)

    def forward(self, x, pos, valid, depth, cache: KVCache2D, recorder=None):
        deep = depth > 1
        q = rope(self._heads(self.q(x, deep)), pos, self.cfg.rope_theta)
        k = rope(self._heads(self.k(x, deep)), pos, self.cfg.rope_theta)
        v = self._heads(self.v(x, deep))
        cache.append(self.layer, depth, k, v, pos, valid)
        view = cache.view(self.layer, depth)
        allowed = allowed_keys(pos, depth, view.pos, view.depth, view.valid)  # [B, m, N]
        mask = additive(allowed, x.dtype)[:, None]
        out, w = attend(q, view.k, view.v, mask, q_valid=valid, return_weights=True)
        if recorder is not None:
            from .attention import AttentionRecord

            recorder(AttentionRecord(self.layer, depth, w.detach(), view.depth, view.valid, valid))
        B, _, m, _ = out.shape
        out = out.transpose(1, 2).reshape(B, m, -1)
        return self.o(out, deep), allowed.sum(dim=-1)


class MLP(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        r = lambda name: cfg.lora_rank if name in cfg.lora_targets else 0
        self.gate = AdaptedLinear(cfg.hidden_dim, cfg.mlp_dim, r("gate"))
        self.up = AdaptedLinear(cfg.hidden_dim, cfg.mlp_dim, r("up"))
        self.down = AdaptedLinear(cfg.mlp_dim, cfg.hidden_dim, r("down"))

    def forward(self, x, deep: bool):
        return self.down(F.silu(self.gate(x, deep)) * self.up(x, deep), deep)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, layer: int):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.hidden_dim, cfg.norm_eps)
        self.attn = Attention(cfg, layer)
        self.mlp_norm = RMSNorm(cfg.hidden_dim, cfg.norm_eps)
        self.mlp = MLP(cfg)

    def forward(self, x, pos, valid, depth, cache, recorder=None):
        a, visible = self.attn(self.attn_norm(x), pos, valid, depth, cache, recorder)
        x = x + a
        x = x + self.mlp(self.mlp_norm(x), depth > 1)
        return x, visible


@dataclass
class DepthOutput:
    y: torch.Tensor  # [B, m, h] last-layer hidden state (after final norm)
    taps: torch.Tensor  # [B, m, 3h] outputs of the shallow/middle/final blocks
    visible: torch.Tensor  # [B, m] accessible key count per query


@dataclass
class DepthStep:
    """What a gate sees after one depth: packed tensors, ``valid`` marks real entries."""

    depth: int
    max_depth: int
    y: torch.Tensor
    logits: torch.Tensor
    taps: torch.Tensor
    positions: torch.Tensor  # absolute token positions [B, m]
    index: torch.Tensor  # column in the current call's token block [B, m]
    valid: torch.Tensor
    record: dict[str, torch.Tensor] = field(default_factory=dict)


Gate = Callable[[DepthStep], "torch.Tensor | None"]


@dataclass
class DepthResult:
    depth: int
    active: torch.Tensor  # [B, n] token computed at this depth
    y: torch.Tensor
    logits: torch.Tensor
    taps: torch.Tensor
    cont: torch.Tensor  # [B, n] continues to depth + 1
    visible: torch.Tensor  # [B, n]
    record: dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass
class TraceOutput:
    depths: list[DepthResult]
    final_depth: torch.Tensor  # [B, n], 0 on padding

    def final_logits(self) -> torch.Tensor:
        out = self.depths[0].logits
        for r in self.depths[1:]:
            out = torch.where(r.active[..., None], r.logits, out)
        return out

    def at(self, depth: int) -> DepthResult | None:
        return self.depths[depth - 1] if depth <= len(self.depths) else None


def static_gate(depths: torch.Tensor) -> Gate:
    """Continue while the current depth is below the token's assigned depth.

    ``depths`` is indexed by absolute position: [B, n_total].
    """

    def gate(step: DepthStep):
        assigned = depths.gather(1, step.positions.clamp(max=depths.shape[1] - 1))
        return assigned > step.depth

    return gate


def never_gate(step: DepthStep):
    return None


def _pack(active: torch.Tensor):
    counts = active.sum(dim=1)
    m = int(counts.max()) if active.numel() else 0
    order = torch.argsort((~active).to(torch.int8), dim=1, stable=True)
    idx = order[:, :m]
    valid = torch.arange(m)[None, :] < counts[:, None]
    return idx, valid


def _gather(full: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    if full.dim() == 2:
        return full.gather(1, idx)
    return full.gather(1, idx[..., None].expand(-1, -1, full.shape[-1]))


def _scatter(src: torch.Tensor, idx: torch.Tensor, valid: torch.Tensor, n: int) -> torch.Tensor:
    B = src.shape[0]
    tgt = torch.where(valid, idx, torch.full_like(idx, n))
    if src.dim() == 2:
        out = src.new_zeros(B, n + 1)
        return out.scatter(1, tgt, src)[:, :n]
    out = src.new_zeros(B, n + 1, src.shape[-1])
    return out.scatter(1, tgt[..., None].expand(-1, -1, src.shape[-1]), src)[:, :n]


class TaHModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        dtype = resolve_dtype(config.dtype)
        h, v = config.hidden_dim, config.vocab_size
        self.embed = nn.Parameter(torch.empty(v, h))
        self.layers = nn.ModuleList([Block(config, i) for i in range(config.num_layers)])
        self.final_norm = RMSNorm(h, config.norm_eps)
        if config.tie_embeddings:
            self.register_parameter("w_out", None)
        else:
            self.w_out = nn.Parameter(torch.empty(h, v))
        self.attention_recorder = None
        self.reset_parameters(seed)
        self.to(dtype)

    def reset_parameters(self, seed: int) -> None:
        """Base weights from one generator, adapter A from another, adapter B zero.

        Keeping the streams separate makes base initialization independent of
        ``lora_rank`` and ``lora_targets``.
        """
        g = torch.Generator().manual_seed(seed)
        g_lora = torch.Generator().manual_seed(seed + LORA_SEED_OFFSET)
        randn = lambda shape, gen: torch.randn(shape, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("lora_B"):
                    p.zero_()
                elif name.endswith("lora_A"):
                    p.copy_(randn(p.shape, g_lora) / p.shape[1] ** 0.5)
                elif "norm" in name:
                    p.fill_(1.0)
                elif name in ("embed", "w_out"):
                    p.copy_(randn(p.shape, g) * EMBED_STD)
                else:
                    # fan-in scaling; a much smaller scale leaves attention near uniform and
                    # the toy tasks stall on a long plateau
                    p.copy_(randn(p.shape, g) / p.shape[1] ** 0.5)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.dtype

    def base_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if "lora_" not in n]

    def lora_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if "lora_" in n]

    @property
    def head_weight(self) -> torch.Tensor:
        """W_out, shape [h, v]."""
        return self.embed.T if self.w_out is None else self.w_out

    def lm_head(self, y: torch.Tensor) -> torch.Tensor:
        return y @ self.head_weight

    def next_depth_input(self, y: torch.Tensor, x_prev: torch.Tensor | None) -> torch.Tensor:
        """Top-K logit-weighted embedding of ``y`` (+ ``x_prev`` when the depth residual is on)."""
        K = self.config.lwe_top_k
        if K < 1:
            raise ConfigError("lwe_top_k must be >= 1")
        logits = self.lm_head(y)
        top, idx = torch.topk(logits, K, dim=-1)
        p = torch.softmax(top, dim=-1)
        x = (p[..., None] * self.embed[idx]).sum(dim=-2)
        if self.config.depth_residual and x_prev is not None:
            x = x + x_prev
        return x

    def forward_depth(self, x, positions, valid, depth: int, cache: KVCache2D) -> DepthOutput:
        cfg = self.config
        if not 1 <= depth <= cfg.max_depth:
            raise ContractError(f"depth {depth} outside [1, {cfg.max_depth}]")
        if bool((positions[valid] >= cfg.max_position).any()):
            raise ContractError("position exceeds max_position")
        cache.require_ready(positions, valid, depth)
        taps_at = cfg.tap_layers
        taps = []
        visible = None
        for i, block in enumerate(self.layers):
            x, vis = block(x, positions, valid, depth, cache, self.attention_recorder)
            if visible is None:
                visible = vis
            for t in taps_at:
                if t == i + 1:
                    taps.append(x)
        y = self.final_norm(x)
        return DepthOutput(y, torch.cat(taps, dim=-1), visible)

    def forward_trace(
        self, tokens: torch.Tensor, pad_mask: torch.Tensor | None = None, gate: Gate = never_gate,
        cache: KVCache2D | None = None, start_pos: int = 0,
    ) -> TraceOutput:
        """Run every depth for a block of tokens, depth-major.

        All tokens of the block share one depth-1 pass; after each depth
        ``gate`` picks who continues, and only those are computed deeper.
        Passing a ``cache`` that already holds earlier positions turns this
        into incremental decoding.
        """
        cfg = self.config
        B, n = tokens.shape
        if pad_mask is None:
            pad_mask = torch.ones_like(tokens, dtype=torch.bool)
        if cache is None:
            cache = KVCache2D(cfg.num_layers)
        positions = torch.arange(start_pos, start_pos + n)[None, :].expand(B, n)
        x_full = self.embed[tokens]
        active = pad_mask.clone()
        results: list[DepthResult] = []
        final_depth = pad_mask.long()
        for d in range(1, cfg.max_depth + 1):
            if d > 1:
                active = active & results[-1].cont
                if not bool(active.any()):
                    break
            idx, valid = _pack(active)
            x = _gather(x_full, idx)
            pos = _gather(positions, idx)
            out = self.forward_depth(x, pos, valid, d, cache)
            logits = self.lm_head(out.y)
            step = DepthStep(d, cfg.max_depth, out.y, logits, out.taps, pos, idx, valid)
            cont = gate(step) if d < cfg.max_depth else None
            if cont is None:
                cont = torch.zeros_like(valid)
            cont = cont & valid
            res = DepthResult(
                depth=d,
                active=active,
                y=_scatter(out.y, idx, valid, n),
                logits=_scatter(logits, idx, valid, n),
                taps=_scatter(out.taps, idx, valid, n),
                cont=_scatter(cont.long(), idx, valid, n).bool(),
                visible=_scatter(out.visible, idx, valid, n),
                record={k: _scatter(v, idx, valid, n) for k, v in step.record.items()},
            )
            results.append(res)
            final_depth = torch.where(active, torch.full_like(final_depth, d), final_depth)
            if bool(cont.any()):
                x_next = self.next_depth_input(out.y, x)
                x_full = torch.where(res.cont[..., None], _scatter(x_next, idx, valid, n), x_full)
        return TraceOutput(results, final_depth)

    def forward(self, tokens, pad_mask=None, depths=None):
        """Final-depth logits under a static per-token depth assignment (default: all depth 1)."""
        gate = never_gate if depths is None else static_gate(depths)
        return self.forward_trace(tokens, pad_mask, gate).final_logits()


def sample(
    logits: torch.Tensor, rule: str = "greedy", temperature: float = 1.0, top_p: float = 1.0,
    generator: torch.Generator | None = None,
) -> int:
    """Draw one token id from a length-v logit vector."""
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    logits = logits.detach().double()
    if rule == "greedy":
        return int(torch.argmax(logits))
    if temperature <= 0:
        raise ConfigError("temperature must be > 0 for stochastic sampling")
    probs = torch.softmax(logits / temperature, dim=-1)
    if rule == "nucleus":
        sp, order = torch.sort(probs, descending=True, stable=True)
        keep = (sp.cumsum(0) - sp) < top_p
        keep[0] = True
        probs = torch.zeros_like(probs).scatter(0, order[keep], sp[keep])
        probs = probs / probs.sum()
    elif rule != "temperature":
        raise ConfigError(f"unknown sampling rule {rule!r}")
    return int(torch.multinomial(probs, 1, generator=generator))
