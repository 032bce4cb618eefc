"""Duo-causal attention: keys are visible iff earlier-or-equal in position AND
shallower-or-equal in iteration depth.

The KV cache is ragged: a token that verbalizes at depth 1 never gets a
depth-2 entry, so masks are always built from the entries that actually exist.
Entries are kept depth-major (all depth-1 blocks, then depth-2, ...) and
position-major inside a depth, so the concatenated K/V is contiguous along the
sequence axis and fits the ordinary additive-mask attention interface.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
import torch

from .errors import CacheConsistencyError, ContractError

NEG_INF = float("-inf")


class AttnCoord(NamedTuple):
    position: int
    depth: int


def accessible(query: AttnCoord, key: AttnCoord, key_exists: bool = True) -> bool:
    return bool(key_exists) and key.position <= query.position and key.depth <= query.depth


def build_mask(queries: list[AttnCoord], cache_index: list[AttnCoord], dtype=torch.float32) -> torch.Tensor:
    """Additive mask, 0 where accessible and -inf elsewhere. ``cache_index`` lists materialized entries."""
    if not queries:
        return torch.zeros((0, len(cache_index)), dtype=dtype)
    qp = torch.tensor([q.position for q in queries])
    qd = torch.tensor([q.depth for q in queries])
    if cache_index:
        kp = torch.tensor([k.position for k in cache_index])
        kd = torch.tensor([k.depth for k in cache_index])
    else:
        kp = kd = torch.zeros(0, dtype=torch.long)
    allowed = (kp[None, :] <= qp[:, None]) & (kd[None, :] <= qd[:, None])
    return additive(allowed, dtype)


def allowed_keys(
    q_pos: torch.Tensor, q_depth: torch.Tensor | int,
    k_pos: torch.Tensor, k_depth: torch.Tensor, k_valid: torch.Tensor,
) -> torch.Tensor:
    """Batched boolean accessibility, shape [B, m, N]."""
    if not torch.is_tensor(q_depth):
        q_depth = torch.full_like(q_pos, int(q_depth))
    return (
        k_valid[:, None, :]
        & (k_pos[:, None, :] <= q_pos[:, :, None])
        & (k_depth[:, None, :] <= q_depth[:, :, None])
    )


def additive(allowed: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    mask = torch.zeros(allowed.shape, dtype=dtype)
    return mask.masked_fill(~allowed, NEG_INF)


def attend(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor,
    q_valid: torch.Tensor | None = None, return_weights: bool = False,
):
    """Scaled dot-product attention with an additive mask.

    q: [..., m, dh], k/v: [..., N, dh], mask broadcastable to [..., m, N].
    A valid query row with no allowed key is a contract violation; invalid
    (padding) rows with no allowed key produce zeros.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    mask = mask.to(q.dtype)
    row_ok = torch.isfinite(mask).any(dim=-1)  # [..., m]
    if not bool(row_ok.all()):
        if q_valid is not None:
            bad = ~row_ok & _broadcast_valid(q_valid, row_ok)
        else:
            bad = ~row_ok
        if bool(bad.any()):
            raise ContractError("query row has no accessible key")
        mask = torch.where(row_ok[..., None], mask, torch.zeros_like(mask))
    scores = (q @ k.transpose(-1, -2)) * scale + mask
    weights = torch.softmax(scores, dim=-1)
    if not bool(row_ok.all()):
        weights = weights * row_ok[..., None].to(weights.dtype)
    out = weights @ v
    return (out, weights) if return_weights else out


def _broadcast_valid(q_valid: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # q_valid is [B, m]; rows are [B, H, m] or [B, m]
    while q_valid.dim() < like.dim():
        q_valid = q_valid.unsqueeze(1)
    return q_valid.expand_as(like)


@dataclass
class _Block:
    k: torch.Tensor  # [B, H, n, dh]
    v: torch.Tensor
    pos: torch.Tensor  # [B, n] long
    valid: torch.Tensor  # [B, n] bool


@dataclass
class CacheView:
    k: torch.Tensor
    v: torch.Tensor
    pos: torch.Tensor
    depth: torch.Tensor
    valid: torch.Tensor


class KVCache2D:
    """Per-layer key/value store tagged with (position, depth).

    One cache belongs to one session (a training step or a generation run).
    With ``audit=True`` every read records (layer, query depth, deepest depth
    present in the cache at that moment) in ``access_log``.
    """

    def __init__(self, num_layers: int, audit: bool = False):
        self.num_layers = num_layers
        self.blocks: list[dict[int, list[_Block]]] = [dict() for _ in range(num_layers)]
        self.audit = audit
        self.access_log: list[tuple[int, int, int]] = []

    def depths(self, layer: int = 0) -> list[int]:
        return sorted(self.blocks[layer])

    def max_depth(self, layer: int = 0) -> int:
        ds = [d for d, bl in self.blocks[layer].items() if any(bool(b.valid.any()) for b in bl)]
        return max(ds, default=0)

    def _depth_tensors(self, layer: int, depth: int) -> tuple[torch.Tensor, torch.Tensor] | None:
        bl = self.blocks[layer].get(depth)
        if not bl:
            return None
        return torch.cat([b.pos for b in bl], dim=1), torch.cat([b.valid for b in bl], dim=1)

    def contains(self, pos: torch.Tensor, depth: int, layer: int = 0) -> torch.Tensor:
        """Per-query flag: does entry (pos[b, i], depth) exist? Shape of ``pos``."""
        t = self._depth_tensors(layer, depth)
        if t is None:
            return torch.zeros_like(pos, dtype=torch.bool)
        kp, kv = t
        return ((pos[:, :, None] == kp[:, None, :]) & kv[:, None, :]).any(dim=-1)

    def depth_lengths(self, layer: int = 0) -> dict[int, torch.Tensor]:
        """Per-sequence count of materialized entries at each depth."""
        out = {}
        for d in self.depths(layer):
            _, kv = self._depth_tensors(layer, d)
            out[d] = kv.sum(dim=1)
        return out

    def require_ready(self, pos: torch.Tensor, valid: torch.Tensor, depth: int) -> None:
        """Check the cache holds what a depth-``depth`` pass over ``pos`` needs."""
        if depth > 1:
            have = self.contains(pos, depth - 1)
            if bool((valid & ~have).any()):
                raise CacheConsistencyError(f"depth-{depth} query lacks its depth-{depth - 1} entry")
        else:
            t = self._depth_tensors(0, 1)
            qmin = torch.where(valid, pos, torch.full_like(pos, 2**62)).min(dim=1).values
            if t is None:
                need = torch.where(qmin < 2**62, qmin, torch.zeros_like(qmin))
                if bool((need > 0).any()):
                    raise CacheConsistencyError("depth-1 entries for earlier positions are missing")
                return
            kp, kv = t
            earlier = (kv & (kp < qmin[:, None])).sum(dim=1)
            need = torch.where(qmin < 2**62, qmin, torch.zeros_like(qmin))
            if bool((earlier != need).any()):
                raise CacheConsistencyError("depth-1 entries for earlier positions are missing")
        if bool((valid & self.contains(pos, depth)).any()):
            raise CacheConsistencyError(f"entry already materialized at depth {depth}")

    def append(self, layer: int, depth: int, k, v, pos, valid) -> None:
        t = self._depth_tensors(layer, depth)
        if t is not None and bool(valid.any()):
            kp, kv = t
            last = torch.where(kv, kp, torch.full_like(kp, -1)).max(dim=1).values
            first = torch.where(valid, pos, torch.full_like(pos, 2**62)).min(dim=1).values
            if bool((first <= last).any()):
                raise CacheConsistencyError("positions within a depth must be strictly increasing")
        self.blocks[layer].setdefault(depth, []).append(_Block(k, v, pos, valid))

    def view(self, layer: int, max_depth: int) -> CacheView:
        """Concatenate depths 1..max_depth, depth-major."""
        if self.audit:
            self.access_log.append((layer, max_depth, self.max_depth(layer)))
        ks, vs, ps, ds, ms = [], [], [], [], []
        for d in self.depths(layer):
            if d > max_depth:
                continue
            for b in self.blocks[layer][d]:
                ks.append(b.k)
                vs.append(b.v)
                ps.append(b.pos)
                ds.append(torch.full_like(b.pos, d))
                ms.append(b.valid)
        if not ks:
            raise CacheConsistencyError("empty cache view")
        return CacheView(
            torch.cat(ks, dim=2), torch.cat(vs, dim=2), torch.cat(ps, dim=1),
            torch.cat(ds, dim=1), torch.cat(ms, dim=1),
        )

    def index(self, batch: int = 0, layer: int = 0) -> list[AttnCoord]:
        """Materialized coordinates of one sequence, in storage order."""
        out = []
        for d in self.depths(layer):
            for b in self.blocks[layer][d]:
                for p, ok in zip(b.pos[batch].tolist(), b.valid[batch].tolist()):
                    if ok:
                        out.append(AttnCoord(p, d))
        return out


@dataclass
class AttentionRecord:
    layer: int
    depth: int
    weights: torch.Tensor  # [B, H, m, N]
    key_depth: torch.Tensor  # [B, N]
    key_valid: torch.Tensor  # [B, N]
    query_valid: torch.Tensor  # [B, m]


@contextmanager
def record_attention(model) -> Iterator[list[AttentionRecord]]:
    records: list[AttentionRecord] = []
    prev = model.attention_recorder
    model.attention_recorder = records.append
    try:
        yield records
    finally:
        model.attention_recorder = prev


def depth_mass_from_weights(weights: torch.Tensor, key_depth: torch.Tensor, query_valid: torch.Tensor) -> torch.Tensor:
    """Mean attention mass on depth-1 keys per head.

    weights [B, H, m, N], key_depth [B, N], query_valid [B, m] -> [H].
    """
    on_first = (key_depth == 1).to(weights.dtype)[:, None, None, :]
    mass = (weights * on_first).sum(dim=-1)  # [B, H, m]
    qv = query_valid[:, None, :].to(weights.dtype).expand_as(mass)
    count = qv.sum(dim=(0, 2))
    return (mass * qv).sum(dim=(0, 2)) / count.clamp_min(1)


@dataclass
class DepthMassReport:
    per_head: np.ndarray  # [L, H] fraction of depth-2-query attention on depth-1 keys
    per_head_deeper: np.ndarray  # [L, H] complementary mass on depth>=2 keys
    layer_mean: np.ndarray
    layer_std: np.ndarray
    queries: int = 0
    extra: dict = field(default_factory=dict)


def attention_depth_mass(model, tokens: torch.Tensor, pad_mask: torch.Tensor | None = None,
                         depths: torch.Tensor | None = None) -> DepthMassReport:
    """Fraction of attention weight depth-2 queries put on depth-1 keys, per layer and head.

    ``depths`` defaults to every token running to depth 2.
    """
    cfg = model.config
    if cfg.max_depth < 2:
        raise ContractError("attention depth mass needs max_depth >= 2")
    if pad_mask is None:
        pad_mask = torch.ones_like(tokens, dtype=torch.bool)
    if depths is None:
        depths = torch.full_like(tokens, 2)
    from .backbone import static_gate

    L, H = cfg.num_layers, cfg.num_heads
    sums = torch.zeros(L, H, dtype=torch.float64)
    deep = torch.zeros(L, H, dtype=torch.float64)
    counts = torch.zeros(L, dtype=torch.float64)
    with torch.no_grad(), record_attention(model) as recs:
        model.forward_trace(tokens, pad_mask, static_gate(depths))
    for r in recs:
        if r.depth != 2:
            continue
        n_q = float(r.query_valid.sum())
        if n_q == 0:
            continue
        first = depth_mass_from_weights(r.weights, r.key_depth, r.query_valid).double()
        total = r.weights.sum(dim=-1)  # [B, H, m]
        qv = r.query_valid[:, None, :].to(total.dtype)
        tot = (total * qv).sum(dim=(0, 2)).double() / n_q
        sums[r.layer] += first * n_q
        deep[r.layer] += (tot - first) * n_q
        counts[r.layer] += n_q
    if float(counts.min()) == 0:
        raise ContractError("no depth-2 queries in the batch")
    per_head = (sums / counts[:, None]).numpy()
    per_deep = (deep / counts[:, None]).numpy()
    return DepthMassReport(
        per_head=per_head,
        per_head_deeper=per_deep,
        layer_mean=per_head.mean(axis=1),
        layer_std=per_head.std(axis=1),
        queries=int(counts[0]),
    )
