"""Per-token dynamic-depth execution: iteration policies, autoregressive
generation with a shared depth cache, and teacher-forced evaluation."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .attention import KVCache2D
from .backbone import DepthStep, TaHModel, never_gate, sample
from .config import to_dict
from .decider import IterationDecider
from .errors import ConfigError, ContractError
from .tasks import TokenizedCorpus, batches


# ---------------------------------------------------------------- policies


class Policy:
    """Builds a gate for one forward block.

    ``context`` carries what the block knows: ``targets`` (teacher forcing),
    ``eligible`` (positions allowed to iterate), ``ref_top1``.
    """

    name = "policy"

    def gate(self, model: TaHModel, context: dict[str, torch.Tensor]):
        raise NotImplementedError


class Standard(Policy):
    name = "standard"

    def gate(self, model, context):
        return never_gate


class AlwaysThink(Policy):
    name = "always_think"

    def gate(self, model, context):
        return lambda step: step.valid.clone()


class Static(Policy):
    """Fixed per-token depths, indexed by (row, absolute position)."""

    name = "static"

    def __init__(self, depths: torch.Tensor):
        self.depths = depths

    def gate(self, model, context):
        depths = context.get("depths", self.depths)

        def g(step: DepthStep):
            assigned = depths.gather(1, step.positions.clamp(max=depths.shape[1] - 1))
            return assigned > step.depth

        return g


class DeciderPolicy(Policy):
    name = "decider"

    def __init__(self, decider: IterationDecider, c_threshold: float = 0.9):
        self.decider = decider
        self.c_threshold = c_threshold

    def gate(self, model, context):
        def g(step: DepthStep):
            with torch.no_grad():
                c = self.decider(step.taps)
            step.record["c_hat"] = c.to(step.y.dtype)
            return c > self.c_threshold

        return g


def _mismatch_gate(context, key: str):
    want = context[key]
    eligible = context.get("eligible")

    def g(step: DepthStep):
        top1 = step.logits.argmax(-1)
        cont = top1 != want.gather(1, step.index)
        if eligible is not None:
            cont = cont & eligible.gather(1, step.index)
        return cont

    return g


class GoldOracle(Policy):
    """Continue while the current depth's top-1 misses the gold next token (teacher forcing only)."""

    name = "oracle"

    def gate(self, model, context):
        if "targets" not in context:
            raise ContractError("the gold oracle needs teacher-forced targets")
        return _mismatch_gate(context, "targets")


class ReferenceOracle(Policy):
    """Continue while the current depth's top-1 differs from a reference model's top-1."""

    name = "oracle"

    def __init__(self, reference: TaHModel):
        self.reference = reference

    def gate(self, model, context):
        if "ref_top1" not in context:
            raise ContractError("reference predictions missing")
        return _mismatch_gate(context, "ref_top1")


def make_policy(name: str, decider: IterationDecider | None = None, c_threshold: float = 0.9,
                reference: TaHModel | None = None) -> Policy:
    if name == "standard":
        return Standard()
    if name == "always_think":
        return AlwaysThink()
    if name in ("decider", "tah-decider"):
        if decider is None:
            raise ContractError("decider policy needs a trained decider")
        return DeciderPolicy(decider, c_threshold)
    if name in ("oracle", "tah-oracle"):
        return ReferenceOracle(reference) if reference is not None else GoldOracle()
    raise ConfigError(f"unknown policy {name!r}")


# ---------------------------------------------------------------- FLOPs


@dataclass
class FlopsModel:
    """Analytic forward FLOPs: 2 per multiply-accumulate.

    Per query and depth, every layer costs its weight matmuls (plus adapter
    matmuls at depth > 1) and 4*h*visible for attention scores and values.
    Each depth also pays the output head; a continuing token pays the top-K
    weighted embedding; every decider call pays its weight matmuls.
    Embedding lookups, norms and elementwise ops are free.
    """

    hidden: int
    mlp: int
    layers: int
    vocab: int
    lora_rank: int
    lora_targets: tuple[str, ...]
    top_k: int
    decider_macs: int

    @classmethod
    def from_config(cls, config) -> "FlopsModel":
        widths = (3 * config.hidden_dim,) + tuple(config.decider_widths) + (1,)
        macs = sum(a * b for a, b in zip(widths[:-1], widths[1:]))
        return cls(config.hidden_dim, config.mlp_dim, config.num_layers, config.vocab_size, config.lora_rank,
                   tuple(config.lora_targets), config.lwe_top_k, macs)

    def _shapes(self) -> dict[str, tuple[int, int]]:
        h, m = self.hidden, self.mlp
        return {"q": (h, h), "k": (h, h), "v": (h, h), "o": (h, h), "gate": (h, m), "up": (h, m), "down": (m, h)}

    def layer_weight_flops(self, depth: int) -> int:
        shapes = self._shapes()
        macs = sum(a * b for a, b in shapes.values())
        if depth > 1 and self.lora_rank:
            macs += sum(self.lora_rank * (shapes[t][0] + shapes[t][1]) for t in self.lora_targets)
        return 2 * macs

    def pass_flops(self, depth: int, visible: int) -> int:
        """One token through every layer at ``depth`` seeing ``visible`` keys, plus the head."""
        per_layer = self.layer_weight_flops(depth) + 4 * self.hidden * visible
        return self.layers * per_layer + 2 * self.hidden * self.vocab

    def continuation_flops(self) -> int:
        return 2 * self.top_k * self.hidden

    def decider_flops(self) -> int:
        return 2 * self.decider_macs

    def token_flops(self, visible: list[int], decisions: int) -> int:
        d = len(visible)
        total = sum(self.pass_flops(k + 1, v) for k, v in enumerate(visible))
        return total + (d - 1) * self.continuation_flops() + decisions * self.decider_flops()


# ---------------------------------------------------------------- generation


@dataclass
class PositionRecord:
    position: int
    input_token: int
    emitted: int | None  # token sampled from this position, None inside the prompt
    depth: int
    c_hat: list[float]
    top1: list[int]  # verbalized greedy candidate at every executed depth
    visible: list[int]  # accessible keys per executed depth
    decisions: int  # decider calls made for this position
    flops: int = 0
    cumulative_flops: int = 0
    wall: float = 0.0


@dataclass
class GenerationTrace:
    policy: str
    config: dict[str, Any]
    prompt: list[int]
    records: list[PositionRecord] = field(default_factory=list)

    @property
    def tokens(self) -> list[int]:
        return [r.emitted for r in self.records if r.emitted is not None]

    @property
    def emitting(self) -> list[PositionRecord]:
        return [r for r in self.records if r.emitted is not None]

    def mean_iterations(self) -> float:
        rows = self.emitting
        return float(np.mean([r.depth for r in rows])) if rows else 0.0

    def check(self, max_depth: int) -> None:
        last = -1
        for r in self.records:
            if not 1 <= r.depth <= max_depth or len(r.top1) != r.depth:
                raise ContractError(f"position {r.position}: depths must be 1..d with d <= {max_depth}")
            if r.cumulative_flops < last:
                raise ContractError("cumulative FLOPs decreased")
            last = r.cumulative_flops

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for k, r in enumerate(self.emitting):
                f.write(json.dumps({"index": k, "token": r.emitted, "position": r.position, "depths": r.depth,
                                    "c_hat": r.c_hat, "top1": r.top1, "visible": r.visible,
                                    "decisions": r.decisions, "flops": r.flops,
                                    "cumulative_flops": r.cumulative_flops}, sort_keys=True) + "\n")


@dataclass
class Sampler:
    rule: str = "greedy"
    temperature: float = 0.6
    top_p: float = 1.0


def _records_from_trace(trace, tokens, start: int, decider_on: bool, d_max: int) -> list[PositionRecord]:
    out = []
    n = tokens.shape[1]
    for j in range(n):
        depth = int(trace.final_depth[0, j])
        top1, vis, chat = [], [], []
        for r in trace.depths[:depth]:
            top1.append(int(r.logits[0, j].argmax()))
            vis.append(int(r.visible[0, j]))
            if "c_hat" in r.record:
                chat.append(float(r.record["c_hat"][0, j]))
        decisions = min(depth, d_max - 1) if decider_on else 0
        out.append(PositionRecord(start + j, int(tokens[0, j]), None, depth, chat, top1, vis, decisions))
    return out


def generate(model: TaHModel, prompt: list[int], policy: Policy, max_new_tokens: int,
             sampler: Sampler | None = None, seed: int = 0, stop_token: int | None = None) -> GenerationTrace:
    """Autoregressive decoding with per-token dynamic depth and a shared depth cache."""
    if not prompt:
        raise ContractError("prompt must be nonempty")
    cfg = model.config
    if len(prompt) + max_new_tokens > cfg.max_position:
        raise ContractError(f"prompt + {max_new_tokens} new tokens exceeds max_position={cfg.max_position}")
    if isinstance(policy, GoldOracle):
        raise ContractError("the gold oracle needs targets; use ReferenceOracle for generation")
    sampler = sampler or Sampler()
    gen = torch.Generator().manual_seed(seed)
    flops = FlopsModel.from_config(cfg)
    cache = KVCache2D(cfg.num_layers)
    ref_cache = KVCache2D(policy.reference.config.num_layers) if isinstance(policy, ReferenceOracle) else None
    out = GenerationTrace(policy.name, to_dict(cfg), list(prompt))
    decider_on = isinstance(policy, DeciderPolicy)
    block = torch.tensor([prompt], dtype=torch.long)
    pos = 0
    total = 0
    was = model.training
    model.eval()
    with torch.no_grad():
        for k in range(max_new_tokens):
            t0 = time.perf_counter()
            context: dict[str, torch.Tensor] = {}
            if ref_cache is not None:
                ref = policy.reference.forward_trace(block, None, never_gate, ref_cache, pos)
                context["ref_top1"] = ref.final_logits().argmax(-1)
            trace = model.forward_trace(block, None, policy.gate(model, context), cache, pos)
            recs = _records_from_trace(trace, block, pos, decider_on, cfg.max_depth)
            nxt = sample(trace.final_logits()[0, -1], sampler.rule, sampler.temperature, sampler.top_p, gen)
            recs[-1].emitted = nxt
            wall = (time.perf_counter() - t0) / len(recs)
            for r in recs:
                r.flops = flops.token_flops(r.visible, r.decisions)
                total += r.flops
                r.cumulative_flops = total
                r.wall = wall
            out.records.extend(recs)
            pos += block.shape[1]
            block = torch.tensor([[nxt]], dtype=torch.long)
            if stop_token is not None and nxt == stop_token:
                break
    model.train(was)
    return out


def flops_count(config, trace: GenerationTrace) -> tuple[int, list[int]]:
    """(total, per-position) FLOPs for a trace produced under ``config``."""
    if to_dict(config) != trace.config:
        raise ContractError("trace was produced by a different model configuration")
    flops = FlopsModel.from_config(config)
    per = [flops.token_flops(r.visible, r.decisions) for r in trace.records]
    return sum(per), per


# ---------------------------------------------------------------- teacher-forced evaluation


@dataclass
class TokenEval:
    """Per target position (aligned arrays) under one policy."""

    policy: str
    seq_ids: np.ndarray
    positions: np.ndarray
    input_token: np.ndarray
    gold: np.ndarray
    supervised: np.ndarray
    depth: np.ndarray
    top1: np.ndarray  # [N, d_max], -1 where the depth did not run
    c_hat: np.ndarray  # [N, d_max - 1], nan where no decider call
    visible: np.ndarray  # [N, d_max], 0 where the depth did not run

    @property
    def final_top1(self) -> np.ndarray:
        return self.top1[np.arange(len(self.depth)), self.depth - 1]

    def accuracy(self) -> float:
        s = self.supervised
        return float((self.final_top1[s] == self.gold[s]).mean()) if s.any() else float("nan")

    def continue_fraction(self) -> float:
        return float((self.depth > 1).mean()) if len(self.depth) else 0.0

    def mean_iterations(self) -> float:
        return float(self.depth.mean()) if len(self.depth) else 0.0

    def summary(self) -> dict[str, float]:
        return {"policy": self.policy, "accuracy": self.accuracy(), "continue_fraction": self.continue_fraction(),
                "mean_iterations": self.mean_iterations(), "tokens": int(len(self.depth)),
                "supervised": int(self.supervised.sum())}


def evaluate_policy(model: TaHModel, corpus: TokenizedCorpus, policy: Policy, split: str | None = "val",
                    batch_size: int = 64, max_len: int = 10 ** 9, eligible: str = "supervised") -> TokenEval:
    """Teacher-forced run of ``policy`` over every target position of ``split``.

    ``eligible='supervised'`` lets oracle policies iterate only on supervised
    targets (the labeling convention); ``'all'`` lifts that restriction.
    """
    d_max = model.config.max_depth
    cols: dict[str, list] = {k: [] for k in ("seq", "pos", "inp", "gold", "sup", "depth", "top1", "chat", "vis")}
    was = model.training
    model.eval()
    with torch.no_grad():
        for b in batches(corpus, batch_size, max_len, seed=0, epoch=0, split=split, shuffle=False):
            B, n = b.tokens.shape
            has_target = torch.zeros_like(b.pad_mask)
            has_target[:, :-1] = b.pad_mask[:, 1:]
            context = {"targets": b.targets, "eligible": b.loss_mask if eligible == "supervised" else has_target}
            if isinstance(policy, ReferenceOracle):
                context["ref_top1"] = policy.reference(b.tokens, b.pad_mask).argmax(-1)
            if isinstance(policy, Static):
                context["depths"] = policy.depths_for(b) if hasattr(policy, "depths_for") else policy.depths
            trace = model.forward_trace(b.tokens, b.pad_mask, policy.gate(model, context))
            top1 = torch.full((B, n, d_max), -1, dtype=torch.long)
            vis = torch.zeros((B, n, d_max), dtype=torch.long)
            chat = torch.full((B, n, max(d_max - 1, 1)), float("nan"), dtype=torch.float64)
            for r in trace.depths:
                top1[..., r.depth - 1] = torch.where(r.active, r.logits.argmax(-1), top1[..., r.depth - 1])
                vis[..., r.depth - 1] = torch.where(r.active, r.visible, vis[..., r.depth - 1])
                if "c_hat" in r.record and r.depth < d_max:
                    chat[..., r.depth - 1] = torch.where(r.active, r.record["c_hat"].double(), chat[..., r.depth - 1])
            sel = has_target
            rows = torch.tensor(b.indices)[:, None].expand(B, n)
            cols["seq"].append(rows[sel].numpy())
            cols["pos"].append(torch.arange(n)[None, :].expand(B, n)[sel].numpy())
            cols["inp"].append(b.tokens[sel].numpy())
            cols["gold"].append(b.targets[sel].numpy())
            cols["sup"].append(b.loss_mask[sel].numpy())
            cols["depth"].append(trace.final_depth[sel].numpy())
            cols["top1"].append(top1[sel].numpy())
            cols["chat"].append(chat[sel].numpy())
            cols["vis"].append(vis[sel].numpy())
    model.train(was)
    cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in cols.items()}
    return TokenEval(policy.name, cat["seq"].astype(np.int64), cat["pos"].astype(np.int64),
                     cat["inp"].astype(np.int64), cat["gold"].astype(np.int64), cat["sup"].astype(bool),
                     cat["depth"].astype(np.int64), cat["top1"].reshape(-1, d_max).astype(np.int64),
                     cat["chat"].reshape(-1, max(d_max - 1, 1)), cat["vis"].reshape(-1, d_max).astype(np.int64))


class LabelPolicy(Static):
    """Static depths read from oracle labels (optionally perturbed), per batch."""

    name = "oracle"

    def __init__(self, labels):
        super().__init__(torch.zeros(0))
        self.labels = labels

    def depths_for(self, batch) -> torch.Tensor:
        return self.labels.depth_tensor(batch.indices, batch.tokens.shape[1])


def trace_summary(trace: GenerationTrace) -> dict[str, Any]:
    rows = trace.emitting
    return {"policy": trace.policy, "tokens": len(rows), "mean_iterations": trace.mean_iterations(),
            "total_flops": trace.records[-1].cumulative_flops if trace.records else 0,
            "records": [asdict(r) for r in rows]}
