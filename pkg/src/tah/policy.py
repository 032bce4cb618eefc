"""Oracle iteration labels from a frozen single-pass reference model.

Depths are 1-indexed: every token gets depth 1, and the continuation bit at
depth d is 1 exactly when a depth-(d+1) pass runs, so ``depth = 1 + sum(bits)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import AlignmentError, ContractError, DegenerateClassError
from .tasks import TokenizedCorpus, collate

log = logging.getLogger(__name__)


def oracle_depth_binary(ref_top1, gold, d_max: int = 2):
    """1 where the reference's top-1 is right, ``d_max`` (2 by default) where it is wrong."""
    ref_top1 = np.asarray(ref_top1)
    out = np.where(ref_top1 == np.asarray(gold), 1, d_max)
    return int(out) if out.ndim == 0 else out


def quantile_rank(losses) -> np.ndarray:
    """Empirical CDF: fraction of corpus losses <= each loss."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ContractError("quantile rank over an empty corpus")
    srt = np.sort(losses)
    return np.searchsorted(srt, losses, side="right") / losses.size


def oracle_depth_quantile(losses, d_max: int, boundaries=None) -> np.ndarray:
    """Monotone quantile binning of reference cross-entropy into depths 1..d_max.

    Default: ``clamp(floor(rank * d_max), 1, d_max)``. With ``boundaries``
    (ascending ranks b_1..b_{d_max-1}) the depth is ``1 + #{b_k <= rank}``.
    """
    if d_max < 2:
        raise ContractError("quantile labeling needs d_max >= 2")
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ContractError("quantile labeling over an empty corpus")
    if not np.isfinite(losses).all():
        raise ContractError("losses must be finite")
    rank = quantile_rank(losses)
    if boundaries is None:
        raw = np.floor(rank * d_max).astype(np.int64)
        return np.clip(raw, 1, d_max)
    b = np.asarray(boundaries, dtype=np.float64)
    if b.shape != (d_max - 1,) or np.any(np.diff(b) < 0):
        raise ContractError("boundaries must be d_max-1 ascending ranks")
    return 1 + (rank[:, None] >= b[None, :]).sum(axis=1)


def continuation_labels(depths, d_max: int) -> np.ndarray:
    """Bits [N, d_max-1]; column d-1 is 1 iff a depth-(d+1) pass runs."""
    depths = np.atleast_1d(np.asarray(depths, dtype=np.int64))
    if np.any(depths < 1) or np.any(depths > d_max):
        raise ContractError("depths must lie in [1, d_max]")
    d = np.arange(1, d_max)
    return (d[None, :] < depths[:, None]).astype(np.int64)


def depths_from_continuation(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    return 1 + bits.sum(axis=1)


def decision_mask(depths, d_max: int) -> np.ndarray:
    """Which (token, depth) decisions exist: depth d <= min(d_max - 1, d^pi)."""
    depths = np.atleast_1d(np.asarray(depths, dtype=np.int64))
    d = np.arange(1, d_max)
    return d[None, :] <= np.minimum(d_max - 1, depths)[:, None]


def class_weights(depths, d_max: int, max_weight: float = 100.0, strict: bool = False) -> np.ndarray:
    """Per-depth (#stop / #continue) over the decisions that exist at that depth."""
    depths = np.atleast_1d(np.asarray(depths, dtype=np.int64))
    bits = continuation_labels(depths, d_max)
    mask = decision_mask(depths, d_max)
    out = np.ones(d_max - 1)
    for j in range(d_max - 1):
        cont = int((bits[:, j] * mask[:, j]).sum())
        stop = int(((1 - bits[:, j]) * mask[:, j]).sum())
        if cont == 0:
            msg = f"no continue labels at depth {j + 1} ({stop} stop labels)"
            if strict:
                raise DegenerateClassError(msg)
            log.warning("%s; weight clamped to %s", msg, max_weight)
            out[j] = max_weight if stop else 1.0
        elif stop == 0:
            # a zero weight would silence every continue label
            log.warning("no stop labels at depth %d; continue weight set to 1", j + 1)
            out[j] = 1.0
        else:
            out[j] = min(stop / cont, max_weight)
    return out


@dataclass
class PerturbResult:
    depths: np.ndarray
    requested_overthink: float
    requested_underthink: float
    realized_overthink: float
    realized_underthink: float
    decisions: int


def perturb_policy(depths, d_max: int, overthink_rate: float, underthink_rate: float, seed: int) -> PerturbResult:
    """Flip oracle decisions to simulate an imperfect decider.

    Rates are fractions of *all* decisions: each stop flips to continue with
    probability ``overthink_rate * N / N_stop`` (and symmetrically for
    underthink), so the realized fractions match the requested ones in
    expectation. Depths are then re-read from the flipped bits, which keeps
    them monotone.
    """
    for r in (overthink_rate, underthink_rate):
        if not 0 <= r <= 1:
            raise ContractError("rates must lie in [0, 1]")
    depths = np.atleast_1d(np.asarray(depths, dtype=np.int64)).copy()
    bits = continuation_labels(depths, d_max)
    mask = decision_mask(depths, d_max)
    n = int(mask.sum())
    if n == 0:
        if overthink_rate or underthink_rate:
            raise ContractError("no decisions to perturb")
        return PerturbResult(depths, overthink_rate, underthink_rate, 0.0, 0.0, 0)
    stops = mask & (bits == 0)
    conts = mask & (bits == 1)
    n_stop, n_cont = int(stops.sum()), int(conts.sum())
    p_over = overthink_rate * n / n_stop if n_stop else (0.0 if overthink_rate == 0 else np.inf)
    p_under = underthink_rate * n / n_cont if n_cont else (0.0 if underthink_rate == 0 else np.inf)
    if p_over > 1 or p_under > 1:
        raise ContractError(
            f"infeasible rates: need {overthink_rate * n:.0f} of {n_stop} stops and "
            f"{underthink_rate * n:.0f} of {n_cont} continues"
        )
    rng = np.random.default_rng(seed)
    u = rng.random(bits.shape)
    flip_over = stops & (u < p_over)
    flip_under = conts & (u < p_under)
    new_depths = depths.copy()
    for i in range(len(depths)):
        d = 1
        for j in range(d_max - 1):
            if mask[i, j]:
                go = bits[i, j] == 1
                if flip_over[i, j] or flip_under[i, j]:
                    go = not go
            else:
                # beyond the oracle's horizon an extra iteration stops by default
                go = False
            if not go:
                break
            d = j + 2
        new_depths[i] = d
    return PerturbResult(
        new_depths, overthink_rate, underthink_rate,
        float(flip_over.sum()) / n, float(flip_under.sum()) / n, n,
    )


@dataclass
class IterationLabels:
    """Per-token oracle labels for a corpus. Arrays are aligned by record."""

    d_max: int
    seq_ids: np.ndarray
    positions: np.ndarray  # input position i; the gold token is at i + 1
    gold: np.ndarray
    ref_top1: np.ndarray
    ref_ce: np.ndarray
    depths: np.ndarray
    supervised: np.ndarray

    def __len__(self) -> int:
        return len(self.depths)

    def continuation(self) -> np.ndarray:
        return continuation_labels(self.depths, self.d_max)

    def with_depths(self, depths) -> "IterationLabels":
        return IterationLabels(self.d_max, self.seq_ids, self.positions, self.gold, self.ref_top1,
                               self.ref_ce, np.asarray(depths, dtype=np.int64), self.supervised)

    def table(self) -> dict[int, dict[int, int]]:
        out: dict[int, dict[int, int]] = {}
        for s, p, d in zip(self.seq_ids.tolist(), self.positions.tolist(), self.depths.tolist()):
            out.setdefault(s, {})[p] = d
        return out

    def depth_tensor(self, batch_indices: list[int], n: int) -> torch.Tensor:
        """[B, n] depths for a batch; unlabeled slots get depth 1."""
        tab = self._table_cache()
        out = torch.ones(len(batch_indices), n, dtype=torch.long)
        for r, s in enumerate(batch_indices):
            if s < 0:
                continue
            row = tab.get(s)
            if row is None:
                raise AlignmentError(f"sequence {s} has no labels")
            pos, dep = row
            keep = pos < n
            out[r, pos[keep]] = dep[keep]
        return out

    def _table_cache(self):
        if getattr(self, "_tab", None) is None:
            tab = {}
            order = np.lexsort((self.positions, self.seq_ids))
            sid = self.seq_ids[order]
            bounds = np.flatnonzero(np.diff(sid)) + 1
            for chunk in np.split(order, bounds):
                if len(chunk):
                    tab[int(self.seq_ids[chunk[0]])] = (
                        torch.as_tensor(self.positions[chunk]), torch.as_tensor(self.depths[chunk]))
            self._tab = tab
        return self._tab

    def check_alignment(self, corpus: TokenizedCorpus) -> None:
        for s, p, g in zip(self.seq_ids.tolist(), self.positions.tolist(), self.gold.tolist()):
            if not 0 <= s < len(corpus):
                raise AlignmentError(f"label for unknown sequence {s}")
            seq = corpus.sequences[s]
            if not 0 <= p < len(seq) - 1 or seq[p + 1] != g:
                raise AlignmentError(f"label ({s}, {p}) does not match the corpus")


def label_corpus(
    reference, corpus: TokenizedCorpus, d_max: int, rule: str = "binary", boundaries=None,
    batch_size: int = 64,
) -> IterationLabels:
    """Score every next-token position with the frozen reference and assign oracle depths.

    Positions whose target is not supervised keep depth 1.
    """
    if reference.config.max_depth != 1:
        raise ContractError("the reference must be a single-pass (max_depth=1) model")
    cols = {k: [] for k in ("seq", "pos", "gold", "top1", "ce", "sup")}
    was_training = reference.training
    reference.eval()
    with torch.no_grad():
        order = list(range(len(corpus)))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            b = collate(corpus, idx)
            logits = reference(b.tokens, b.pad_mask).double()
            logp = torch.log_softmax(logits, dim=-1)
            top1 = logits.argmax(dim=-1)
            ce = -logp.gather(-1, b.targets[..., None])[..., 0]
            for r, si in enumerate(idx):
                L = len(corpus.sequences[si])
                for p in range(L - 1):
                    cols["seq"].append(si)
                    cols["pos"].append(p)
                    cols["gold"].append(int(b.targets[r, p]))
                    cols["top1"].append(int(top1[r, p]))
                    cols["ce"].append(float(ce[r, p]))
                    cols["sup"].append(bool(b.loss_mask[r, p]))
    reference.train(was_training)
    sup = np.array(cols["sup"], dtype=bool)
    gold = np.array(cols["gold"], dtype=np.int64)
    top1 = np.array(cols["top1"], dtype=np.int64)
    ce = np.array(cols["ce"], dtype=np.float64)
    depths = np.ones(len(gold), dtype=np.int64)
    if rule == "binary":
        depths[sup] = oracle_depth_binary(top1[sup], gold[sup], d_max)
    elif rule == "quantile":
        if sup.any():
            depths[sup] = oracle_depth_quantile(ce[sup], d_max, boundaries)
    else:
        raise ContractError(f"unknown labeling rule {rule!r}")
    return IterationLabels(d_max, np.array(cols["seq"], dtype=np.int64), np.array(cols["pos"], dtype=np.int64),
                           gold, top1, ce, depths, sup)


def write_labels(path: str | Path, labels: IterationLabels) -> None:
    bits = labels.continuation()
    with open(path, "w", encoding="utf-8") as f:
        for k in range(len(labels)):
            rec = {
                "sequence_id": int(labels.seq_ids[k]),
                "token_index": int(labels.positions[k]),
                "gold": int(labels.gold[k]),
                "ref_top1": int(labels.ref_top1[k]),
                "ref_ce": float(labels.ref_ce[k]),
                "oracle_depth": int(labels.depths[k]),
                "continuation": [int(b) for b in bits[k]],
                "supervised": bool(labels.supervised[k]),
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_labels(path: str | Path, d_max: int | None = None) -> IterationLabels:
    recs = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not recs:
        raise AlignmentError(f"{path} holds no labels")
    width = len(recs[0]["continuation"])
    d_max = d_max or width + 1
    depths = np.array([r["oracle_depth"] for r in recs], dtype=np.int64)
    bits = np.array([r["continuation"] for r in recs], dtype=np.int64).reshape(len(recs), width)
    if not np.array_equal(depths_from_continuation(bits), depths):
        raise AlignmentError("continuation bits disagree with oracle depths")
    col = lambda k, dt: np.array([r[k] for r in recs], dtype=dt)
    return IterationLabels(d_max, col("sequence_id", np.int64), col("token_index", np.int64), col("gold", np.int64),
                           col("ref_top1", np.int64), col("ref_ce", np.float64), depths,
                           col("supervised", bool))
