"""Reference, stage-1 (backbone) and stage-2 (decider) training.

All stages share one optimization loop: deterministic batch order keyed by
(seed, epoch), AdamW with warmup + cosine decay, periodic validation, best
checkpoint by validation loss, and resumable checkpoints carrying optimizer
moments and the data cursor.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import TaHModel, static_gate
from .checkpoint import Checkpoint, model_checkpoint, save_content_addressed, tensors_digest
from .config import ModelConfig, TrainConfig, to_dict
from .decider import IterationDecider, decider_accuracy, decider_loss_from_logits
from .errors import AlignmentError, ConfigError, ContractError, DivergenceError, EmptyCorpusError
from .numerics import Optimizer, backward
from .policy import IterationLabels, class_weights
from .tasks import Batch, TokenizedCorpus, batches, count_batches

log = logging.getLogger(__name__)


@dataclass
class TrainReport:
    stage: str
    policy: str
    records: list[dict[str, Any]] = field(default_factory=list)
    best_step: int | None = None
    best_val_loss: float | None = None
    best_checkpoint: str | None = None

    def add(self, rec: dict[str, Any]) -> None:
        self.records.append(rec)
        log.debug("%s", rec)

    def losses(self, split: str = "train") -> list[float]:
        return [r["loss"] for r in self.records if r["split"] == split]

    def val_curve(self) -> list[tuple[int, float | None]]:
        return [(r["step"], r.get("perplexity")) for r in self.records if r["split"] == "val"]

    @property
    def best_val_perplexity(self) -> float | None:
        return None if self.best_val_loss is None else math.exp(self.best_val_loss)

    def tokens_at_depth(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.records:
            if r["split"] == "train":
                for d, c in r.get("tokens_at_depth", {}).items():
                    out[int(d)] = out.get(int(d), 0) + c
        return out

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
            f.write(json.dumps({"split": "summary", "stage": self.stage, "policy": self.policy,
                                "best_step": self.best_step, "best_val_loss": self.best_val_loss,
                                "best_checkpoint": self.best_checkpoint}, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    model: TaHModel
    report: TrainReport
    decider: IterationDecider | None = None
    final: Checkpoint | None = None  # last optimizer/cursor state, for resuming
    checkpoints: list[Path] = field(default_factory=list)


# ---------------------------------------------------------------- the loop


@dataclass
class _Loop:
    named_params: list[tuple[str, torch.nn.Parameter]]
    batches_per_epoch: int
    stream: Callable[[int], Iterator[Any]]
    loss: Callable[[Any], tuple[torch.Tensor, dict[str, Any]]]
    evaluate: Callable[[], dict[str, Any] | None]
    state: Callable[[], dict[str, torch.Tensor]]
    load_state: Callable[[dict[str, torch.Tensor]], None]
    snapshot: Callable[[dict[str, Any], dict[str, torch.Tensor]], Checkpoint]
    lm: bool = True


def _optimize(loop: _Loop, cfg: TrainConfig, report: TrainReport, resume: Checkpoint | None,
              checkpoint_dir: str | Path | None, stem: str) -> tuple[Checkpoint, list[Path]]:
    if loop.batches_per_epoch <= 0:
        raise EmptyCorpusError("no training batches")
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * loop.batches_per_epoch
    if total <= 0:
        raise ConfigError("training needs at least one step")
    opt = Optimizer(loop.named_params, cfg.optim, total)
    step = epoch = cursor = 0
    best_state: dict[str, torch.Tensor] | None = None
    if resume is not None:
        meta = resume.header["meta"]
        if meta.get("stage") != cfg.stage:
            raise ContractError(f"cannot resume a {meta.get('stage')} checkpoint as {cfg.stage}")
        loop.load_state(resume.tensors)
        opt.load_state_tensors(resume.section("optim"), meta["step"])
        step, epoch, cursor = meta["step"], meta["epoch"], meta["batch"]
        report.records = [dict(r) for r in meta["records"]]
        report.best_step, report.best_val_loss = meta["best_step"], meta["best_val_loss"]
        best = {k: v.clone() for k, v in resume.section("best").items()}
        best_state = best or None
    saved: list[Path] = []

    def checkpoint() -> Checkpoint:
        meta = {"stage": cfg.stage, "policy": cfg.policy, "train": to_dict(cfg), "step": step,
                "epoch": epoch, "batch": cursor, "records": report.records,
                "best_step": report.best_step, "best_val_loss": report.best_val_loss}
        extra = {f"optim.{k}": v for k, v in opt.state_tensors().items()}
        if best_state is not None:
            extra.update({f"best.{k}": v for k, v in best_state.items()})
        return loop.snapshot(meta, extra)

    while step < total:
        for bi, batch in enumerate(loop.stream(epoch)):
            if bi < cursor:
                continue
            loss, stats = loop.loss(batch)
            if not torch.isfinite(loss):
                err = DivergenceError(f"non-finite loss at step {step + 1}")
                err.report = report
                raise err
            opt.zero_grad()
            backward(loss)
            gnorm = opt.step()
            step, cursor = step + 1, bi + 1
            value = loss.item()
            report.add({"step": step, "split": "train", "loss": value,
                        "perplexity": math.exp(min(value, 700.0)) if loop.lm else None,
                        "grad_norm": gnorm, **stats})
            if (cfg.eval_every and step % cfg.eval_every == 0) or step == total:
                ev = loop.evaluate()
                if ev is not None:
                    report.add({"step": step, "split": "val", **ev})
                    if report.best_val_loss is None or ev["loss"] < report.best_val_loss:
                        report.best_val_loss, report.best_step = ev["loss"], step
                        best_state = {k: v.detach().clone() for k, v in loop.state().items()}
            if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                saved.append(save_content_addressed(checkpoint_dir, f"{stem}-step{step}", checkpoint()))
            if step >= total:
                break
        else:
            epoch, cursor = epoch + 1, 0
            continue
        break
    final = checkpoint()
    if best_state is not None:
        loop.load_state(best_state)
    return final, saved


# ---------------------------------------------------------------- stage-1 losses


def policy_depths(policy: str, batch: Batch, d_max: int, labels: IterationLabels | None) -> torch.Tensor:
    B, n = batch.tokens.shape
    if policy == "standard":
        return torch.ones(B, n, dtype=torch.long)
    if policy == "always_think":
        return torch.full((B, n), d_max, dtype=torch.long)
    if labels is None:
        raise ContractError(f"policy {policy!r} needs oracle labels")
    return labels.depth_tensor(batch.indices, n).clamp(max=d_max)


def lm_loss(model: TaHModel, batch: Batch, depths: torch.Tensor, scheme: str = "token"):
    """Mean cross-entropy over supervised positions plus per-depth token counts.

    ``token`` scores each token only at its assigned depth; ``token_plus_latent``
    adds the cross-entropy of every depth the token passes through.
    """
    trace = model.forward_trace(batch.tokens, batch.pad_mask, static_gate(depths))
    mask = batch.loss_mask
    n_sup = max(int(mask.sum()), 1)

    def ce(logits):
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.targets.reshape(-1),
                               reduction="none").reshape(mask.shape)

    if scheme == "token":
        final = trace.final_logits()
        per = ce(final)
        loss = (per * mask).sum() / n_sup
        pred = final.argmax(-1)
    elif scheme == "token_plus_latent":
        loss = 0.0
        for r in trace.depths:
            loss = loss + (ce(r.logits) * (mask & r.active)).sum()
        loss = loss / n_sup
        pred = trace.final_logits().argmax(-1)
    else:
        raise ConfigError(f"unknown loss scheme {scheme!r}")
    counts = {str(r.depth): int(r.active.sum()) for r in trace.depths}
    correct = int(((pred == batch.targets) & mask).sum())
    return loss, {"tokens_at_depth": counts, "supervised": int(mask.sum()), "correct": correct}


def evaluate_lm(model: TaHModel, corpus: TokenizedCorpus, policy: str, labels: IterationLabels | None,
                batch_size: int, max_len: int, split: str = "val", scheme: str = "token") -> dict[str, Any] | None:
    """Validation loss / perplexity / next-token accuracy over supervised positions."""
    if not any(s == split and len(q) <= max_len for s, q in zip(corpus.splits, corpus.sequences)):
        return None
    total = correct = n = 0
    counts: dict[str, int] = {}
    was = model.training
    model.eval()
    with torch.no_grad():
        for b in batches(corpus, batch_size, max_len, seed=0, epoch=0, split=split, shuffle=False):
            depths = policy_depths(policy, b, model.config.max_depth, labels)
            loss, st = lm_loss(model, b, depths, scheme)
            total += float(loss) * max(st["supervised"], 1)
            n += st["supervised"]
            correct += st["correct"]
            for k, v in st["tokens_at_depth"].items():
                counts[k] = counts.get(k, 0) + v
    model.train(was)
    if n == 0:
        return None
    mean = total / n
    return {"loss": mean, "perplexity": math.exp(min(mean, 700.0)), "accuracy": correct / n,
            "tokens_at_depth": counts}


def _check_labels(labels: IterationLabels, corpus: TokenizedCorpus) -> None:
    expected = sum(max(len(s) - 1, 0) for s in corpus.sequences)
    if len(labels) != expected:
        raise AlignmentError(f"labels cover {len(labels)} positions, corpus has {expected}")
    labels.check_alignment(corpus)


def _lm_loop(model: TaHModel, corpus: TokenizedCorpus, labels, cfg: TrainConfig, scheme: str) -> _Loop:
    def snapshot(meta, extra):
        return model_checkpoint(model, meta=meta, extra=extra, kind=cfg.stage)

    def load_state(tensors):
        sec = {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}
        model.load_state_dict(sec or tensors)

    return _Loop(
        named_params=[(n, p) for n, p in model.named_parameters() if p.requires_grad],
        batches_per_epoch=count_batches(corpus, cfg.batch_size, cfg.max_len),
        stream=lambda epoch: batches(corpus, cfg.batch_size, cfg.max_len, cfg.seed, epoch),
        loss=lambda b: lm_loss(model, b, policy_depths(cfg.policy, b, model.config.max_depth, labels), scheme),
        evaluate=lambda: evaluate_lm(model, corpus, cfg.policy, labels, cfg.batch_size, cfg.max_len, "val", scheme),
        state=lambda: {f"backbone.{k}": v for k, v in model.state_dict().items()},
        load_state=load_state,
        snapshot=snapshot,
    )


def _finish(result: TrainResult, checkpoint_dir, stem: str, decider=None) -> TrainResult:
    if checkpoint_dir is not None:
        meta = {"stage": result.report.stage, "policy": result.report.policy,
                "best_step": result.report.best_step, "best_val_loss": result.report.best_val_loss}
        best = model_checkpoint(result.model, decider, meta=meta, kind=result.report.stage)
        path = save_content_addressed(checkpoint_dir, f"{stem}-best", best)
        result.report.best_checkpoint = path.name
        result.checkpoints.append(path)
    return result


def train_reference(corpus: TokenizedCorpus, cfg: TrainConfig, model_cfg: ModelConfig,
                    resume: Checkpoint | None = None, checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Single-pass next-token model used to label token difficulty."""
    if len(corpus) == 0:
        raise EmptyCorpusError("corpus has no sequences")
    cfg = replace(cfg, policy="standard", stage="reference")
    ref_cfg = replace(model_cfg, max_depth=1, lora_rank=0)
    model = TaHModel(ref_cfg, seed=cfg.seed)
    report = TrainReport("reference", "standard")
    final, saved = _optimize(_lm_loop(model, corpus, None, cfg, "token"), cfg, report, resume, checkpoint_dir,
                             "reference")
    return _finish(TrainResult(model, report, final=final, checkpoints=saved), checkpoint_dir, "reference")


def _stage1(corpus, labels, cfg, model_cfg, init, resume, checkpoint_dir, scheme) -> TrainResult:
    if len(corpus) == 0:
        raise EmptyCorpusError("corpus has no sequences")
    if cfg.policy in ("oracle", "token_plus_latent"):
        if labels is None:
            raise ContractError(f"policy {cfg.policy!r} needs a bound label file")
        _check_labels(labels, corpus)
        if labels.d_max != model_cfg.max_depth:
            raise AlignmentError(f"labels are for d_max={labels.d_max}, model has {model_cfg.max_depth}")
    model = TaHModel(model_cfg, seed=cfg.seed)
    if init is not None and resume is None:
        copy_base_weights(init, model)
    report = TrainReport("backbone", cfg.policy)
    stem = f"backbone-{cfg.policy}"
    final, saved = _optimize(_lm_loop(model, corpus, labels, cfg, scheme), cfg, report, resume,
                             checkpoint_dir, stem)
    return _finish(TrainResult(model, report, final=final, checkpoints=saved), checkpoint_dir, stem)


def copy_base_weights(src: TaHModel, dst: TaHModel) -> None:
    """Initialize ``dst``'s shared weights from ``src`` (adapters keep their own init)."""
    src_state = src.state_dict()
    with torch.no_grad():
        for name, p in dst.base_parameters():
            if name not in src_state or src_state[name].shape != p.shape:
                raise ContractError(f"cannot initialize {name} from the reference")
            p.copy_(src_state[name])


def stage1_train(corpus: TokenizedCorpus, labels: IterationLabels | None, cfg: TrainConfig,
                 model_cfg: ModelConfig, init: TaHModel | None = None, resume: Checkpoint | None = None,
                 checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Backbone training: each token is scored only at its assigned depth.

    Policy ``oracle`` reads depths from ``labels``; ``standard`` and
    ``always_think`` use depth 1 and ``max_depth`` for every token.
    """
    if cfg.policy == "token_plus_latent":
        raise ConfigError("use stage1_token_plus_latent for the all-depth objective")
    return _stage1(corpus, labels, replace(cfg, stage="backbone"), model_cfg, init, resume, checkpoint_dir, "token")


def stage1_token_plus_latent(corpus: TokenizedCorpus, labels: IterationLabels, cfg: TrainConfig,
                             model_cfg: ModelConfig, init: TaHModel | None = None,
                             resume: Checkpoint | None = None,
                             checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Ablation: supervise every depth d <= oracle depth with equal weight."""
    cfg = replace(cfg, policy="token_plus_latent", stage="backbone")
    return _stage1(corpus, labels, cfg, model_cfg, init, resume, checkpoint_dir, "token_plus_latent")


# ---------------------------------------------------------------- stage 2


@dataclass
class DecisionSet:
    """One row per (token, depth) decision under oracle-guided execution."""

    features: torch.Tensor  # [N, 3h]
    labels: torch.Tensor  # [N] 1 = continue
    depth: torch.Tensor  # [N] depth at which the decision is taken
    seq_ids: np.ndarray
    positions: np.ndarray
    supervised: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def freeze(model: torch.nn.Module) -> torch.nn.Module:
    model.requires_grad_(False)
    model.eval()
    return model


def assert_frozen(model: torch.nn.Module) -> None:
    live = [n for n, p in model.named_parameters() if p.requires_grad]
    if live:
        raise ContractError(f"backbone is not frozen: {live[:3]}{'...' if len(live) > 3 else ''}")


def collect_decisions(backbone: TaHModel, corpus: TokenizedCorpus, labels: IterationLabels,
                      split: str | None, batch_size: int = 64, max_len: int = 10 ** 9) -> DecisionSet:
    """Tapped hidden states at every existing decision (d <= min(d_max-1, oracle depth))."""
    d_max = backbone.config.max_depth
    xs, ys, ds, sids, poss, sups = [], [], [], [], [], []
    sup_tab = {}
    for s, p, v in zip(labels.seq_ids.tolist(), labels.positions.tolist(), labels.supervised.tolist()):
        sup_tab[(s, p)] = v
    with torch.no_grad():
        try:
            stream = list(batches(corpus, batch_size, max_len, seed=0, epoch=0, split=split, shuffle=False))
        except EmptyCorpusError:
            stream = []
        for b in stream:
            n = b.tokens.shape[1]
            depths = labels.depth_tensor(b.indices, n).clamp(max=d_max)
            trace = backbone.forward_trace(b.tokens, b.pad_mask, static_gate(depths))
            has_target = torch.zeros_like(b.pad_mask)
            has_target[:, :-1] = b.pad_mask[:, 1:]
            rows = torch.tensor(b.indices)[:, None].expand(-1, n)
            cols = torch.arange(n)[None, :].expand(len(b.indices), -1)
            for d in range(1, d_max):
                res = trace.at(d)
                if res is None:
                    break
                sel = has_target & (depths >= d)
                xs.append(res.taps[sel])
                ys.append((depths > d)[sel].long())
                ds.append(torch.full((int(sel.sum()),), d, dtype=torch.long))
                r, c = rows[sel].numpy(), cols[sel].numpy()
                sids.append(r)
                poss.append(c)
                sups.append(np.array([sup_tab[(int(a), int(b_))] for a, b_ in zip(r, c)], dtype=bool))
    h3 = 3 * backbone.config.hidden_dim
    if not xs:
        return DecisionSet(torch.zeros(0, h3, dtype=backbone.dtype), torch.zeros(0, dtype=torch.long),
                           torch.zeros(0, dtype=torch.long), np.zeros(0, np.int64), np.zeros(0, np.int64),
                           np.zeros(0, bool))
    return DecisionSet(torch.cat(xs), torch.cat(ys), torch.cat(ds), np.concatenate(sids),
                       np.concatenate(poss), np.concatenate(sups))


def decision_weights(decisions: DecisionSet, w: np.ndarray) -> torch.Tensor:
    """Per-row continue weight ``w[depth-1]``."""
    return torch.as_tensor(w, dtype=decisions.features.dtype)[decisions.depth - 1]


def depth_class_weights(decisions: DecisionSet, d_max: int, max_weight: float) -> np.ndarray:
    out = np.ones(d_max - 1)
    for j in range(d_max - 1):
        at = decisions.depth == j + 1
        cont = int(decisions.labels[at].sum())
        stop = int(at.sum()) - cont
        if cont == 0:
            log.warning("no continue decisions at depth %d; weight clamped to %s", j + 1, max_weight)
            out[j] = max_weight if stop else 1.0
        elif stop == 0:
            out[j] = 1.0
        else:
            out[j] = min(stop / cont, max_weight)
    return out


def evaluate_decider(decider: IterationDecider, decisions: DecisionSet, threshold: float,
                     weights: np.ndarray | None = None) -> dict[str, Any]:
    with torch.no_grad():
        logits = decider.logits(decisions.features)
    c = torch.sigmoid(logits)
    acc = decider_accuracy(c.double().numpy(), decisions.labels.numpy(), threshold)
    w = decision_weights(decisions, weights if weights is not None else np.ones(1 + int(decisions.depth.max())))
    loss = float(decider_loss_from_logits(logits, decisions.labels, w))
    return {"loss": loss, "perplexity": None, "accuracy": acc.accuracy,
            "balanced_accuracy": acc.balanced_accuracy, "overthink": acc.overthink,
            "underthink": acc.underthink, "decisions": acc.total}


def stage2_train(corpus: TokenizedCorpus, labels: IterationLabels, backbone: TaHModel, cfg: TrainConfig,
                 resume: Checkpoint | None = None, checkpoint_dir: str | Path | None = None) -> TrainResult:
    """Fit the continuation decider on a frozen backbone.

    Decisions use the backbone's tapped hidden states under oracle-guided
    execution; the loss is the continue-reweighted BCE over every decision
    with d <= min(d_max-1, oracle depth).
    """
    cfg = replace(cfg, stage="decider")
    assert_frozen(backbone)
    d_max = backbone.config.max_depth
    if d_max < 2:
        raise ContractError("a decider needs max_depth >= 2")
    _check_labels(labels, corpus)
    before = tensors_digest(backbone.state_dict())
    train = collect_decisions(backbone, corpus, labels, "train", cfg.batch_size, cfg.max_len)
    val = collect_decisions(backbone, corpus, labels, "val", cfg.batch_size, cfg.max_len)
    if len(train) == 0:
        raise EmptyCorpusError("no decisions to train on")
    w = depth_class_weights(train, d_max, cfg.max_class_weight)
    row_w = decision_weights(train, w)
    decider = IterationDecider(backbone.config, seed=cfg.seed)
    n_batches = -(-len(train) // cfg.decider_batch)

    def stream(epoch):
        perm = torch.from_numpy(np.random.default_rng([cfg.seed, epoch]).permutation(len(train)))
        for s in range(0, len(train), cfg.decider_batch):
            yield perm[s:s + cfg.decider_batch]

    def loss(idx):
        logits = decider.logits(train.features[idx])
        value = decider_loss_from_logits(logits, train.labels[idx], row_w[idx])
        return value, {"decisions": len(idx)}

    def snapshot(meta, extra):
        meta = dict(meta, class_weights=w.tolist(), c_threshold=cfg.c_threshold)
        return model_checkpoint(backbone, decider, meta=meta, extra=extra, kind="decider")

    def load_state(tensors):
        sec = {k[len("decider."):]: v for k, v in tensors.items() if k.startswith("decider.")}
        decider.load_state_dict(sec)

    loop = _Loop(
        named_params=[(f"decider.{n}", p) for n, p in decider.named_parameters()],
        batches_per_epoch=n_batches, stream=stream, loss=loss,
        evaluate=lambda: evaluate_decider(decider, val, cfg.c_threshold, w) if len(val) else None,
        state=lambda: {f"decider.{k}": v for k, v in decider.state_dict().items()},
        load_state=load_state, snapshot=snapshot, lm=False,
    )
    report = TrainReport("decider", cfg.policy)
    final, saved = _optimize(loop, cfg, report, resume, checkpoint_dir, "decider")
    if tensors_digest(backbone.state_dict()) != before:
        raise ContractError("backbone parameters changed during decider training")
    result = TrainResult(backbone, report, decider=decider, final=final, checkpoints=saved)
    return _finish(result, checkpoint_dir, "decider", decider)
