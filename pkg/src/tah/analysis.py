"""Diagnostics over teacher-forced evaluations: overthinking transitions,
token alternation, noisy-oracle sensitivity, threshold sweeps, FLOPs tables."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .backbone import TaHModel
from .decider import IterationDecider
from .errors import ConfigError, FitError
from .generation import (AlwaysThink, DeciderPolicy, FlopsModel, LabelPolicy, Policy, Standard, TokenEval,
                         evaluate_policy, generate)
from .policy import IterationLabels, perturb_policy
from .tasks import TokenizedCorpus, Vocabulary

TRANSITIONS = ("kept_correct", "wrong_to_right", "right_to_wrong", "kept_wrong")

# (underthink %, overthink %) points with the accuracy observed for each at scale
PRESET_NOISE_GRID = ((0.0, 0.0), (1.5, 8.5), (2.1, 12.9), (2.8, 0.0), (0.0, 22.1), (2.5, 17.5))
PRESET_NOISE_ACCURACY = (80.0, 55.4, 45.2, 78.0, 21.6, 27.1)


def transition_counts(ev: TokenEval) -> dict[str, int]:
    """Depth-1 vs final-depth top-1 against gold, over supervised positions."""
    s = ev.supervised
    first = ev.top1[s, 0] == ev.gold[s]
    last = ev.final_top1[s] == ev.gold[s]
    return {
        "kept_correct": int((first & last).sum()),
        "wrong_to_right": int((~first & last).sum()),
        "right_to_wrong": int((first & ~last).sum()),
        "kept_wrong": int((~first & ~last).sum()),
    }


def overthink_report(model: TaHModel, corpus: TokenizedCorpus, policies: dict[str, Policy],
                     split: str = "val", batch_size: int = 64) -> dict[str, dict[str, Any]]:
    if model.config.max_depth < 2:
        raise ConfigError("overthinking needs max_depth >= 2")
    out = {}
    for name, pol in policies.items():
        ev = evaluate_policy(model, corpus, pol, split, batch_size)
        out[name] = {**transition_counts(ev), **ev.summary()}
    return out


@dataclass
class TypeStats:
    count: int
    continued: int
    transitions: dict[int, int] = field(default_factory=dict)  # final top-1 -> count, over continued

    @property
    def rate(self) -> float:
        return self.continued / self.count if self.count else 0.0

    def distribution(self) -> dict[int, float]:
        return {k: v / self.continued for k, v in self.transitions.items()} if self.continued else {}


def token_alternation_stats(ev: TokenEval, by: str = "depth1_top1") -> dict[int, TypeStats]:
    """P(continue | type) and, for continued tokens, final top-1 given the type.

    The type is the depth-1 top-1 prediction (``by='depth1_top1'``) or the
    input token (``by='input'``).
    """
    if by == "depth1_top1":
        types = ev.top1[:, 0]
    elif by == "input":
        types = ev.input_token
    else:
        raise ConfigError(f"unknown token type key {by!r}")
    cont = ev.depth > 1
    final = ev.final_top1
    out: dict[int, TypeStats] = {}
    for t in np.unique(types):
        at = types == t
        st = TypeStats(int(at.sum()), int((at & cont).sum()))
        vals, counts = np.unique(final[at & cont], return_counts=True)
        st.transitions = {int(v): int(c) for v, c in zip(vals, counts)}
        out[int(t)] = st
    return out


def alternation_table(stats: dict[int, TypeStats], vocab: Vocabulary) -> list[dict[str, Any]]:
    rows = []
    for t, st in sorted(stats.items(), key=lambda kv: -kv[1].rate):
        top = sorted(st.distribution().items(), key=lambda kv: -kv[1])[:3]
        rows.append({"type": vocab.symbols[t], "count": st.count, "continue_rate": round(st.rate, 4),
                     "to": " ".join(f"{vocab.symbols[k]}:{p:.2f}" for k, p in top)})
    return rows


# ---------------------------------------------------------------- sensitivity


@dataclass
class LinearFit:
    underthink: float
    overthink: float
    intercept: float
    residuals: np.ndarray

    def predict(self, under, over):
        return self.underthink * np.asarray(under) + self.overthink * np.asarray(over) + self.intercept


def fit_linear(under, over, acc) -> LinearFit:
    """Least squares for acc = a*under + b*over + c."""
    under, over, acc = (np.asarray(x, dtype=np.float64) for x in (under, over, acc))
    X = np.column_stack([under, over, np.ones_like(under)])
    if X.shape[0] < 3 or np.linalg.matrix_rank(X) < 3:
        raise FitError("design matrix is singular: need >= 3 points not all collinear in (under, over)")
    coef, *_ = np.linalg.lstsq(X, acc, rcond=None)
    return LinearFit(float(coef[0]), float(coef[1]), float(coef[2]), acc - X @ coef)


@dataclass
class SensitivityRow:
    underthink: float  # requested, percent of decisions
    overthink: float
    seed: int
    realized_underthink: float
    realized_overthink: float
    accuracy: float  # percent


@dataclass
class SensitivityResult:
    rows: list[SensitivityRow]
    baseline_accuracy: float
    fit: LinearFit | None

    def table(self) -> list[dict[str, Any]]:
        out = []
        for (u, o) in dict.fromkeys((r.underthink, r.overthink) for r in self.rows):
            sel = [r for r in self.rows if (r.underthink, r.overthink) == (u, o)]
            out.append({"underthink_%": u, "overthink_%": o,
                        "realized_under_%": round(float(np.mean([r.realized_underthink for r in sel])), 3),
                        "realized_over_%": round(float(np.mean([r.realized_overthink for r in sel])), 3),
                        "accuracy_%": round(float(np.mean([r.accuracy for r in sel])), 3)})
        return out


def sensitivity_sweep(model: TaHModel, corpus: TokenizedCorpus, labels: IterationLabels,
                      grid: Iterable[tuple[float, float]] = PRESET_NOISE_GRID, seeds: Iterable[int] = (0,),
                      split: str = "val", batch_size: int = 64) -> SensitivityResult:
    """Accuracy under oracle depths with planted under/overthink errors.

    Rates are percentages of the split's supervised decisions. The zero
    point leaves the labels untouched and so reproduces the oracle run.
    """
    in_split = np.array([corpus.splits[s] == split for s in labels.seq_ids.tolist()]) if split else \
        np.ones(len(labels), dtype=bool)
    sel = in_split & labels.supervised
    base = evaluate_policy(model, corpus, LabelPolicy(labels), split, batch_size).accuracy() * 100
    rows = []
    for under, over in grid:
        for seed in seeds:
            res = perturb_policy(labels.depths[sel], labels.d_max, over / 100, under / 100, seed)
            depths = labels.depths.copy()
            depths[sel] = res.depths
            acc = evaluate_policy(model, corpus, LabelPolicy(labels.with_depths(depths)), split,
                                  batch_size).accuracy() * 100
            rows.append(SensitivityRow(under, over, seed, 100 * res.realized_underthink,
                                       100 * res.realized_overthink, acc))
    try:
        fit = fit_linear([r.realized_underthink for r in rows], [r.realized_overthink for r in rows],
                         [r.accuracy for r in rows])
    except FitError:
        fit = None
    return SensitivityResult(rows, base, fit)


# ---------------------------------------------------------------- threshold sweep and FLOPs


def parse_sweep(spec: str, default_points: int = 10) -> list[float]:
    """``lo:hi`` or ``lo:hi:n`` -> evenly spaced thresholds."""
    parts = spec.split(":")
    try:
        lo, hi = float(parts[0]), float(parts[1])
        n = int(parts[2]) if len(parts) > 2 else default_points
    except (IndexError, ValueError) as e:
        raise ConfigError(f"bad sweep {spec!r}; expected lo:hi[:n]") from e
    if not (0 <= lo <= hi <= 1) or n < 1:
        raise ConfigError("sweep needs 0 <= lo <= hi <= 1 and n >= 1")
    return [float(x) for x in np.linspace(lo, hi, n)]


def threshold_sweep(model: TaHModel, decider: IterationDecider, corpus: TokenizedCorpus,
                    thresholds: Iterable[float], split: str = "val", batch_size: int = 64) -> list[dict[str, float]]:
    rows = []
    for t in sorted(thresholds):
        ev = evaluate_policy(model, corpus, DeciderPolicy(decider, t), split, batch_size)
        rows.append({"threshold": t, "continue_fraction": ev.continue_fraction(), "accuracy": ev.accuracy(),
                     "mean_iterations": ev.mean_iterations()})
    return rows


def eval_flops(model: TaHModel, ev: TokenEval, decider_calls: bool) -> float:
    """Mean per-token FLOPs for a teacher-forced evaluation."""
    fm = FlopsModel.from_config(model.config)
    d_max = model.config.max_depth
    tot = 0
    for depth, vis in zip(ev.depth.tolist(), ev.visible.tolist()):
        tot += fm.token_flops(vis[:depth], min(depth, d_max - 1) if decider_calls else 0)
    return tot / max(len(ev.depth), 1)


def flops_table(model: TaHModel, prompts: list[list[int]], max_new_tokens: int,
                decider: IterationDecider | None = None, c_threshold: float = 0.9) -> list[dict[str, Any]]:
    """Per-token FLOPs and mean iterations of greedy generation under each policy."""
    policies: dict[str, Policy] = {"standard": Standard(), "always_think": AlwaysThink()}
    if decider is not None:
        policies["tah-decider"] = DeciderPolicy(decider, c_threshold)
    rows = []
    for name, pol in policies.items():
        flops = tokens = iters = 0.0
        for p in prompts:
            tr = generate(model, p, pol, max_new_tokens)
            flops += sum(r.flops for r in tr.records)
            tokens += len(tr.records)
            iters += sum(r.depth for r in tr.emitting)
        rows.append({"policy": name, "flops_per_token": flops / tokens,
                     "mean_iterations": iters / (len(prompts) * max_new_tokens)})
    base = rows[0]["flops_per_token"]
    for r in rows:
        r["ratio_vs_standard"] = r["flops_per_token"] / base
    return rows


# ---------------------------------------------------------------- text output


def format_table(rows: list[dict[str, Any]]) -> str:
    if not rows:
        return "(empty)\n"
    cols = list(rows[0])

    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    widths = {c: max(len(c), *(len(cell(r.get(c, ""))) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines += ["  ".join(cell(r.get(c, "")).ljust(widths[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def write_series(path: str | Path, columns: dict[str, list]) -> None:
    """Tab-separated x/y series with a header row, for external plotting."""
    names = list(columns)
    n = len(columns[names[0]])
    if any(len(v) != n for v in columns.values()):
        raise ConfigError("series columns differ in length")
    lines = ["\t".join(names)] + ["\t".join(repr(columns[c][i]) for c in names) for i in range(n)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
