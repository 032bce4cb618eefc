"""Command-line pipeline: gen-data, train-ref, label, train-backbone,
train-decider, eval, analyze, generate, pipeline.

Every command works inside a run directory (``--out``; default
``$TAH_RUN_ROOT/seed<N>``, with ``runs`` as the root when the variable is
unset). Artifacts are content-addressed and recorded in ``state.json`` with a
hash of their inputs, so rerunning a command with identical inputs is a no-op
and a changed input produces a new artifact beside the old one.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any

from . import analysis as an
from .checkpoint import load, restore
from .config import RunConfig, TrainConfig, dumps, load_run_config, to_dict
from .errors import ConfigError, DependencyError, TahError
from .generation import (AlwaysThink, DeciderPolicy, GoldOracle, ReferenceOracle, Sampler, Standard,
                         evaluate_policy, generate)
from .numerics import seed_everything
from .policy import label_corpus, read_labels, write_labels
from .tasks import build_corpus, detokenize, read_corpus, tokenize, write_corpus
from .training import (freeze, stage1_token_plus_latent, stage1_train, stage2_train, train_reference)

log = logging.getLogger("tah")

EVAL_POLICIES = ("standard", "always_think", "tah-decider", "tah-oracle")


def _hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


class Run:
    """A run directory plus its artifact manifest."""

    def __init__(self, root: Path, cfg: RunConfig):
        self.root = root
        self.cfg = cfg
        root.mkdir(parents=True, exist_ok=True)
        (root / "checkpoints").mkdir(exist_ok=True)
        (root / "reports").mkdir(exist_ok=True)
        self.state_path = root / "state.json"
        self.state = json.loads(self.state_path.read_text()) if self.state_path.exists() else {"artifacts": {}}

    def echo_config(self, command: str) -> Path:
        text = dumps(self.cfg) + "\n"
        path = self.root / "config" / f"{command}-{hashlib.sha256(text.encode()).hexdigest()[:12]}.json"
        path.parent.mkdir(exist_ok=True)
        if not path.exists():
            path.write_text(text, encoding="utf-8")
        return path

    def artifact(self, name: str) -> Path:
        rec = self.state["artifacts"].get(name)
        if rec is None or not (self.root / rec["path"]).exists():
            raise DependencyError(f"missing artifact {name!r} in {self.root}; run the stage that produces it first")
        return self.root / rec["path"]

    def up_to_date(self, name: str, inputs: str) -> bool:
        rec = self.state["artifacts"].get(name)
        return bool(rec and rec["inputs"] == inputs and (self.root / rec["path"]).exists())

    def record(self, name: str, path: Path, inputs: str, **extra) -> None:
        self.state["artifacts"][name] = {"path": str(path.relative_to(self.root)), "inputs": inputs, **extra}
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.state, sort_keys=True, indent=2) + "\n")
        tmp.replace(self.state_path)

    def inputs_of(self, *names: str) -> list[str]:
        return [self.state["artifacts"][n]["path"] for n in names if n in self.state["artifacts"]]


# ---------------------------------------------------------------- config plumbing


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict[str, Any]:
    out: dict[str, Any] = {}

    def put(path: str, value: Any) -> None:
        node = out
        keys = path.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value

    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        put(k, _parse_value(v))
    if args.seed is not None:
        put("seed", args.seed)
        for k in ("task.seed", "reference.seed", "backbone.seed", "decider.seed"):
            put(k, args.seed)
    if getattr(args, "threshold", None) is not None:
        put("c_threshold", args.threshold)
        put("decider.c_threshold", args.threshold)
    if getattr(args, "max_depth", None) is not None:
        put("model.max_depth", args.max_depth)
    if getattr(args, "task", None):
        put("task.kind", args.task)
    if getattr(args, "count", None) is not None:
        put("task.count", args.count)
    if getattr(args, "knobs", None):
        put("task.knobs", _parse_value(args.knobs))
    if getattr(args, "val_fraction", None) is not None:
        put("task.validation_fraction", args.val_fraction)
    if getattr(args, "rule", None):
        put("label_rule", args.rule)
    return out


def _open_run(args, command: str) -> Run:
    cfg = load_run_config(args.config, _overrides(args))
    if args.out:
        root = Path(args.out)
    else:
        root = Path(os.environ.get("TAH_RUN_ROOT", "runs")) / f"seed{cfg.seed}"
    run = Run(root, cfg)
    path = run.echo_config(command)
    print(f"[{command}] run dir {root}; resolved config {path.name}")
    seed_everything(cfg.seed)
    return run


def _corpus(run: Run):
    corpus = read_corpus(run.artifact("corpus"))
    v = len(corpus.vocab)
    run.cfg.model = dataclasses.replace(run.cfg.model, vocab_size=v, lwe_top_k=min(run.cfg.model.lwe_top_k, v))
    return corpus


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    run = _open_run(args, "gen-data")
    t = run.cfg.task
    inputs = _hash(to_dict(t))
    if run.up_to_date("corpus", inputs):
        print(f"corpus up to date: {run.artifact('corpus')}")
        return 0
    corpus = build_corpus(t.kind, t.knobs, t.count, t.seed, t.validation_fraction)
    path = run.root / f"corpus-{inputs}.txt"
    write_corpus(path, corpus)
    run.record("corpus", path, inputs)
    n_val = len(corpus.indices("val"))
    print(f"wrote {path} ({len(corpus)} sequences, {corpus.num_tokens()} tokens, {n_val} validation)")
    return 0


def _train_stage(run: Run, name: str, inputs: str, fn, stem: str):
    """Run ``fn(resume, checkpoint_dir)`` unless an artifact with these inputs exists."""
    if run.up_to_date(name, inputs):
        print(f"{name} up to date: {run.artifact(name).name}")
        return None
    ckdir = run.root / "checkpoints" / f"{stem}-{inputs}"
    ckdir.mkdir(parents=True, exist_ok=True)
    resume = None
    partial = sorted(ckdir.glob(f"*-step*-*.tah"), key=lambda p: int(p.name.split("-step")[1].split("-")[0]))
    if partial:
        resume = load(partial[-1])
        print(f"resuming {name} from {partial[-1].name}")
    t0 = time.perf_counter()
    result = fn(resume, ckdir)
    best = result.checkpoints[-1]
    result.report.write(run.root / "reports" / f"{stem}-{inputs}.jsonl")
    run.record(name, best, inputs, best_step=result.report.best_step, best_val_loss=result.report.best_val_loss)
    print(f"{name}: best step {result.report.best_step}, val loss {result.report.best_val_loss}, "
          f"{time.perf_counter() - t0:.1f}s -> {best.relative_to(run.root)}")
    return result


def cmd_train_ref(args) -> int:
    run = _open_run(args, "train-ref")
    corpus = _corpus(run)
    cfg = run.cfg
    inputs = _hash([to_dict(cfg.model), to_dict(cfg.reference), run.inputs_of("corpus")])
    _train_stage(run, "reference", inputs,
                 lambda resume, d: train_reference(corpus, cfg.reference, cfg.model, resume, d), "reference")
    return 0


def cmd_label(args) -> int:
    run = _open_run(args, "label")
    corpus = _corpus(run)
    cfg = run.cfg
    inputs = _hash([cfg.label_rule, cfg.model.max_depth, run.inputs_of("corpus", "reference")])
    if run.up_to_date("labels", inputs):
        print(f"labels up to date: {run.artifact('labels').name}")
        return 0
    ref, _ = restore(load(run.artifact("reference")))
    labels = label_corpus(ref, corpus, cfg.model.max_depth, cfg.label_rule)
    path = run.root / f"labels-{inputs}.jsonl"
    write_labels(path, labels)
    run.record("labels", path, inputs)
    sup = labels.supervised
    print(f"wrote {path.name}: {len(labels)} positions, {(labels.depths[sup] > 1).mean():.3f} of supervised "
          f"and {(labels.depths > 1).mean():.3f} of all positions iterate")
    return 0


def _backbone(run: Run, corpus, policy: str):
    cfg = run.cfg
    tc = dataclasses.replace(cfg.backbone, policy=policy)
    needs_labels = policy in ("oracle", "token_plus_latent")
    deps = ("corpus", "reference") + (("labels",) if needs_labels else ())
    for d in deps:
        run.artifact(d)
    inputs = _hash([to_dict(cfg.model), to_dict(tc), run.inputs_of(*deps)])
    name = "backbone" if policy == "oracle" else f"backbone-{policy}"

    def fn(resume, ckdir):
        labels = read_labels(run.artifact("labels"), cfg.model.max_depth) if needs_labels else None
        ref = restore(load(run.artifact("reference")))[0] if tc.init_from_reference else None
        if policy == "token_plus_latent":
            return stage1_token_plus_latent(corpus, labels, tc, cfg.model, ref, resume, ckdir)
        return stage1_train(corpus, labels, tc, cfg.model, ref, resume, ckdir)

    _train_stage(run, name, inputs, fn, name)


def cmd_train_backbone(args) -> int:
    run = _open_run(args, "train-backbone")
    corpus = _corpus(run)
    _backbone(run, corpus, args.policy or run.cfg.backbone.policy)
    return 0


def cmd_train_decider(args) -> int:
    run = _open_run(args, "train-decider")
    corpus = _corpus(run)
    cfg = run.cfg
    inputs = _hash([to_dict(cfg.decider), run.inputs_of("corpus", "labels", "backbone")])

    def fn(resume, ckdir):
        backbone = freeze(restore(load(run.artifact("backbone")))[0])
        labels = read_labels(run.artifact("labels"), backbone.config.max_depth)
        return stage2_train(corpus, labels, backbone, cfg.decider, resume, ckdir)

    run.artifact("backbone")
    res = _train_stage(run, "decider", inputs, fn, "decider")
    if res is not None and res.report.records:
        last = [r for r in res.report.records if r["split"] == "val"]
        if last:
            print(f"decider held-out balanced accuracy {last[-1]['balanced_accuracy']:.3f}")
    return 0


def _models(run: Run):
    tah, decider = restore(load(run.artifact("backbone")))
    if "decider" in run.state["artifacts"]:
        _, decider = restore(load(run.artifact("decider")))
    ref = restore(load(run.artifact("reference")))[0]
    at = None
    if "backbone-always_think" in run.state["artifacts"]:
        at = restore(load(run.artifact("backbone-always_think")))[0]
    return ref, tah, decider, at


def _evaluate(run: Run, corpus, names) -> list[dict[str, Any]]:
    ref, tah, decider, at = _models(run)
    thr = run.cfg.c_threshold
    rows = []
    for name in names:
        if name == "standard":
            model, pol, label = ref, Standard(), "reference"
        elif name == "always_think":
            model, pol, label = (at, AlwaysThink(), "always_think baseline") if at is not None else \
                (tah, AlwaysThink(), "tah backbone")
        elif name == "tah-decider":
            if decider is None:
                raise DependencyError("missing artifact 'decider'; run train-decider first")
            model, pol, label = tah, DeciderPolicy(decider, thr), "tah backbone"
        else:
            model, pol, label = tah, GoldOracle(), "tah backbone"
        ev = evaluate_policy(model, corpus, pol, "val")
        rows.append({"policy": name, "model": label, "accuracy": ev.accuracy(),
                     "mean_iterations": ev.mean_iterations(), "continue_fraction": ev.continue_fraction(),
                     "flops_per_token": an.eval_flops(model, ev, isinstance(pol, DeciderPolicy)),
                     **an.transition_counts(ev)})
    return rows


def cmd_eval(args) -> int:
    run = _open_run(args, "eval")
    corpus = _corpus(run)
    names = EVAL_POLICIES if args.policy in (None, "all") else (args.policy,)
    rows = _evaluate(run, corpus, names)
    out = run.root / "reports" / f"eval-{_hash([names, run.cfg.c_threshold, sorted(run.state['artifacts'].items())])}.json"
    out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    cols = ("policy", "model", "accuracy", "mean_iterations", "continue_fraction", "flops_per_token")
    print(an.format_table([{c: r[c] for c in cols} for r in rows]), end="")
    return 0


def cmd_analyze(args) -> int:
    run = _open_run(args, "analyze")
    corpus = _corpus(run)
    ref, tah, decider, at = _models(run)
    thr = run.cfg.c_threshold
    outdir = run.root / "analysis"
    outdir.mkdir(exist_ok=True)
    sections = []

    policies = {"always_think": AlwaysThink(), "oracle": GoldOracle()}
    if decider is not None:
        policies["decider"] = DeciderPolicy(decider, thr)
    rep = an.overthink_report(tah, corpus, policies)
    rows = [{"model": "tah", "policy": k, **{t: v[t] for t in an.TRANSITIONS}, "accuracy": v["accuracy"]}
            for k, v in rep.items()]
    if at is not None:
        r = an.overthink_report(at, corpus, {"always_think": AlwaysThink()})["always_think"]
        rows.append({"model": "always_think", "policy": "always_think", **{t: r[t] for t in an.TRANSITIONS},
                     "accuracy": r["accuracy"]})
    sections.append(("overthinking transitions (depth-1 vs final top-1, supervised validation targets)", rows))

    if decider is not None:
        ev = evaluate_policy(tah, corpus, DeciderPolicy(decider, thr), "val")
        sections.append(("token alternation under the decider (type = depth-1 top-1)",
                         an.alternation_table(an.token_alternation_stats(ev), corpus.vocab)))
        sweep = an.threshold_sweep(tah, decider, corpus, an.parse_sweep(args.threshold_sweep or "0.5:0.99:10"))
        sections.append(("threshold sweep", sweep))
        an.write_series(outdir / "threshold_sweep.tsv", {k: [r[k] for r in sweep] for k in sweep[0]})

    val = corpus.indices("val") or list(range(len(corpus)))
    prompts = [corpus.sequences[i][:8] for i in val[:4]]
    sections.append(("generation FLOPs (greedy, 24 new tokens)", an.flops_table(tah, prompts, 24, decider, thr)))

    if args.noise_grid != "none":
        labels = read_labels(run.artifact("labels"), tah.config.max_depth)
        sens = an.sensitivity_sweep(tah, corpus, labels, an.PRESET_NOISE_GRID, seeds=range(args.noise_seeds))
        sections.append((f"oracle-with-noise sensitivity (baseline {sens.baseline_accuracy:.2f}%)", sens.table()))
        if sens.fit is not None:
            f = sens.fit
            sections.append(("linear fit accuracy ~ a*under + b*over + c",
                             [{"a_under": f.underthink, "b_over": f.overthink, "c": f.intercept,
                               "rms_residual": float((f.residuals ** 2).mean() ** 0.5)}]))
        tab = sens.table()
        an.write_series(outdir / "sensitivity.tsv", {k: [r[k] for r in tab] for k in tab[0]})

    text = "".join(f"## {title}\n{an.format_table(rows)}\n" for title, rows in sections)
    (outdir / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_generate(args) -> int:
    run = _open_run(args, "generate")
    corpus = _corpus(run)
    ref, tah, decider, at = _models(run)
    name = args.policy or "tah-decider"
    if name == "standard":
        model, pol = ref, Standard()
    elif name == "always_think":
        model, pol = (at or tah), AlwaysThink()
    elif name in ("tah-decider", "decider"):
        if decider is None:
            raise DependencyError("missing artifact 'decider'; run train-decider first")
        model, pol = tah, DeciderPolicy(decider, run.cfg.c_threshold)
    elif name in ("tah-oracle", "oracle"):
        model, pol = tah, ReferenceOracle(ref)
    else:
        raise ConfigError(f"unknown policy {name!r}")
    prompt = tokenize(args.prompt, corpus.vocab)
    sampler = Sampler(args.sampler, run.cfg.temperature if args.temperature is None else args.temperature)
    trace = generate(model, prompt, pol, args.max_new_tokens, sampler, seed=run.cfg.seed)
    tdir = run.root / "traces"
    tdir.mkdir(exist_ok=True)
    path = tdir / f"generate-{name}-{_hash([args.prompt, args.max_new_tokens, args.sampler, run.cfg.seed])}.jsonl"
    trace.write(path)
    print(args.prompt + detokenize(trace.tokens, corpus.vocab))
    print(f"mean iterations {trace.mean_iterations():.3f}; trace {path.relative_to(run.root)}")
    return 0


def cmd_pipeline(args) -> int:
    ns = argparse.Namespace(**vars(args))
    for k, v in (("policy", None), ("rule", None)):
        setattr(ns, k, getattr(ns, k, v))
    steps = [cmd_gen_data, cmd_train_ref, cmd_label]
    for s in steps:
        s(ns)
    run = _open_run(ns, "pipeline")
    corpus = _corpus(run)
    _backbone(run, corpus, "oracle")
    for b in run.cfg.baselines:
        _backbone(run, corpus, b)
    cmd_train_decider(ns)
    ns.policy = "all"
    cmd_eval(ns)
    cmd_analyze(ns)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tah", description="Selective latent iteration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; flags override its values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="run directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config field, e.g. --set model.dtype=\"float64\"")

    sp = sub.add_parser("gen-data", help="generate and tokenize a synthetic corpus")
    common(sp)
    sp.add_argument("--task", required=True, choices=("mod-chain", "copy", "brackets"))
    sp.add_argument("--count", required=True, type=int)
    sp.add_argument("--knobs", help="JSON object of task knobs")
    sp.add_argument("--val-fraction", type=float)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-ref", help="train the single-pass reference model")
    common(sp)
    sp.set_defaults(fn=cmd_train_ref)

    sp = sub.add_parser("label", help="derive oracle iteration labels from the reference")
    common(sp)
    sp.add_argument("--rule", choices=("binary", "quantile"))
    sp.add_argument("--max-depth", type=int)
    sp.set_defaults(fn=cmd_label)

    sp = sub.add_parser("train-backbone", help="stage 1: train the backbone under an iteration policy")
    common(sp)
    sp.add_argument("--policy", choices=("oracle", "standard", "always_think", "token_plus_latent"))
    sp.add_argument("--max-depth", type=int)
    sp.set_defaults(fn=cmd_train_backbone)

    sp = sub.add_parser("train-decider", help="stage 2: train the iteration decider on the frozen backbone")
    common(sp)
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(fn=cmd_train_decider)

    sp = sub.add_parser("eval", help="validation accuracy and iteration statistics per policy")
    common(sp)
    sp.add_argument("--policy", choices=EVAL_POLICIES + ("all",))
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("analyze", help="overthinking, alternation, FLOPs, threshold and noise sweeps")
    common(sp)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--threshold-sweep", metavar="LO:HI[:N]")
    sp.add_argument("--noise-grid", choices=("preset", "none"), default="preset")
    sp.add_argument("--noise-seeds", type=int, default=3)
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("generate", help="decode from a prompt and write a per-token trace")
    common(sp)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--max-new-tokens", type=int, default=32)
    sp.add_argument("--policy", choices=EVAL_POLICIES)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--sampler", choices=("greedy", "temperature", "nucleus"), default="greedy")
    sp.add_argument("--temperature", type=float)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("pipeline", help="gen-data -> train-ref -> label -> train-backbone -> train-decider "
                                         "-> eval -> analyze")
    common(sp)
    sp.add_argument("--task", choices=("mod-chain", "copy", "brackets"))
    sp.add_argument("--count", type=int)
    sp.add_argument("--knobs")
    sp.add_argument("--val-fraction", type=float)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--max-depth", type=int)
    sp.add_argument("--threshold-sweep", metavar="LO:HI[:N]")
    sp.add_argument("--noise-grid", choices=("preset", "none"), default="preset")
    sp.add_argument("--noise-seeds", type=int, default=3)
    sp.set_defaults(fn=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except TahError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
