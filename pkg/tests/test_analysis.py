from collections import Counter

import numpy as np
import pytest
import torch

import oracles
from conftest import tiny_config, with_random_lora
from tah.analysis import (PRESET_NOISE_GRID, fit_linear, flops_table, format_table, overthink_report, parse_sweep,
                          sensitivity_sweep, threshold_sweep, token_alternation_stats, transition_counts,
                          write_series)
from tah.backbone import TaHModel
from tah.decider import IterationDecider
from tah.errors import ConfigError, FitError
from tah.generation import AlwaysThink, GoldOracle, LabelPolicy, Standard, TokenEval, evaluate_policy
from tah.policy import label_corpus
from tah.tasks import build_corpus


def _setup():
    c = build_corpus("mod-chain", {"problems": 3}, 40, 0, 0.5)
    cfg = tiny_config(vocab_size=len(c.vocab))
    model = with_random_lora(TaHModel(cfg, seed=0), scale=0.5)
    ref = TaHModel(tiny_config(vocab_size=len(c.vocab), max_depth=1, lora_rank=0), seed=0)
    lab = label_corpus(ref, c, 2)
    # an untrained reference misses nearly everything; plant a 30% continue share instead
    hard = np.random.default_rng(0).random(len(lab)) < 0.3
    return c, model, lab.with_depths(np.where(lab.supervised & hard, 2, 1))


def _eval(top1, gold, depth, sup=None, inp=None):
    top1 = np.asarray(top1)
    n = len(gold)
    return TokenEval("x", np.zeros(n, np.int64), np.arange(n), np.asarray(inp if inp is not None else np.zeros(n)),
                     np.asarray(gold), np.ones(n, bool) if sup is None else np.asarray(sup), np.asarray(depth),
                     top1, np.full((n, 1), np.nan), np.ones_like(top1))


def test_transition_counts_by_hand():
    ev = _eval([[1, -1], [1, 2], [2, 1], [2, 2], [3, 3]], [1, 1, 1, 1, 1], [1, 2, 2, 2, 2])
    assert transition_counts(ev) == {"kept_correct": 1, "wrong_to_right": 1, "right_to_wrong": 1, "kept_wrong": 2}
    unsup = _eval([[1, 2]], [1], [2], sup=[False])
    assert sum(transition_counts(unsup).values()) == 0


def test_alternation_matches_brute_force():
    rng = np.random.default_rng(0)
    n = 300
    d1 = rng.integers(0, 4, n)
    d2 = rng.integers(0, 4, n)
    depth = rng.integers(1, 3, n)
    top1 = np.stack([d1, np.where(depth == 2, d2, -1)], 1)
    stats = token_alternation_stats(_eval(top1, rng.integers(0, 4, n), depth))
    for t in range(4):
        at = [i for i in range(n) if d1[i] == t]
        cont = [i for i in at if depth[i] == 2]
        assert stats[t].count == len(at) and stats[t].continued == len(cont)
        assert stats[t].transitions == dict(Counter(int(d2[i]) for i in cont))
        if cont:
            assert sum(stats[t].distribution().values()) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        token_alternation_stats(_eval(top1, d1, depth), by="bigram")


def test_fit_recovers_planted_coefficients():
    rng = np.random.default_rng(1)
    u, o = rng.uniform(0, 5, 12), rng.uniform(0, 25, 12)
    acc = -1.41 * u - 2.73 * o + 81.0
    fit = fit_linear(u, o, acc)
    ref = oracles.least_squares_3(u, o, acc)
    assert abs(fit.underthink + 1.41) < 1e-6 and abs(fit.overthink + 2.73) < 1e-6 and abs(fit.intercept - 81) < 1e-6
    assert np.allclose([fit.underthink, fit.overthink, fit.intercept], ref, atol=1e-6)
    noisy = acc + rng.normal(0, 0.5, 12)
    nf = fit_linear(u, o, noisy)
    assert np.allclose([nf.underthink, nf.overthink, nf.intercept], oracles.least_squares_3(u, o, noisy), atol=1e-6)


def test_fit_rejects_degenerate_designs():
    with pytest.raises(FitError):
        fit_linear([0, 1], [0, 1], [1, 2])
    with pytest.raises(FitError):
        fit_linear([0, 1, 2, 3], [0, 2, 4, 6], [1, 2, 3, 4])


def test_zero_noise_point_equals_oracle_accuracy():
    c, model, lab = _setup()
    res = sensitivity_sweep(model, c, lab, grid=[(0.0, 0.0)], seeds=[0, 1])
    direct = evaluate_policy(model, c, LabelPolicy(lab)).accuracy() * 100
    assert all(r.accuracy == direct for r in res.rows) and res.baseline_accuracy == direct
    assert res.fit is None


def test_preset_grid_runs_end_to_end():
    c, model, lab = _setup()
    res = sensitivity_sweep(model, c, lab, PRESET_NOISE_GRID, seeds=[0])
    assert len(res.rows) == len(PRESET_NOISE_GRID) and res.fit is not None
    table = res.table()
    assert [(r["underthink_%"], r["overthink_%"]) for r in table] == list(PRESET_NOISE_GRID)
    assert "accuracy_%" in format_table(table)


def test_overthink_report_and_threshold_sweep():
    c, model, _ = _setup()
    rep = overthink_report(model, c, {"standard": Standard(), "always_think": AlwaysThink(), "oracle": GoldOracle()})
    assert rep["oracle"]["right_to_wrong"] == 0
    assert rep["standard"]["wrong_to_right"] == rep["standard"]["right_to_wrong"] == 0
    with pytest.raises(ConfigError):
        overthink_report(TaHModel(tiny_config(max_depth=1, lora_rank=0), seed=0), c, {})
    dec = IterationDecider(model.config, seed=3)
    rows = threshold_sweep(model, dec, c, parse_sweep("0:1:11"))
    fr = [r["continue_fraction"] for r in rows]
    assert fr == sorted(fr, reverse=True)


def test_parse_sweep_and_series(tmp_path):
    assert parse_sweep("0.5:0.9:5") == pytest.approx([0.5, 0.6, 0.7, 0.8, 0.9])
    for bad in ("0.9", "a:b", "0.9:0.1", "0:2"):
        with pytest.raises(ConfigError):
            parse_sweep(bad)
    write_series(tmp_path / "s.tsv", {"x": [1, 2], "y": [0.5, 0.25]})
    assert (tmp_path / "s.tsv").read_text() == "x\ty\n1\t0.5\n2\t0.25\n"
    with pytest.raises(ConfigError):
        write_series(tmp_path / "t.tsv", {"x": [1], "y": []})


def test_flops_table_iteration_regimes():
    model = TaHModel(tiny_config(), seed=0)
    dec = IterationDecider(model.config, seed=0)
    with torch.no_grad():
        dec.layers[-1].bias.fill_(-30.0)
    rows = {r["policy"]: r for r in flops_table(model, [[1, 2], [3]], 6, dec)}
    assert rows["standard"]["mean_iterations"] == 1.0 and rows["always_think"]["mean_iterations"] == 2.0
    assert rows["always_think"]["ratio_vs_standard"] >= 2.0
    assert 1.0 <= rows["tah-decider"]["mean_iterations"] <= 1.3
