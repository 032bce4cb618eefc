import numpy as np
import pytest

import oracles
from conftest import tiny_config
from tah.backbone import TaHModel
from tah.errors import AlignmentError, ContractError, DegenerateClassError
from tah.policy import (IterationLabels, class_weights, continuation_labels, decision_mask, depths_from_continuation,
                        label_corpus, oracle_depth_binary, oracle_depth_quantile, perturb_policy, read_labels,
                        write_labels)
from tah.tasks import build_corpus


def test_binary_rule_examples_and_oracle():
    assert oracle_depth_binary(3, 3) == 1
    assert oracle_depth_binary(3, 4) == 2
    rng = np.random.default_rng(0)
    top1, gold = rng.integers(0, 5, 2000), rng.integers(0, 5, 2000)
    assert oracle_depth_binary(top1, gold).tolist() == oracles.binary_labels(top1, gold)


def test_quantile_rule_matches_counting_oracle():
    rng = np.random.default_rng(1)
    losses = np.round(rng.exponential(size=1000), 2)  # plenty of ties
    for d_max in (2, 3, 4):
        assert oracle_depth_quantile(losses, d_max).tolist() == oracles.quantile_labels(losses.tolist(), d_max)


def test_quantile_is_monotone_in_loss():
    rng = np.random.default_rng(2)
    losses = rng.normal(size=500)
    d = oracle_depth_quantile(losses, 3)
    order = np.argsort(losses, kind="stable")
    assert np.all(np.diff(d[order]) >= 0)


def test_quantile_custom_boundaries_and_errors():
    losses = np.arange(100.0)
    d = oracle_depth_quantile(losses, 3, boundaries=[0.9, 0.99])
    # rank of loss k is (k + 1) / 100
    assert np.bincount(d).tolist() == [0, 89, 9, 2]
    with pytest.raises(ContractError):
        oracle_depth_quantile(losses, 3, boundaries=[0.9])
    with pytest.raises(ContractError):
        oracle_depth_quantile([], 2)
    with pytest.raises(ContractError):
        oracle_depth_quantile([1.0, float("nan")], 2)


def test_continuation_bits():
    assert continuation_labels([1], 2).tolist() == [[0]]
    assert continuation_labels([2], 2).tolist() == [[1]]
    assert continuation_labels([3, 2, 1], 3).tolist() == [[1, 1], [1, 0], [0, 0]]
    assert depths_from_continuation(continuation_labels([3, 2, 1], 3)).tolist() == [3, 2, 1]
    with pytest.raises(ContractError):
        continuation_labels([0], 2)


def test_binary_rule_agrees_with_continuation_bit():
    rng = np.random.default_rng(3)
    top1, gold = rng.integers(0, 3, 300), rng.integers(0, 3, 300)
    d = oracle_depth_binary(top1, gold)
    assert np.array_equal(d, 1 + continuation_labels(d, 2)[:, 0])


def test_class_weights():
    assert class_weights([1] * 90 + [2] * 10, 2).tolist() == [9.0]
    assert class_weights([1] * 50 + [2] * 50, 2).tolist() == [1.0]
    d = np.array([1, 2, 3, 3, 2, 1, 1])
    # depth 1: 3 stop, 4 continue; depth 2 decisions exist for the 4 tokens with depth >= 2: 2 stop, 2 continue
    assert class_weights(d, 3).tolist() == [0.75, 1.0]
    assert decision_mask(d, 3).sum() == 7 + 4
    with pytest.raises(DegenerateClassError):
        class_weights([1, 1, 1], 2, strict=True)
    assert class_weights([1, 1, 1], 2, max_weight=50.0).tolist() == [50.0]


def test_perturb_identity_and_rates():
    rng = np.random.default_rng(4)
    d = np.where(rng.random(10_000) < 0.3, 2, 1)
    assert np.array_equal(perturb_policy(d, 2, 0, 0, 0).depths, d)
    r = perturb_policy(d, 2, 0.10, 0.0, seed=1)
    assert abs(r.realized_overthink - 0.10) <= 0.01 and r.realized_underthink == 0
    assert np.all(r.depths >= d)
    again = perturb_policy(d, 2, 0.10, 0.0, seed=1)
    assert np.array_equal(again.depths, r.depths)
    u = perturb_policy(d, 2, 0.0, 0.05, seed=2)
    assert np.all(u.depths <= d) and abs(u.realized_underthink - 0.05) <= 0.01


def test_perturb_infeasible_and_monotone():
    with pytest.raises(ContractError):
        perturb_policy([1, 1, 2], 2, 0.0, 0.9, 0)
    with pytest.raises(ContractError):
        perturb_policy([1], 2, 1.5, 0, 0)
    d = np.array([1, 2, 3] * 200)
    r = perturb_policy(d, 3, 0.1, 0.1, 5)
    bits = continuation_labels(r.depths, 3)
    assert np.all(bits[:, 1] <= bits[:, 0])


def _labels(rule="binary"):
    corpus = build_corpus("mod-chain", {"problems": 2}, 12, 0, 0.25)
    model = TaHModel(tiny_config(vocab_size=len(corpus.vocab), max_depth=1, lora_rank=0), seed=0)
    return corpus, label_corpus(model, corpus, 2, rule)


def test_label_corpus_leaves_unsupervised_at_depth_one():
    corpus, lab = _labels()
    assert len(lab) == sum(len(s) - 1 for s in corpus.sequences)
    assert np.all(lab.depths[~lab.supervised] == 1)
    sup = lab.supervised
    assert np.array_equal(lab.depths[sup], oracle_depth_binary(lab.ref_top1[sup], lab.gold[sup]))
    lab.check_alignment(corpus)
    _, q = _labels("quantile")
    assert set(np.unique(q.depths[q.supervised])) <= {1, 2}


def test_labels_file_round_trip(tmp_path):
    corpus, lab = _labels()
    p = tmp_path / "labels.jsonl"
    write_labels(p, lab)
    back = read_labels(p)
    for f in ("seq_ids", "positions", "gold", "ref_top1", "ref_ce", "depths", "supervised"):
        assert np.array_equal(getattr(back, f), getattr(lab, f)), f
    write_labels(tmp_path / "again.jsonl", back)
    assert (tmp_path / "again.jsonl").read_bytes() == p.read_bytes()


def test_alignment_errors(tmp_path):
    corpus, lab = _labels()
    bad = IterationLabels(2, lab.seq_ids.copy(), lab.positions, lab.gold, lab.ref_top1, lab.ref_ce,
                          lab.depths, lab.supervised)
    bad.seq_ids[0] = 999
    with pytest.raises(AlignmentError):
        bad.check_alignment(corpus)
    shifted = IterationLabels(2, lab.seq_ids, lab.positions, lab.gold + 1, lab.ref_top1, lab.ref_ce,
                              lab.depths, lab.supervised)
    with pytest.raises(AlignmentError):
        shifted.check_alignment(corpus)
    with pytest.raises(AlignmentError):
        lab.depth_tensor([len(corpus) + 5], 4)
    p = tmp_path / "l.jsonl"
    p.write_text('{"continuation": [1], "oracle_depth": 1, "sequence_id": 0, "token_index": 0, "gold": 1, '
                 '"ref_top1": 1, "ref_ce": 0.1, "supervised": true}\n')
    with pytest.raises(AlignmentError):
        read_labels(p)


def test_reference_must_be_single_pass():
    corpus = build_corpus("copy", None, 2, 0, 0.0)
    with pytest.raises(ContractError):
        label_corpus(TaHModel(tiny_config(vocab_size=len(corpus.vocab)), seed=0), corpus, 2)
