import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from tah.decider import (IterationDecider, decide, decider_accuracy, decider_loss, decider_loss_from_logits,
                         should_continue)
from tah.errors import ConfigError, ContractError


def test_loss_examples():
    one = decider_loss(torch.tensor([0.5]), torch.tensor([1]), torch.tensor([9.0]))
    assert float(one) == pytest.approx(9 * math.log(2))
    sat = decider_loss(torch.tensor([1.0, 0.0]), torch.tensor([1, 0]), torch.tensor([3.0, 3.0]))
    assert float(sat) < 1e-5


def test_loss_matches_scalar_loop():
    g = torch.Generator().manual_seed(0)
    c = torch.rand(50, generator=g, dtype=torch.float64)
    y = (torch.rand(50, generator=g) < 0.3).long()
    w = torch.full((50,), 2.5, dtype=torch.float64)
    want = 0.0
    for ci, yi in zip(c.tolist(), y.tolist()):
        want += -(2.5 * yi * math.log(ci) + (1 - yi) * math.log(1 - ci))
    assert float(decider_loss(c, y, w)) == pytest.approx(want, rel=1e-12)
    logits = torch.logit(c)
    assert float(decider_loss_from_logits(logits, y, w)) == pytest.approx(want / 50, rel=1e-9)


def test_threshold_is_strict_and_capped():
    assert not bool(should_continue(torch.tensor(0.9), 0.9, 1, 2))
    assert bool(should_continue(torch.tensor(0.91), 0.9, 1, 2))
    assert not bool(should_continue(torch.tensor(0.99), 0.9, 2, 2))
    with pytest.raises(ContractError):
        should_continue(torch.tensor(0.5), 0.9, 0, 2)


def test_decide_single_and_batch():
    cfg = tiny_config()
    dec = IterationDecider(cfg, seed=0)
    taps = torch.randn(5, 3 * cfg.hidden_dim, dtype=torch.float64)
    c, cont = decide(taps, dec, 0.5, 1, 2)
    assert torch.equal(cont, c > 0.5)
    one = decide(taps[0], dec, 0.5, 1, 2)
    assert one.c_hat == pytest.approx(float(c[0])) and one.depth == 1
    assert one.action == ("continue" if one.c_hat > 0.5 else "verbalize")
    with pytest.raises(ConfigError):
        dec(torch.ones(4))


def test_threshold_monotone_on_fixed_inputs():
    cfg = tiny_config()
    dec = IterationDecider(cfg, seed=1)
    taps = torch.randn(200, 3 * cfg.hidden_dim, dtype=torch.float64) * 3
    counts = [int(decide(taps, dec, t, 1, 2)[1].sum()) for t in np.linspace(0, 1, 11)]
    assert counts == sorted(counts, reverse=True)


def test_learns_separable_labels():
    cfg = tiny_config()
    dec = IterationDecider(cfg, seed=2)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(256, 3 * cfg.hidden_dim, generator=g, dtype=torch.float64)
    y = (x[:, 0] > 0.8).long()
    w = torch.full((256,), float((y == 0).sum() / (y == 1).sum()), dtype=torch.float64)
    opt = torch.optim.Adam(dec.parameters(), lr=1e-2)
    first = None
    for _ in range(200):
        opt.zero_grad()
        loss = decider_loss_from_logits(dec.logits(x), y, w)
        first = first if first is not None else loss.item()
        loss.backward()
        opt.step()
    assert loss.item() < 0.1 * first


def test_accuracy_counts():
    perfect = decider_accuracy([0.95, 0.1, 0.99], [1, 0, 1], 0.9)
    assert perfect.accuracy == 1.0 and perfect.overthink == perfect.underthink == 0
    labels = np.array([0] * 94 + [1] * 6)
    stop = decider_accuracy(np.zeros(100), labels, 0.9)
    assert stop.accuracy == pytest.approx(0.94) and stop.balanced_accuracy == 0.5
    assert stop.underthink == 6 and stop.total == 100
    with pytest.raises(ContractError):
        decider_accuracy([], [], 0.5)
