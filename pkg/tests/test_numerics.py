import numpy as np
import pytest
import torch

import oracles
from tah.errors import ContractError, DimensionError, NumericError
from tah.numerics import (OptimConfig, Optimizer, backward, central_difference_grad, clip_grad_norm, dtype_name,
                          lr_multiplier, matmul, resolve_dtype, softmax)


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    got = matmul(torch.tensor(a), torch.tensor(b)).numpy()
    assert np.allclose(got, oracles.naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(torch.ones(2, 3), torch.ones(4, 2))


def test_softmax_is_stable_for_large_inputs():
    x = torch.tensor([1000.0, 1001.0, 999.0], dtype=torch.float64)
    p = softmax(x)
    assert torch.isfinite(p).all()
    assert torch.allclose(p, softmax(x - 1000.0))
    assert abs(float(p.sum()) - 1.0) < 1e-12


def test_softmax_rejects_nan_and_bad_axis():
    with pytest.raises(NumericError):
        softmax(torch.tensor([0.0, float("nan")]))
    with pytest.raises(DimensionError):
        softmax(torch.ones(2, 2), axis=2)


def test_backward_needs_scalar_tracked_loss():
    w = torch.ones(3, requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * 2)
    with pytest.raises(ContractError):
        backward(torch.tensor(1.0))
    backward((w ** 2).sum())
    assert torch.equal(w.grad, torch.full((3,), 2.0))


def test_central_difference_matches_autograd_and_restores_parameter():
    w = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    x = torch.randn(2, dtype=torch.float64)
    f = lambda: torch.tanh(w @ x).pow(2).sum()
    f().backward()
    before = w.detach().clone()
    fd = central_difference_grad(f, w, 1e-6)
    assert torch.equal(w.detach(), before)
    assert torch.allclose(fd, w.grad, atol=1e-8)


def test_schedule_warmup_and_floor():
    cfg = OptimConfig(warmup_fraction=0.1, min_lr_ratio=0.1)
    assert lr_multiplier(0, 100, cfg) == pytest.approx(0.1)
    assert lr_multiplier(9, 100, cfg) == pytest.approx(1.0)
    assert lr_multiplier(99, 100, cfg) > 0.1 - 1e-12
    assert lr_multiplier(10 ** 6, 100, cfg) == pytest.approx(0.1)
    assert lr_multiplier(5, 100, OptimConfig(schedule="constant")) == 1.0


def test_clip_grad_norm():
    p = torch.zeros(2, requires_grad=True)
    p.grad = torch.tensor([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert float(p.grad.norm()) == pytest.approx(1.0, rel=1e-5)
    p.grad = torch.tensor([float("inf"), 0.0])
    with pytest.raises(NumericError):
        clip_grad_norm([p], 1.0)


def test_optimizer_state_round_trip_gives_identical_updates():
    torch.manual_seed(0)
    w1 = torch.nn.Parameter(torch.randn(4, dtype=torch.float64))
    w2 = torch.nn.Parameter(w1.detach().clone())
    cfg = OptimConfig(lr=0.1, weight_decay=0.01)
    o1 = Optimizer([("w", w1)], cfg, 10)
    for _ in range(3):
        o1.zero_grad()
        (w1 ** 3).sum().backward()
        o1.step()
    w2.data.copy_(w1.data)
    o2 = Optimizer([("w", w2)], cfg, 10)
    o2.load_state_tensors(o1.state_tensors(), o1.step_count)
    for o, w in ((o1, w1), (o2, w2)):
        o.zero_grad()
        (w ** 3).sum().backward()
        o.step()
    assert torch.equal(w1, w2)


def test_dtype_names():
    assert resolve_dtype("float64") is torch.float64
    assert dtype_name(torch.float32) == "float32"
    with pytest.raises(DimensionError):
        resolve_dtype("float16")
