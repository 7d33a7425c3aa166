import math

import numpy as np
import pytest

from trackcluster.config import TrainConfig
from trackcluster.tinynn import (PARAM_ORDER, AdamW, ModelState, adamw_step, ema_update,
                                 forward, backward, gelu, gelu_grad, grad_check, init_adapter,
                                 load_checkpoint, lr_at, model_forward, save_checkpoint, softmax)

REFERENCE_SCHEDULE = TrainConfig(lr_peak=1e-4, lr_final=1e-5, lr_warmup_start=5e-6, warmup_epochs=5)


def normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def test_gelu_values():
    assert gelu(0.0) == 0.0
    assert abs(gelu(10.0) - 10.0) < 1e-6
    assert gelu(1.0) == pytest.approx(normal_cdf(1.0), abs=1e-15)
    assert gelu(1.0) == pytest.approx(0.8413447460685429, abs=1e-12)


def test_gelu_grad_matches_differences():
    x = np.linspace(-4, 4, 41)
    h = 1e-6
    num = (gelu(x + h) - gelu(x - h)) / (2 * h)
    np.testing.assert_allclose(gelu_grad(x), num, atol=1e-8)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0], 1.0), [0.5, 0.5])
    np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0]), 1.0), [1 / 6, 2 / 6, 3 / 6],
                               rtol=1e-14)
    v = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(softmax(v, 0.5), softmax(v + 7.0, 0.5), rtol=1e-13)


def test_softmax_large_inputs_do_not_overflow():
    p = softmax([1e4, 0.0, -1e4], 0.01)
    assert np.all(np.isfinite(p)) and p[0] == 1.0


def test_adapter_identity_at_init():
    x = np.array([0.5, -2.0, 3.0, 1.0])
    np.testing.assert_array_equal(model_forward(init_adapter(4), x, use_head=False), x)


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        forward(init_adapter(4), np.zeros(3), use_head=False)


def test_dropout_off_deterministic_and_p0():
    m = ModelState.create(6, 12, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal(6)
    a = model_forward(m.student, x)
    b = model_forward(m.student, x)
    np.testing.assert_array_equal(a, b)
    c = model_forward(m.student, x, dropout=True, rng=np.random.default_rng(2), p=0.0)
    np.testing.assert_array_equal(a, c)
    d = model_forward(m.student, x, dropout=True, rng=np.random.default_rng(2), p=0.5)
    assert not np.allclose(a, d)


def test_teacher_head_initialised_independently():
    m = ModelState.create(4, 8, np.random.default_rng(0))
    assert not np.allclose(m.student["head.W1"], m.teacher["head.W1"])
    np.testing.assert_array_equal(m.student["adapter.W"], m.teacher["adapter.W"])


def test_backward_against_differences():
    rng = np.random.default_rng(5)
    m = ModelState.create(5, 7, rng)
    X = rng.standard_normal((3, 5))
    W = rng.standard_normal((3, 5))

    def loss_fn(p):
        out, cache = forward(p, X)
        return float(np.sum(W * out) + 0.5 * np.sum(out ** 2)), backward(p, cache, W + out)

    rep = grad_check(loss_fn, m.student, h=1e-5, n_coords=150, rng=rng)
    assert rep.max_rel_error < 1e-6, rep


def test_adamw_zero_grad_no_decay():
    p = {"w": np.array([1.0, -2.0])}
    opt = AdamW(weight_decay=0.0)
    opt.step(p, {"w": np.zeros(2)}, 0.1, keys=["w"])
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    np.testing.assert_array_equal(opt.m["w"], 0.0)
    np.testing.assert_array_equal(opt.v["w"], 0.0)


def test_adamw_first_step_unit_normalised():
    # m = 0.1, v = 0.001; bias correction gives mhat = vhat = 1, step = lr / (1 + eps)
    p = {"w": np.array([1.0])}
    adamw_step(AdamW(betas=(0.9, 0.999), weight_decay=0.0), p, {"w": np.array([1.0])}, 0.1,
               keys=["w"])
    assert p["w"][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-8)


def test_adamw_decoupled_decay():
    p = {"w": np.array([2.0])}
    AdamW(weight_decay=0.5).step(p, {"w": np.array([0.0])}, 0.1, keys=["w"])
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_adamw_rejects_non_finite():
    p = {"head.W1": np.ones(2)}
    with pytest.raises(FloatingPointError, match="head.W1"):
        AdamW().step(p, {"head.W1": np.array([np.nan, 0.0])}, 0.1)


def test_lr_schedule_reference_values():
    total = 30
    assert lr_at(REFERENCE_SCHEDULE, 5, total) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(REFERENCE_SCHEDULE, total, total) == pytest.approx(1e-5, rel=1e-12)
    increment = (1e-4 - 5e-6) / 5
    assert lr_at(REFERENCE_SCHEDULE, 1, total) == pytest.approx(5e-6 + increment, rel=1e-12)
    warm = [lr_at(REFERENCE_SCHEDULE, e, total) for e in range(1, 6)]
    assert all(a < b for a, b in zip(warm, warm[1:]))


def test_lr_schedule_continuous_and_decreasing_after_warmup():
    total = 10
    rates = [lr_at(REFERENCE_SCHEDULE, e, total) for e in range(5, total + 1)]
    assert rates[0] == pytest.approx(1e-4)
    assert all(a > b for a, b in zip(rates, rates[1:]))
    with pytest.raises(ValueError):
        lr_at(REFERENCE_SCHEDULE, 0, total)


def test_ema_examples():
    t = {"w": np.zeros(3)}
    s = {"w": np.ones(3)}
    np.testing.assert_array_equal(ema_update(t, s, 1.0)["w"], 0.0)
    np.testing.assert_array_equal(ema_update(t, s, 0.0)["w"], 1.0)
    np.testing.assert_allclose(ema_update(t, s, 0.99)["w"], 0.01, rtol=1e-12)
    with pytest.raises(ValueError):
        ema_update(t, {"w": np.ones(2)}, 0.5)


def test_grad_check_quadratic_and_negative_control():
    w = {"head.W1": np.random.default_rng(0).standard_normal((4, 3))}

    def good(p):
        return float(np.sum(p["head.W1"] ** 2)), {"head.W1": 2 * p["head.W1"]}

    def bad(p):
        g = 2 * p["head.W1"]
        g[1, 2] += 1.0
        return float(np.sum(p["head.W1"] ** 2)), {"head.W1": g}

    assert grad_check(good, w, h=1e-5).max_rel_error < 1e-8
    rep = grad_check(bad, w, h=1e-5, tol=1e-4)
    assert not rep.passed and rep.worst[:2] == ("head.W1", 5)


def test_checkpoint_round_trip(tmp_path):
    m = ModelState.create(4, 8, np.random.default_rng(0), teacher_temp=0.07)
    m.center = np.array([0.1, 0.2, 0.3, 0.4])
    save_checkpoint(m, tmp_path / "model.bin")
    back = load_checkpoint(tmp_path / "model.bin")
    assert back.teacher_temp == 0.07
    for k in PARAM_ORDER:
        np.testing.assert_array_equal(back.student[k], m.student[k].astype(np.float32))
        np.testing.assert_array_equal(back.teacher[k], m.teacher[k].astype(np.float32))
    np.testing.assert_array_equal(back.center, m.center.astype(np.float32))
