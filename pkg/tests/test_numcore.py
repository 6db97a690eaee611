import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mminterleaved.numcore import (
    CHECK_DTYPE,
    DimensionError,
    EmptyLossError,
    EvaluationError,
    cross_entropy,
    gradcheck,
    layer_norm,
    linear,
    log_softmax,
    make_rng,
    randn,
    softmax,
    split_rng,
)

D = CHECK_DTYPE


def t(x):
    return torch.tensor(x, dtype=D)


# ------------------------------------------------------------------ rng


def test_rng_is_deterministic():
    a = make_rng(7).standard_normal(16)
    b = make_rng(7).standard_normal(16)
    assert np.array_equal(a, b)


def test_rng_is_philox():
    assert type(make_rng(0).bit_generator).__name__ == "Philox"


def test_split_streams_are_independent_and_reproducible():
    s1 = [g.standard_normal(4) for g in split_rng(make_rng(3), 3)]
    s2 = [g.standard_normal(4) for g in split_rng(make_rng(3), 3)]
    assert all(np.array_equal(a, b) for a, b in zip(s1, s2))
    assert not np.array_equal(s1[0], s1[1])


# ------------------------------------------------------------------ linear


def test_linear_identity():
    assert torch.equal(linear(t([1.0, 0.0]), torch.eye(2, dtype=D), t([0.0, 0.0])), t([1.0, 0.0]))


def test_linear_zero_weight_returns_bias():
    assert torch.equal(linear(t([2.0, 3.0]), torch.zeros(2, 2, dtype=D), t([5.0, 7.0])), t([5.0, 7.0]))


def test_linear_matches_loop_oracle(rng):
    x, W, b = randn(rng, (3, 4), 1, D), randn(rng, (5, 4), 1, D), randn(rng, (5,), 1, D)
    out = linear(x, W, b)
    for i in range(3):
        for o in range(5):
            ref = float(b[o]) + sum(float(x[i, k]) * float(W[o, k]) for k in range(4))
            assert abs(float(out[i, o]) - ref) < 1e-12


def test_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        linear(torch.zeros(3), torch.zeros(2, 2))


# ------------------------------------------------------------------ softmax


def test_softmax_uniform():
    assert torch.allclose(softmax(torch.zeros(4, dtype=D)), torch.full((4,), 0.25, dtype=D), atol=0)


def test_softmax_large_logit_is_stable():
    out = softmax(t([1000.0, 0.0]))
    assert torch.isfinite(out).all() and abs(float(out[0]) - 1) < 1e-12 and float(out[1]) < 1e-300 + 1e-12


def test_softmax_closed_form():
    out = softmax(t([0.0, math.log(2), math.log(3)]))
    assert torch.allclose(out, t([1 / 6, 2 / 6, 3 / 6]), atol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        softmax(torch.zeros(3, 0))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(xs, c):
    x = t(xs)
    p = softmax(x)
    assert (p > 0).all()
    assert abs(float(p.sum()) - 1) < 1e-6
    assert torch.allclose(softmax(x + c), p, atol=1e-12, rtol=0)


def test_log_softmax_matches_log_of_softmax(rng):
    x = randn(rng, (4, 7), 3, D)
    assert torch.allclose(log_softmax(x), torch.log(softmax(x)), atol=1e-12)


def test_layer_norm_normalises(rng):
    x = randn(rng, (5, 9), 4, D)
    y = layer_norm(x, torch.ones(9, dtype=D), torch.zeros(9, dtype=D))
    assert torch.allclose(y.mean(-1), torch.zeros(5, dtype=D), atol=1e-12)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(5, dtype=D), atol=1e-5)


# ------------------------------------------------------------------ cross entropy


def test_cross_entropy_perfect_prediction():
    logits = torch.zeros(3, 5, dtype=D)
    targets = [1, 4, 0]
    for i, k in enumerate(targets):
        logits[i, k] = 1e6
    assert float(cross_entropy(logits, targets)) < 1e-6


def test_cross_entropy_uniform():
    assert abs(float(cross_entropy(torch.zeros(3, 256, dtype=D), [0, 5, 9])) - math.log(256)) < 1e-12


def test_cross_entropy_hand_computed_two_positions():
    logits = t([[1.0, 2.0, 0.0], [0.5, -1.0, 3.0]])
    expect = 0.0
    for row, k in ((logits[0], 1), (logits[1], 0)):
        z = sum(math.exp(float(v)) for v in row)
        expect += -(float(row[k]) - math.log(z))
    assert abs(float(cross_entropy(logits, [1, 0])) - expect / 2) < 1e-12


def test_cross_entropy_mask_and_empty():
    logits = t([[0.0, 5.0], [5.0, 0.0]])
    masked = cross_entropy(logits, [1, 1], [True, False])
    assert abs(float(masked) - float(cross_entropy(logits[:1], [1]))) < 1e-15
    with pytest.raises(EmptyLossError):
        cross_entropy(logits, [0, 1], [False, False])


# ------------------------------------------------------------------ gradcheck


def test_gradcheck_quadratic():
    x = t([1.0, 2.0, 3.0]).requires_grad_(True)
    rep = gradcheck(lambda p: (p["x"] ** 2).sum(), {"x": x}, tol=1e-8)
    assert rep.passed and rep.max_abs["x"] < 1e-8


def test_gradcheck_constant_function():
    x = t([1.0, 2.0])
    rep = gradcheck(lambda p: torch.tensor(3.0, dtype=D) + 0 * p["x"].sum(), {"x": x})
    assert rep.passed and rep.max_rel["x"] == 0


def test_gradcheck_two_layer_mlp_cross_entropy(rng):
    params = {
        "w1": randn(rng, (6, 4), 0.5, D), "b1": randn(rng, (6,), 0.1, D),
        "w2": randn(rng, (3, 6), 0.5, D), "b2": randn(rng, (3,), 0.1, D),
    }
    x = randn(rng, (5, 4), 1, D)
    y = [0, 2, 1, 1, 0]

    def f(p):
        h = torch.tanh(linear(x, p["w1"], p["b1"]))
        return cross_entropy(linear(h, p["w2"], p["b2"]), y)

    assert gradcheck(f, params, eps=1e-5, tol=1e-6).passed


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x ** 3).sum()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2 * x  # wrong on purpose (should be 3 x^2)


def test_gradcheck_detects_wrong_gradient():
    x = t([0.5, 1.5, -2.0])
    rep = gradcheck(lambda p: _WrongGrad.apply(p["x"]), {"x": x})
    assert not rep.passed


def test_gradcheck_requires_float64():
    with pytest.raises(TypeError):
        gradcheck(lambda p: p["x"].sum(), {"x": torch.ones(2)})


def test_gradcheck_non_finite():
    with pytest.raises(EvaluationError):
        gradcheck(lambda p: torch.log(p["x"] - 10).sum(), {"x": t([1.0])})


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients(seed):
    rng = make_rng(seed)
    x = randn(rng, (3, 5), 1, D)
    W = randn(rng, (4, 5), 1, D)
    b = randn(rng, (4,), 1, D)
    g = randn(rng, (4,), 1, D) + 1
    o = randn(rng, (4,), 1, D)
    tgt = [int(v) for v in rng.integers(0, 4, size=3)]
    w = randn(rng, (3, 4), 1, D)

    def f(p):
        y = linear(p["x"], p["W"], p["b"])
        s = (softmax(y) * w).sum() + (log_softmax(y) * w).sum()
        return s + (layer_norm(y, p["g"], p["o"]) * w).sum() + cross_entropy(y, tgt)

    rep = gradcheck(f, {"x": x, "W": W, "b": b, "g": g, "o": o}, eps=1e-5, tol=1e-6)
    assert rep.passed, str(rep)


def test_bit_identical_reruns():
    def run():
        rng = make_rng(11)
        x, W = randn(rng, (8, 8)), randn(rng, (8, 8))
        return softmax(linear(x, W))

    assert torch.equal(run(), run())
