from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from natimm import tensor as T
from natimm.errors import ContractError, DimensionError
from natimm.gradcheck import check_op, check_params
from natimm.tensor import Tensor, no_grad


def _r(rng, *shape, scale=1.0):
    return rng.normal(size=shape) * scale


# (name, fn, input factory); every fn maps float64 tensors to a scalar
OPS = [
    ("add_broadcast", lambda a, b: (a + b).sum(), lambda r: [_r(r, 3, 4), _r(r, 4)]),
    ("sub", lambda a, b: (a - b).sum(), lambda r: [_r(r, 2, 3), _r(r, 2, 3)]),
    ("mul_broadcast", lambda a, b: (a * b).sum(), lambda r: [_r(r, 3, 1), _r(r, 1, 5)]),
    ("div", lambda a, b: (a / b).sum(), lambda r: [_r(r, 3, 3), 2.0 + np.abs(_r(r, 3, 3))]),
    ("power", lambda a: T.power(a, 3.0).sum(), lambda r: [_r(r, 4)]),
    ("exp", lambda a: T.exp(a).sum(), lambda r: [_r(r, 5)]),
    ("log", lambda a: T.log(a).sum(), lambda r: [0.5 + np.abs(_r(r, 5))]),
    ("tanh", lambda a: T.tanh(a).sum(), lambda r: [_r(r, 5)]),
    ("relu", lambda a: (T.relu(a) * a).sum(), lambda r: [_r(r, 6) + np.sign(_r(r, 6)) * 0.1]),
    ("sigmoid", lambda a: T.sigmoid(a).sum(), lambda r: [_r(r, 5, scale=3)]),
    ("softplus", lambda a: T.softplus(a).sum(), lambda r: [_r(r, 5, scale=5)]),
    ("gelu", lambda a: T.gelu(a).sum(), lambda r: [_r(r, 7, scale=2)]),
    ("mean_axis", lambda a: (T.mean(a, axis=0) ** 2.0).sum(), lambda r: [_r(r, 3, 4)]),
    ("sum_keepdims", lambda a: (T.tsum(a, axis=1, keepdims=True) * a).sum(), lambda r: [_r(r, 3, 4)]),
    ("reshape_transpose", lambda a: (a.reshape(4, 3).transpose(1, 0) * np.arange(12.0).reshape(3, 4)).sum(), lambda r: [_r(r, 3, 4)]),
    ("getitem_basic", lambda a: (a[1:, ::2] ** 2.0).sum(), lambda r: [_r(r, 3, 4)]),
    ("getitem_repeat", lambda a: (a[np.array([0, 2, 0])] ** 2.0).sum(), lambda r: [_r(r, 3, 2)]),
    ("concat", lambda a, b: (T.concat([a, b], axis=1) ** 2.0).sum(), lambda r: [_r(r, 2, 3), _r(r, 2, 2)]),
    ("stack", lambda a, b: (T.stack([a, b]) * np.arange(6.0).reshape(2, 3)).sum(), lambda r: [_r(r, 3), _r(r, 3)]),
    ("matmul_2d", lambda a, b: ((a @ b) ** 2.0).sum(), lambda r: [_r(r, 3, 4), _r(r, 4, 2)]),
    ("matmul_batched_weight", lambda a, b: ((a @ b) ** 2.0).sum(), lambda r: [_r(r, 2, 3, 4), _r(r, 4, 2)]),
    ("matmul_batched_both", lambda a, b: ((a @ b) ** 2.0).sum(), lambda r: [_r(r, 2, 3, 4), _r(r, 2, 4, 5)]),
    ("softmax", lambda a: (T.softmax(a) * np.arange(5.0)).sum(), lambda r: [_r(r, 3, 5)]),
    ("softmax_masked", lambda a: (T.softmax(a, mask=np.tril(np.ones((4, 4), bool))) * np.arange(4.0)).sum(), lambda r: [_r(r, 4, 4)]),
    ("log_softmax", lambda a: (T.log_softmax(a) * np.arange(5.0)).sum(), lambda r: [_r(r, 3, 5)]),
    ("rms_norm", lambda x, w: (T.rms_norm(x, w) * np.arange(6.0)).sum(), lambda r: [_r(r, 3, 6), _r(r, 6)]),
    ("target_logprobs", lambda a: T.target_logprobs(a, np.array([1, 0, 4])).sum(), lambda r: [_r(r, 3, 5)]),
    ("cross_entropy", lambda a: T.softmax_cross_entropy(a, np.array([1, 0, 4]), np.array([0.5, 0.0, 2.0])), lambda r: [_r(r, 3, 5)]),
    ("embedding", lambda w: (T.embedding(w, np.array([2, 0, 2])) ** 2.0).sum(), lambda r: [_r(r, 4, 3)]),
    ("scatter_rows", lambda b, v: (T.scatter_rows(b, np.array([1, 3]), v) ** 2.0).sum(), lambda r: [_r(r, 5, 2), _r(r, 2, 2)]),
]


def _rope_fn(x):
    pos = np.array([0.0, 0.5, 1.75, 3.0])
    from natimm.positions import rotary_tables

    cos, sin = rotary_tables(pos, 6)
    return (T.rope(x, cos.astype(np.float64), sin.astype(np.float64)) * np.arange(24.0).reshape(4, 6)).sum()


OPS.append(("rope", _rope_fn, lambda r: [_r(r, 4, 6)]))


@pytest.mark.parametrize("name,fn,make", OPS, ids=[o[0] for o in OPS])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradients_match_finite_differences(name, fn, make, seed):
    report = check_op(fn, make(np.random.default_rng(seed)))
    assert report.ok, report.failures[:3]


def test_gelu_matches_tanh_formula(rng):
    x = rng.normal(size=50) * 3
    want = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, want, rtol=1e-12)


def test_softmax_masked_entries_are_exact_zeros(rng):
    mask = np.tril(np.ones((5, 5), bool))
    out = T.softmax(Tensor(rng.normal(size=(5, 5)).astype(np.float32)), mask=mask).data
    assert (out[~mask] == 0).all()
    np.testing.assert_allclose(out.sum(-1), 1, rtol=1e-6)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(4, 7)) * 10
    e = np.exp(x - x.max(-1, keepdims=True))
    np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(e / e.sum(-1, keepdims=True)), atol=1e-12)


def test_rms_norm_formula(rng):
    x, w = rng.normal(size=(3, 8)), rng.normal(size=8)
    want = x / np.sqrt((x**2).mean(-1, keepdims=True) + 1e-5) * w
    np.testing.assert_allclose(T.rms_norm(Tensor(x), Tensor(w)).data, want, rtol=1e-12)


def test_rope_equals_complex_rotation(rng):
    # channel pair (j, j + d/2) as one complex number, rotated by p * base^(-2j/d)
    d, pos = 8, np.array([0.0, 0.25, 7.5])
    x = rng.normal(size=(3, d))
    from natimm.positions import rotary_tables

    cos, sin = rotary_tables(pos, d)
    got = T.rope(Tensor(x), cos.astype(np.float64), sin.astype(np.float64)).data
    z = (x[:, : d // 2] + 1j * x[:, d // 2 :]) * np.exp(1j * pos[:, None] * 10000.0 ** (-2 * np.arange(d // 2) / d))
    np.testing.assert_allclose(got, np.concatenate([z.real, z.imag], axis=1), atol=1e-6)


def test_shared_subexpression_gradient():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x + x
    (y * y).sum().backward()
    # d/dx (x^2 + x)^2 = 2 (x^2 + x)(2x + 1)
    xv = x.data
    np.testing.assert_allclose(x.grad, 2 * (xv**2 + xv) * (2 * xv + 1))


def test_gradients_accumulate_until_zeroed():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    assert x.grad[0] == 6.0
    x.zero_grad()
    (x * 3.0).sum().backward()
    assert x.grad[0] == 3.0


def test_deep_chain_needs_no_recursion():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_backward_on_non_scalar_is_a_contract_error():
    with pytest.raises(ContractError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad and y.is_leaf


def test_cross_entropy_contract(rng):
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = np.array([1.0, 0.0, 2.0, 0.0])
    loss = T.softmax_cross_entropy(logits, np.array([1, 2, 3, 4]), w)
    loss.backward()
    assert (logits.grad[w == 0] == 0).all()
    assert T.softmax_cross_entropy(logits, np.zeros(4, int), np.zeros(4)).item() == 0.0
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(logits, np.array([0, 0, 0, 6]), w)
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(logits, np.zeros(4, int), -w)


def test_cross_entropy_uniform_logits_is_log_v():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 8))), np.array([1, 2, 3]), np.array([0.0, 1.0, 0.5]))
    assert abs(loss.item() - math.log(8)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(
    shapes=hnp.mutually_broadcastable_shapes(num_shapes=2, min_dims=1, max_dims=3, max_side=4),
    seed=st.integers(0, 2**16),
)
def test_broadcast_gradients_sum_over_expanded_axes(shapes, seed):
    rng = np.random.default_rng(seed)
    a_shape, b_shape = shapes.input_shapes
    a = Tensor(rng.normal(size=a_shape), requires_grad=True)
    b = Tensor(rng.normal(size=b_shape), requires_grad=True)
    (a * b).sum().backward()
    full = np.broadcast_shapes(a_shape, b_shape)
    # oracle: d/da sum(a*b) = b broadcast to the result, summed back onto a's shape
    want = np.broadcast_to(b.data, full)
    for ax in range(len(full) - len(a_shape)):
        want = want.sum(axis=0)
    for ax, n in enumerate(a_shape):
        if n == 1:
            want = want.sum(axis=ax, keepdims=True)
    np.testing.assert_allclose(a.grad, want.reshape(a_shape), rtol=1e-12, atol=1e-12)


def test_check_params_reports_a_wrong_gradient():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def bad():
        out = T.exp(w)
        # corrupt the backward closure: claims d/dw exp(w) = 2 exp(w)
        orig = out._backward
        out._backward = lambda g: tuple(2 * x for x in orig(g))
        return out.sum()

    assert not check_params(bad, {"w": w}).ok
