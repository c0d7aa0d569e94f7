"""Reverse-mode gradients against central finite differences, plus tape semantics."""

from __future__ import annotations

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mupdit import autodiff as ad
from mupdit.errors import ConfigError, NumericError, ShapeError, UsageError

CASES = 100
REL_TOL = 1e-4
H = 1e-6


def _loss_of(fn, arrays, probe):
    ts = [ad.Tensor(a.copy()) for a in arrays]
    return float(np.sum(fn(*ts).data * probe))


def check_grad(fn, arrays, rng) -> float:
    """Worst relative error between tape gradients and central differences."""
    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    tape = ad.Tape()
    with tape:
        out = fn(*ts)
        probe = rng.standard_normal(out.shape)
        loss = ad.sum_all(ad.mul(out, ad.Tensor(probe))) if out.data.ndim else ad.scale(out, float(probe))
    ad.backward(loss, tape)
    worst = 0.0
    for i, a in enumerate(arrays):
        fd = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][j] += H
            minus[i][j] -= H
            fd[j] = (_loss_of(fn, plus, probe) - _loss_of(fn, minus, probe)) / (2 * H)
        g = ts[i].grad if ts[i].grad is not None else np.zeros_like(a)
        scale = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-3)
        worst = max(worst, float(np.linalg.norm(g - fd) / scale))
    return worst


def _shape(rng, lo=1, hi=4, rank=None):
    rank = rank if rank is not None else int(rng.integers(1, 4))
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=rank))


def _elementwise2(op):
    def make(rng):
        s = _shape(rng)
        if rng.random() < 0.2:
            return op, [rng.standard_normal(s), rng.standard_normal(())]
        return op, [rng.standard_normal(s), rng.standard_normal(s)]

    return make


def _unary(op):
    def make(rng):
        return op, [rng.standard_normal(_shape(rng)) * 2]

    return make


def _broadcast(rng):
    s = _shape(rng, rank=2)
    src = tuple(d if rng.random() < 0.5 else 1 for d in s)
    target = (int(rng.integers(1, 4)),) + s
    return (lambda x: ad.broadcast_to(x, target)), [rng.standard_normal(src)]


def _reshape(rng):
    a, b = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return (lambda x: ad.reshape(x, (b, a))), [rng.standard_normal((a, b))]


def _transpose(rng):
    s = _shape(rng, rank=3)
    axes = tuple(int(i) for i in rng.permutation(3))
    return (lambda x: ad.transpose(x, axes)), [rng.standard_normal(s)]


def _concat(rng):
    s = list(_shape(rng, rank=2))
    ax = int(rng.integers(0, 2))
    s2 = list(s)
    s2[ax] = int(rng.integers(1, 4))
    return (lambda x, y: ad.concat([x, y], axis=ax)), [rng.standard_normal(s), rng.standard_normal(s2)]


def _slice(rng):
    s = _shape(rng, lo=2, hi=5, rank=2)
    ax = int(rng.integers(0, 2))
    start = int(rng.integers(0, s[ax] - 1))
    stop = int(rng.integers(start + 1, s[ax] + 1))
    return (lambda x: ad.slice_axis(x, ax, start, stop)), [rng.standard_normal(s)]


def _take_rows(rng):
    rows, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    idx = rng.integers(0, rows, size=int(rng.integers(1, 6)))
    return (lambda t: ad.take_rows(t, idx)), [rng.standard_normal((rows, d))]


def _matmul(rng):
    m, k, p = (int(v) for v in rng.integers(1, 4, size=3))
    if rng.random() < 0.5:
        lead = (int(rng.integers(1, 3)),)
        b_shape = (k, p) if rng.random() < 0.5 else lead + (k, p)
        return ad.matmul, [rng.standard_normal(lead + (m, k)), rng.standard_normal(b_shape)]
    return ad.matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, p))]


def _mse(rng):
    s = _shape(rng)
    return ad.mse, [rng.standard_normal(s), rng.standard_normal(s)]


def _norm(op):
    def make(rng):
        s = _shape(rng, lo=2, hi=5, rank=2)
        return (lambda x: op(x, 1e-3)), [rng.standard_normal(s)]

    return make


OPS = {
    "add": _elementwise2(ad.add),
    "sub": _elementwise2(ad.sub),
    "mul": _elementwise2(ad.mul),
    "neg": _unary(ad.neg),
    "scale": lambda rng: ((lambda x, s=float(rng.standard_normal()): ad.scale(x, s)), [rng.standard_normal(_shape(rng))]),
    "silu": _unary(ad.silu),
    "gelu": _unary(ad.gelu),
    "broadcast_to": _broadcast,
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "slice_axis": _slice,
    "take_rows": _take_rows,
    "matmul": _matmul,
    "sum_all": _unary(ad.sum_all),
    "mean_all": _unary(ad.mean_all),
    "mse": _mse,
    "softmax_lastdim": _unary(ad.softmax_lastdim),
    "layer_norm_nolearn": _norm(ad.layer_norm_nolearn),
    "rms_norm_lastdim": _norm(ad.rms_norm_lastdim),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_finite_differences(name):
    worst = 0.0
    for case in range(CASES):
        rng = np.random.default_rng([zlib.crc32(name.encode()), case])
        fn, arrays = OPS[name](rng)
        worst = max(worst, check_grad(fn, arrays, rng))
    assert worst < REL_TOL, f"{name}: worst relative error {worst:.2e}"


def test_composite_graph_gradient():
    rng = np.random.default_rng(7)

    def block(x, w1, w2):
        h = ad.gelu(ad.matmul(ad.layer_norm_nolearn(x), w1))
        a = ad.softmax_lastdim(ad.matmul(h, ad.transpose(h, (1, 0))))
        return ad.add(x, ad.matmul(ad.matmul(a, h), w2))

    arrays = [rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal((5, 4))]
    assert check_grad(block, arrays, rng) < REL_TOL


def test_gradient_accumulates_over_reuse():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tape = ad.Tape()
    with tape:
        loss = ad.sum_all(ad.add(ad.mul(x, x), x))
    ad.backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_tape_is_single_use():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    tape = ad.Tape()
    with tape:
        loss = ad.sum_all(x)
    ad.backward(loss, tape)
    with pytest.raises(UsageError):
        ad.backward(loss, tape)
    with pytest.raises(UsageError), tape:
        ad.sum_all(x)


def test_backward_needs_scalar():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    tape = ad.Tape()
    with tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ShapeError):
        ad.backward(y, tape)


def test_no_tape_records_nothing():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    y = ad.mul(x, x)
    assert not y.requires_grad


@pytest.mark.parametrize(
    "bad",
    [
        lambda: ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(3))),
        lambda: ad.mul(ad.Tensor(np.ones((2, 1))), ad.Tensor(np.ones((2, 3)))),
        lambda: ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3)))),
        lambda: ad.matmul(ad.Tensor(np.ones(3)), ad.Tensor(np.ones((3, 2)))),
        lambda: ad.broadcast_to(ad.Tensor(np.ones(3)), (2, 4)),
        lambda: ad.reshape(ad.Tensor(np.ones(6)), (4,)),
        lambda: ad.concat([ad.Tensor(np.ones((2, 2))), ad.Tensor(np.ones((3, 3)))], axis=0),
        lambda: ad.mse(ad.Tensor(np.ones(2)), np.ones(3)),
    ],
)
def test_shape_errors(bad):
    with pytest.raises(ShapeError):
        bad()


def test_layer_norm_zero_variance_without_eps():
    with pytest.raises(NumericError):
        ad.layer_norm_nolearn(ad.Tensor(np.ones((1, 4))), eps=0.0)
    with pytest.raises(ConfigError):
        ad.layer_norm_nolearn(ad.Tensor(np.ones((1, 4))), eps=-1.0)


def test_seeded_rng_golden_values():
    # frozen: changing the stream derivation silently reshuffles every experiment
    assert ad.sub_seed(0, "init") == 7824777423566302168
    assert ad.sub_seed(0, "init") != ad.sub_seed(1, "init")
    a = ad.SeededRng(0, "golden").normal((3,))
    np.testing.assert_array_equal(a, [1.7091558003554268, 0.709057818582456, 1.172582883022008])


def test_init_normal_zero_std_is_exact():
    t = ad.init_normal((3, 3), 0.0, ad.SeededRng(0))
    assert not t.data.any() and t.requires_grad
    with pytest.raises(ConfigError):
        ad.init_normal((2,), -1.0, ad.SeededRng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**16))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 30
    y = ad.softmax_lastdim(ad.Tensor(x)).data
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)
    assert (y >= 0).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**16))
def test_layer_norm_output_is_standardized(cols, seed):
    x = np.random.default_rng(seed).standard_normal((3, cols)) * 5 + 2
    y = ad.layer_norm_nolearn(ad.Tensor(x), eps=0.0).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose((y * y).mean(-1), 1.0, atol=1e-10)
