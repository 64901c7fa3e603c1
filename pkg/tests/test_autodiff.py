"""Tests for the reverse-mode autodiff core.

Every op kind is checked against central finite differences on randomized
small tensors; fixed expected values are computed from independent
closed-form evaluations before being asserted.
"""

import math

import numpy as np
import pytest

from graddistill import autodiff as ad


def const(rng, shape):
    return ad.Tensor(rng.uniform(-1.0, 1.0, size=shape))


def leaf(rng, shape):
    return ad.Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# construction


def test_tensor_from_flat_identity():
    t = ad.tensor([2, 2], [1, 0, 0, 1])
    assert np.array_equal(t.data, np.eye(2))
    assert t.shape == (2, 2)


def test_tensor_vector_has_no_grad():
    t = ad.tensor([3], [1, 2, 3])
    assert t.grad is None and not t.requires_grad
    assert t.values.tolist() == [1.0, 2.0, 3.0]


def test_tensor_length_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.tensor([2], [1, 2, 3])


def test_tensor_rejects_non_finite():
    with pytest.raises(ad.AutodiffError):
        ad.Tensor([1.0, float("nan")])
    with pytest.raises(ad.AutodiffError):
        ad.tensor([2], [1.0, float("inf")])


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, ad.Tensor(np.eye(2)))
    assert np.array_equal(out.data, a.data)


def test_softmax_symmetry():
    out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_normalized_and_nonnegative():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = ad.Tensor(rng.normal(scale=5.0, size=(4, 6)))
        out = ad.softmax(x, axis=-1).data
        assert (out >= 0).all()
        assert np.abs(out.sum(axis=-1) - 1.0).max() <= 1e-12


def test_cross_entropy_closed_form():
    # Hand evaluation of -log(e^2 / (e^2 + 2)) for logits [2, 0, 0], target 0.
    expected = math.log((math.exp(2.0) + 2.0) / math.exp(2.0))
    assert abs(expected - 0.23954476622188453) < 1e-15
    loss = ad.cross_entropy(ad.Tensor([[2.0, 0.0, 0.0]]), [0])
    assert abs(loss.item() - expected) < 1e-12


def test_cross_entropy_bad_target():
    logits = ad.Tensor([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ad.AutodiffError):
        ad.cross_entropy(logits, [0, 5])


def test_cross_entropy_all_ignored():
    logits = ad.Tensor([[0.0, 1.0]])
    with pytest.raises(ad.AutodiffError):
        ad.cross_entropy(logits, [0], ignore_index=0)


def test_matmul_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[1.0, 2.0]]))


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_of_squares():
    x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.reduce_sum(ad.mul(x, x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-15)


def test_backward_constant_leaves_zero_grad():
    x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.zero_grad()
    c = ad.Tensor([5.0, 5.0], requires_grad=True)
    ad.reduce_sum(ad.mul(c, c)).backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 0.0])


def test_backward_requires_scalar_root():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        ad.mul(x, x).backward()


def test_backward_detached_root():
    with pytest.raises(ad.AutodiffError):
        ad.Tensor([1.0], requires_grad=True).backward()


def test_backward_accumulates_until_reset():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    ad.reduce_sum(ad.mul(x, x)).backward()
    ad.reduce_sum(ad.mul(x, x)).backward()
    assert np.allclose(x.grad, [4.0, 8.0])
    x.zero_grad()
    ad.reduce_sum(ad.mul(x, x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_linearity():
    rng = np.random.default_rng(3)
    w = const(rng, (4,))

    def terms(x):
        return ad.reduce_sum(ad.mul(x, ad.Tensor(w.data))), ad.reduce_sum(ad.mul(x, x))

    x1 = leaf(rng, (4,))
    a, b = terms(x1)
    ad.add(a, b).backward()
    combined = x1.grad.copy()

    x2 = ad.Tensor(x1.data.copy(), requires_grad=True)
    a, b = terms(x2)
    a.backward()
    b.backward()
    assert np.abs(combined - x2.grad).max() <= 1e-12


def test_shared_subexpression_gradient():
    x = ad.Tensor([3.0], requires_grad=True)
    y = ad.add(x, x)  # dy/dx = 2
    ad.reduce_sum(ad.mul(y, y)).backward()  # d(4x^2)/dx = 8x
    assert np.allclose(x.grad, [24.0])


def test_forward_reproducible_bitwise():
    rng = np.random.default_rng(11)
    x = leaf(rng, (3, 4))
    w = const(rng, (4, 2))

    def run():
        return ad.reduce_sum(ad.gelu(ad.matmul(x, w))).item()

    assert run() == run()


def test_no_grad_disables_recording():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        out = ad.reduce_sum(ad.mul(x, x))
    assert not out.requires_grad
    with pytest.raises(ad.AutodiffError):
        out.backward()


# ---------------------------------------------------------------------------
# grad_check itself


def test_grad_check_sum_of_squares():
    x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    err = ad.grad_check(lambda t: ad.reduce_sum(ad.mul(t, t)), x)
    assert err < 1e-7


def test_grad_check_constant_function():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    err = ad.grad_check(lambda t: ad.Tensor([4.0]), x)
    assert err == 0.0


def test_grad_check_rejects_nondeterminism():
    x = ad.Tensor([1.0], requires_grad=True)
    state = {"n": 0.0}

    def f(t):
        state["n"] += 1.0
        return ad.Tensor([state["n"]])

    with pytest.raises(ad.AutodiffError):
        ad.grad_check(f, x)


def test_grad_check_rejects_bad_eps():
    x = ad.Tensor([1.0], requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        ad.grad_check(lambda t: ad.reduce_sum(t), x, eps=0.0)


# ---------------------------------------------------------------------------
# finite-difference property test per op kind

_WEIGHT_CACHE = {}


def _weighted(rng, out):
    # Weight tensor is drawn once per (shape, rng) so f stays deterministic.
    key = (id(rng), out.shape)
    if key not in _WEIGHT_CACHE:
        _WEIGHT_CACHE[key] = ad.Tensor(rng.uniform(-1, 1, out.shape))
    return ad.reduce_sum(ad.mul(out, _WEIGHT_CACHE[key]))


def _case_matmul(rng):
    a, b = leaf(rng, (2, 3)), leaf(rng, (3, 2))
    return [a, b], lambda: _weighted(rng, ad.matmul(a, b))


def _case_add(rng):
    a, b = leaf(rng, (2, 3)), leaf(rng, (2, 3))
    return [a, b], lambda: _weighted(rng, ad.add(a, b))


def _case_add_bias(rng):
    a, b = leaf(rng, (2, 3)), leaf(rng, (3,))
    return [a, b], lambda: _weighted(rng, ad.add(a, b))


def _case_mul(rng):
    a, b = leaf(rng, (2, 3)), leaf(rng, (2, 3))
    return [a, b], lambda: _weighted(rng, ad.mul(a, b))


def _case_mul_scalar(rng):
    a = leaf(rng, (2, 3))
    return [a], lambda: _weighted(rng, ad.mul_scalar(a, 1.7))


def _case_embedding_gather(rng):
    table = leaf(rng, (5, 3))
    ids = [0, 2, 2, 4]  # duplicate id exercises scatter accumulation
    return [table], lambda: _weighted(rng, ad.embedding_gather(table, ids))


def _case_softmax(rng):
    x = leaf(rng, (2, 4))
    return [x], lambda: _weighted(rng, ad.softmax(x, axis=-1))


def _case_log_softmax(rng):
    x = leaf(rng, (2, 4))
    return [x], lambda: _weighted(rng, ad.log_softmax(x, axis=-1))


def _case_layer_norm(rng):
    x, g, b = leaf(rng, (3, 4)), leaf(rng, (4,)), leaf(rng, (4,))
    return [x, g, b], lambda: _weighted(rng, ad.layer_norm(x, g, b))


def _case_gelu(rng):
    x = leaf(rng, (2, 3))
    return [x], lambda: _weighted(rng, ad.gelu(x))


def _case_reshape(rng):
    x = leaf(rng, (2, 3))
    return [x], lambda: _weighted(rng, ad.reshape(x, (3, 2)))


def _case_transpose(rng):
    x = leaf(rng, (2, 3))
    return [x], lambda: _weighted(rng, ad.transpose(x))


def _case_concat(rng):
    a, b = leaf(rng, (2, 3)), leaf(rng, (1, 3))
    return [a, b], lambda: _weighted(rng, ad.concat([a, b], axis=0))


def _case_narrow(rng):
    x = leaf(rng, (3, 4))
    return [x], lambda: _weighted(rng, ad.narrow(x, 1, 1, 2))


def _case_sum(rng):
    x = leaf(rng, (2, 3))
    return [x], lambda: ad.reduce_sum(x)


def _case_mean(rng):
    x = leaf(rng, (2, 3))
    return [x], lambda: ad.reduce_mean(x)


def _case_cross_entropy(rng):
    logits = leaf(rng, (3, 5))
    targets = [1, 0, 4]
    return [logits], lambda: ad.cross_entropy(logits, targets)


def _case_cross_entropy_ignored(rng):
    logits = leaf(rng, (3, 5))
    return [logits], lambda: ad.cross_entropy(logits, [1, 0, 4], ignore_index=0)


def _case_gather_rows(rng):
    x = leaf(rng, (3, 5))
    return [x], lambda: _weighted(rng, ad.gather_rows(x, [4, 0, 2]))


def _case_attention_scores(rng):
    q, k = leaf(rng, (3, 4)), leaf(rng, (2, 4))
    return [q, k], lambda: _weighted(rng, ad.attention_scores(q, k, 2))


def _case_attention_scores_masked(rng):
    q, k = leaf(rng, (3, 4)), leaf(rng, (2, 4))
    # Real masks always leave at least one visible key per query row.
    mask = np.where(rng.uniform(size=(3, 2)) < 0.3, -1e9, 0.0)
    mask[np.arange(3), rng.integers(0, 2, size=3)] = 0.0
    return [q, k], lambda: _weighted(rng, ad.softmax(
        ad.attention_scores(q, k, 2, mask=mask), axis=-1))


def _case_attention_context(rng):
    p, v = leaf(rng, (2, 3, 2)), leaf(rng, (2, 4))
    return [p, v], lambda: _weighted(rng, ad.attention_context(p, v, 2))


FD_CASES = {
    "matmul": _case_matmul,
    "add": _case_add,
    "add_bias": _case_add_bias,
    "mul": _case_mul,
    "mul_scalar": _case_mul_scalar,
    "embedding_gather": _case_embedding_gather,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "gelu": _case_gelu,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "narrow": _case_narrow,
    "sum": _case_sum,
    "mean": _case_mean,
    "cross_entropy": _case_cross_entropy,
    "cross_entropy_ignored": _case_cross_entropy_ignored,
    "gather_rows": _case_gather_rows,
    "attention_scores": _case_attention_scores,
    "attention_scores_masked": _case_attention_scores_masked,
    "attention_context": _case_attention_context,
}


@pytest.mark.parametrize("kind", sorted(FD_CASES))
def test_op_gradients_match_finite_differences(kind):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        leaves, fn = FD_CASES[kind](rng)
        for x in leaves:
            err = ad.grad_check(lambda _t: fn(), x)
            assert err < 1e-4, f"{kind} seed {seed}: rel error {err}"


# ---------------------------------------------------------------------------
# kind dispatch


def test_apply_op_dispatch():
    a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.apply_op("matmul", [a, ad.Tensor(np.eye(2))])
    assert np.array_equal(out.data, a.data)
    out = ad.apply_op("softmax", [ad.Tensor([0.0, 0.0])], {"axis": -1})
    assert np.allclose(out.data, [0.5, 0.5])
    out = ad.apply_op("concat", [ad.Tensor([1.0]), ad.Tensor([2.0])], {"axis": 0})
    assert out.data.tolist() == [1.0, 2.0]


def test_apply_op_unknown_kind():
    with pytest.raises(ad.AutodiffError):
        ad.apply_op("conv2d", [])


def test_required_kinds_registered():
    required = {"matmul", "add", "mul_scalar", "embedding_gather", "softmax",
                "log_softmax", "layer_norm", "gelu", "reshape", "concat",
                "mean", "sum", "cross_entropy"}
    assert required <= set(ad.OP_KINDS)
