import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbest_fusion import autodiff as ad
from nbest_fusion.autodiff import DimensionError, Tensor

from gradcheck import numeric_grad, rel_error


def leaf(arr):
    return Tensor(np.array(arr, dtype=float), requires_grad=True)


def check_grad(build, *leaves, tol=1e-4, h=1e-5):
    """Backprop sum(w * build()) with fixed random w and compare to finite differences."""
    out = build()
    w = np.random.default_rng(99).normal(size=out.shape)
    for t in leaves:
        t.grad = None
    (ad.mul(out, Tensor(w)) if out.ndim else out).sum().backward()

    def f():
        with ad.no_grad():
            return float((build().data * w).sum()) if out.ndim else float(build().data)

    for t in leaves:
        num = numeric_grad(f, t.data, h)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert rel_error(got, num) < tol, t.name


# -- matmul -----------------------------------------------------------------
def test_matmul_identity():
    out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_row_column():
    out = ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[11]])


def test_matmul_sum_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=(3, 3)))
    ad.matmul(a, b).sum().backward()

    def f():
        return float((a.data @ b.data).sum())

    assert rel_error(a.grad, numeric_grad(f, a.data)) < 1e-6
    # closed form: dA = 1 · Bᵀ
    np.testing.assert_allclose(a.grad, np.ones((3, 3)) @ b.data.T)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_gradients():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 4, 5)))
    w = leaf(rng.normal(size=(4, 2)))
    check_grad(lambda: ad.matmul(a, b), a, b)
    check_grad(lambda: ad.matmul(a, w), a, w)


# -- softmax ----------------------------------------------------------------
def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_inputs_stay_finite():
    y = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == 1.0 and y[1] < 1e-300


def test_softmax_nan_propagates():
    assert np.isnan(ad.softmax(Tensor([np.nan, 0.0])).data).all()


def test_softmax_jacobian():
    x = leaf([0.1, 0.2, 0.3])
    y = ad.softmax(x).data
    analytic = np.diag(y) - np.outer(y, y)
    for i in range(3):
        x.grad = None
        ad.softmax(x).backward(np.eye(3)[i])
        num = numeric_grad(lambda: float(ad._softmax_np(x.data.copy(), -1)[i]), x.data)
        assert rel_error(x.grad, num) < 1e-6
        np.testing.assert_allclose(x.grad, analytic[i], atol=1e-12)


@given(st.integers(1, 4), st.integers(2, 9), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).uniform(-50, 50, size=(rows, cols))
    s = ad.softmax(Tensor(x)).data.sum(axis=-1)
    assert np.all(np.abs(s - 1.0) < 1e-12)


def test_masked_softmax_zero_outside_mask():
    x = leaf(np.random.default_rng(3).normal(size=(4, 4)))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    y = ad.masked_softmax(x, mask)
    assert np.all(y.data[~mask] == 0.0)
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)
    check_grad(lambda: ad.masked_softmax(x, mask), x)
    assert np.all(x.grad[~mask] == 0.0)


# -- cross entropy ----------------------------------------------------------
def test_cross_entropy_uniform_is_log_v():
    loss = ad.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2], [True] * 3)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_sharp_prediction_goes_to_zero():
    targets = [2, 0, 1]
    prev = None
    for scale in (1.0, 10.0, 100.0):
        logits = np.eye(3)[targets] * scale
        loss = ad.cross_entropy(Tensor(logits), targets, [True] * 3).item()
        if prev is not None:
            assert loss < prev
        prev = loss
    assert prev < 1e-40


def test_cross_entropy_masked_mean_matches_scalar_recomputation():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 7))
    targets = rng.integers(0, 7, size=5)
    mask = np.array([True, False, True, True, False])
    expected = np.mean([
        -(z[t, targets[t]] - math.log(sum(math.exp(v) for v in z[t])))
        for t in range(5) if mask[t]
    ])
    logits = leaf(z)
    loss = ad.cross_entropy(logits, targets, mask)
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    loss.backward()
    assert np.all(logits.grad[~mask] == 0.0)
    check_grad(lambda: ad.cross_entropy(logits, targets, mask), logits)


def test_cross_entropy_empty_mask_is_an_error():
    with pytest.raises(ValueError, match="no positions"):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [False, False])


# -- elementwise suite --------------------------------------------------------
def test_concat_prompt_and_tokens_along_sequence():
    p, t = Tensor(np.zeros((10, 8))), Tensor(np.ones((6, 8)))
    assert ad.concat([p, t], axis=0).shape == (16, 8)


def test_rmsnorm_of_constant_vector_is_gain():
    gain = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    out = ad.rmsnorm(Tensor(np.full(4, 2.5)), gain, eps=0.0)
    np.testing.assert_allclose(out.data, gain.data, rtol=1e-15)


def test_silu_gradient_at_half():
    x = leaf([0.5])
    ad.silu(x).sum().backward()
    num = numeric_grad(lambda: float(ad.silu(Tensor(x.data)).data.sum()), x.data)
    assert rel_error(x.grad, num) < 1e-6


def test_add_rejects_non_leading_broadcast():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 1, 4))))


def test_slice_and_embedding_bounds():
    with pytest.raises(DimensionError):
        ad.slice_axis(Tensor(np.ones((3, 2))), 0, 2, 5)
    with pytest.raises(IndexError):
        ad.embedding(Tensor(np.ones((3, 2))), [0, 3])


OPS = {
    "add": lambda a, b, g: ad.add(a, b),
    "sub": lambda a, b, g: ad.sub(a, b),
    "mul": lambda a, b, g: ad.mul(a, b),
    "mul_scalar_tensor": lambda a, b, g: ad.mul(a, g),
    "scale": lambda a, b, g: ad.scale(a, -1.7),
    "rmsnorm": lambda a, b, g: ad.rmsnorm(a, b),
    "silu": lambda a, b, g: ad.silu(a),
    "gelu": lambda a, b, g: ad.gelu(a),
    "softmax": lambda a, b, g: ad.softmax(a),
    "concat": lambda a, b, g: ad.concat([a, ad.reshape(b, (1, 4))], axis=0),
    "slice": lambda a, b, g: ad.slice_axis(a, 1, 1, 3),
    "reshape_transpose": lambda a, b, g: ad.transpose(ad.reshape(a, (4, 3))),
    "swapaxes_expand": lambda a, b, g: ad.swapaxes(ad.expand(a, (2,)), 0, 2),
    "mean": lambda a, b, g: ad.mean(a),
    "matmul": lambda a, b, g: ad.matmul(a, ad.reshape(b, (4, 1))),
}


@pytest.mark.parametrize("name", sorted(OPS))
@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=5, deadline=None)
def test_every_primitive_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.uniform(-2, 2, size=(3, 4)))
    b = leaf(rng.uniform(-2, 2, size=(4,)))
    g = leaf(rng.uniform(-2, 2, size=()))
    a.name, b.name, g.name = "a", "b", "g"
    check_grad(lambda: OPS[name](a, b, g), a, b, g, tol=1e-4)


def test_embedding_gradient_scatters_repeated_ids():
    table = leaf(np.random.default_rng(5).normal(size=(5, 3)))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    check_grad(lambda: ad.embedding(table, ids), table)


# -- tape behaviour -----------------------------------------------------------
def test_gradients_accumulate_across_backward_calls():
    x = leaf([1.0, -2.0, 3.0])
    ad.silu(x).sum().backward()
    once = x.grad.copy()
    ad.silu(x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * once, rtol=1e-15)


def test_shared_subexpression_visited_once():
    x = leaf([2.0])
    y = ad.mul(x, x)  # y used twice below
    z = ad.add(y, y)
    tape = ad.Tape.from_output(z)
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
    positions = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            assert positions[id(p)] < positions[id(node)]
    z.backward()
    assert x.grad[0] == pytest.approx(8.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = ad.silu(x)
    assert not y.requires_grad and y._parents == ()


def test_forward_is_deterministic():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    out1 = ad.softmax(ad.matmul(Tensor(a), Tensor(b))).data
    out2 = ad.softmax(ad.matmul(Tensor(a), Tensor(b))).data
    assert out1.tobytes() == out2.tobytes()
