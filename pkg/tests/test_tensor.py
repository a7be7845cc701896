"""Tensor core: forward semantics, tape behavior, gradients vs finite differences."""

import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import domix.tensor as T
from domix.errors import ContractError, ShapeError
from domix.tensor import GradTape, Tensor, backward

from oracles import finite_difference_grad, max_rel_error


def rnd(rng, *shape, scale=1.0):
    return rng.normal(0.0, scale, size=shape)


# -- forward examples ---------------------------------------------------------


def test_matmul_identity():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    out = T.matmul(Tensor(np.eye(2, dtype=np.float32)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_product():
    # [[1],[0]] @ [[0,2]] = [[0,2],[0,0]]
    out = T.matmul(Tensor([[1.0], [0.0]]), Tensor([[0.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[0.0, 2.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_symmetry():
    out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], rtol=1e-6)


@given(st.integers(1, 5), st.integers(1, 6))
def test_softmax_rows_sum_to_one(rows, cols):
    rng = np.random.default_rng(rows * 31 + cols)
    out = T.softmax(Tensor(rnd(rng, rows, cols, scale=3.0).astype(np.float32)))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(rows), atol=1e-6)


def test_cross_entropy_confident_correct_is_near_zero():
    loss = T.cross_entropy(Tensor([[30.0, 0.0]]), np.array([0]))
    assert loss.item() < 1e-6


def test_cross_entropy_out_of_range_class():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_dropout_eval_is_identity_and_consumes_no_rng():
    rng = T.make_rng(0)
    x = Tensor(np.ones((4, 4)))
    out = T.dropout(x, 0.5, rng, train=False)
    assert out is x
    out = T.dropout(x, 0.0, rng, train=True)
    assert out is x
    # identical stream to a fresh generator: nothing was drawn
    np.testing.assert_array_equal(rng.random(3), T.make_rng(0).random(3))


def test_dropout_train_scales_by_keep_inverse():
    x = Tensor(np.ones((100, 100), dtype=np.float64))
    out = T.dropout(x, 0.25, T.make_rng(7), train=True)
    vals = np.unique(out.data)
    assert set(np.round(vals, 6)) <= {0.0, np.round(1 / 0.75, 6)}
    assert abs(out.data.mean() - 1.0) < 0.02


# -- tape behavior --------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((3, 2)), requires_grad=True)
    with GradTape():
        loss = T.sum_all(x)
    backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_backward_hand_derivative_of_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape():
        loss = T.sum_all(T.mul(x, x))
    backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-6)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape():
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        backward(y)


def test_backward_requires_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_all(x)  # no active tape
    with pytest.raises(ContractError):
        backward(loss)


def test_tape_cleared_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        loss = T.sum_all(x)
    backward(loss)
    assert len(tape) == 0 and tape.closed
    with pytest.raises(ContractError):
        backward(loss)


def test_fresh_tapes_give_identical_grads():
    grads = []
    for _ in range(2):
        x = Tensor(T.make_rng(3).normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        with GradTape():
            loss = T.sum_all(T.mul(x, x))
        backward(loss)
        grads.append(x.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_no_grad_buffer_without_requires_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    w = Tensor(np.ones(3), requires_grad=False)
    with GradTape():
        loss = T.sum_all(T.mul(x, w))
    backward(loss)
    assert w.grad is None and x.grad is not None


def test_forward_determinism_bitwise():
    def run():
        rng = T.make_rng(123)
        a = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
        b = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
        return T.matmul(T.softmax(a), b).data

    assert run().tobytes() == run().tobytes()


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_matmul_associativity(m, k, l, n):
    rng = np.random.default_rng(m * 1000 + k * 100 + l * 10 + n)
    a = Tensor(rnd(rng, m, k))
    b = Tensor(rnd(rng, k, l))
    c = Tensor(rnd(rng, l, n))
    left = T.matmul(T.matmul(a, b), c).data
    right = T.matmul(a, T.matmul(b, c)).data
    np.testing.assert_allclose(left, right, rtol=1e-5, atol=1e-8)


# -- gradient checks vs central finite differences ------------------------------


def check_op_grads(build, arrays, tol=1e-4):
    """build(tensors) -> scalar loss Tensor; arrays are float64 leaves."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape():
        loss = build(tensors)
    backward(loss)
    for t, a in zip(tensors, arrays):
        assert t.grad is not None, "missing grad"

        def f():
            fresh = [Tensor(arr) for arr in arrays]
            return build(fresh).item()

        numeric = finite_difference_grad(f, a)
        err = max_rel_error(t.grad, numeric)
        assert err < tol, f"gradient mismatch {err}"


CASES = {
    "matmul": (lambda ts: T.sum_all(T.matmul(ts[0], ts[1])), [(3, 4), (4, 2)]),
    "bmm": (lambda ts: T.sum_all(T.bmm(ts[0], ts[1])), [(2, 3, 4), (2, 4, 2)]),
    "linear": (lambda ts: T.sum_all(T.linear(ts[0], ts[1], ts[2])), [(2, 3, 4), (5, 4), (5,)]),
    "add": (lambda ts: T.sum_all(T.add(ts[0], ts[1])), [(3, 4), (4,)]),
    "sub": (lambda ts: T.sum_all(T.sub(ts[0], ts[1])), [(3, 4), (3, 4)]),
    "mul": (lambda ts: T.sum_all(T.mul(ts[0], ts[1])), [(3, 1, 4), (2, 4)]),
    "scale": (lambda ts: T.sum_all(T.scale(ts[0], -2.5)), [(3, 3)]),
    "mean_all": (lambda ts: T.mean_all(ts[0]), [(4, 5)]),
    "relu": (lambda ts: T.sum_all(T.mul(T.relu(ts[0]), ts[0])), [(4, 4)]),
    "gelu": (lambda ts: T.sum_all(T.mul(T.gelu(ts[0]), ts[0])), [(4, 4)]),
    "softmax": (lambda ts: T.sum_all(T.mul(T.softmax(ts[0]), ts[1])), [(3, 5), (3, 5)]),
    "layer_norm": (lambda ts: T.sum_all(T.mul(T.layer_norm(ts[0], ts[1], ts[2]), ts[0])), [(2, 3, 6), (6,), (6,)]),
    "reshape": (lambda ts: T.sum_all(T.mul(T.reshape(ts[0], (6, 2)), T.reshape(ts[1], (6, 2)))), [(3, 4), (2, 6)]),
    "transpose": (lambda ts: T.sum_all(T.mul(T.transpose(ts[0], (1, 0, 2)), ts[1])), [(2, 3, 4), (3, 2, 4)]),
    "select": (lambda ts: T.sum_all(T.mul(T.select(ts[0], 1, 0), ts[1])), [(3, 4, 5), (3, 5)]),
    "slice_rows": (lambda ts: T.sum_all(T.mul(T.slice_rows(ts[0], 2), ts[1])), [(4, 3), (2, 3)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    build, shapes = CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.normal(0.0, 1.0, size=s) for s in shapes]
    if name in ("relu", "gelu"):  # keep away from the kink
        arrays = [np.where(np.abs(a) < 0.1, a + 0.2, a) for a in arrays]
    check_op_grads(build, arrays)


def test_embedding_gradient():
    rng = np.random.default_rng(11)
    table = rng.normal(size=(7, 4))
    ids = np.array([[0, 3, 3], [6, 1, 0]])
    weights = rng.normal(size=(2, 3, 4))

    def build(ts):
        return T.sum_all(T.mul(T.embedding(ts[0], ids), Tensor(weights)))

    check_op_grads(build, [table])


def test_gather_rows_gradient():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(2, 3, 4))
    rows = np.array([0, 1, 1])
    cols = np.array([2, 0, 2])
    w = rng.normal(size=(3, 4))

    def build(ts):
        return T.sum_all(T.mul(T.gather_rows(ts[0], rows, cols), Tensor(w)))

    check_op_grads(build, [x])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(13)
    logits = rng.normal(size=(5, 4))
    targets = np.array([0, 3, 1, 1, 2])
    check_op_grads(lambda ts: T.cross_entropy(ts[0], targets), [logits], tol=1e-5)


def test_dropout_gradient_with_fixed_mask():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(6, 6))
    w = rng.normal(size=(6, 6))

    def build(ts):
        return T.sum_all(T.mul(T.dropout(ts[0], 0.3, T.make_rng(99), train=True), Tensor(w)))

    check_op_grads(build, [x])


def test_matmul_backward_vs_finite_differences_tight():
    # the flagship check: rel error < 1e-6 in f64 for loss = sum(A @ B)
    rng = np.random.default_rng(15)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    with GradTape():
        loss = T.sum_all(T.matmul(ta, tb))
    backward(loss)
    for t, arr in ((ta, a), (tb, b)):
        def f(arr=arr):
            return T.sum_all(T.matmul(Tensor(a), Tensor(b))).item()

        numeric = finite_difference_grad(f, arr)
        assert max_rel_error(t.grad, numeric) < 1e-6


def test_random_small_inputs_sweep():
    # the 100-random-inputs invariant, spread over the cheap core ops
    rng = np.random.default_rng(16)
    ops = [
        lambda ts: T.sum_all(T.matmul(ts[0], ts[1])),
        lambda ts: T.sum_all(T.mul(T.softmax(ts[0]), ts[1])),
        lambda ts: T.sum_all(T.mul(T.gelu(ts[0]), ts[1])),
        lambda ts: T.sum_all(T.add(ts[0], ts[1])),
    ]
    shapes = [[(3, 3), (3, 3)], [(2, 5), (2, 5)], [(3, 4), (3, 4)], [(4, 2), (4, 2)]]
    for trial in range(100):
        op = ops[trial % len(ops)]
        arrays = [rng.normal(size=s) + 0.3 for s in shapes[trial % len(ops)]]
        check_op_grads(op, arrays)
