import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moh.errors import ContractError, ShapeError
from moh.tensor import (Tape, Tensor, backward, concat, cross_entropy, finite_diff_check, index, matmul, mean,
                        mul, reshape, row_norm, scale, softmax, straight_through, sum_all, sum_axis, tanh,
                        transpose)


def triple_loop(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def softmax_mp(row):
    mpmath.mp.dps = 50
    e = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
    tot = mpmath.fsum(e)
    return np.array([float(v / tot) for v in e])


# -- matmul -----------------------------------------------------------------------

def test_matmul_identity():
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot():
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.abs(matmul(Tensor(a), Tensor(b)).data - triple_loop(a, b)).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_matmul_oracle_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    assert np.abs(matmul(Tensor(a), Tensor(b)).data - triple_loop(a, b)).max() < 1e-10


def test_batched_matmul_gradient_sums_over_batch():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = rng.normal(size=(4, 5, 3))
    assert finite_diff_check(lambda p: sum_all(mul(matmul(Tensor(x), p), matmul(Tensor(x), p))), w) < 1e-6


# -- softmax ----------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_input_stable():
    y = softmax(Tensor([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert abs(y[0] - 1.0) < 1e-15 and y[1] < 1e-300


def test_softmax_matches_extended_precision():
    x = np.array([1.0, 2.0, 3.0])
    assert np.abs(softmax(Tensor(x)).data - softmax_mp(x)).max() < 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_is_simplex_point(x):
    y = softmax(Tensor(x)).data
    assert np.all((y >= 0) & (y <= 1))
    assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-12


# -- backward ---------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_sum_of_squares():
    x = Tensor([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_composite_grad_matches_finite_differences():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    # three ops: matmul -> softmax -> sum of squares
    f = lambda p: sum_all(mul(softmax(matmul(p, w)), softmax(matmul(p, w))))
    assert finite_diff_check(f, x, eps=1e-5) < 1e-4


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = scale(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    tape.backward(loss)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 4 * x.data)
    x.zero_grad()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_is_bit_deterministic():
    rng = np.random.default_rng(3)
    xs = rng.normal(size=(3, 5))
    ws = rng.normal(size=(5, 4))

    def run():
        x = Tensor(xs, requires_grad=True)
        w = Tensor(ws, requires_grad=True)
        with Tape() as tape:
            loss = sum_all(mul(softmax(matmul(x, w)), tanh(matmul(x, w))))
        tape.backward(loss)
        return x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = scale(x, 3.0)
    assert y.requires_grad
    with Tape() as tape:
        pass
    assert len(tape) == 0


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = matmul(x, x)
        z = sum_all(softmax(y))
    seen = {id(x)}
    for out, inputs, _ in tape.entries:
        assert all(id(i) in seen or not i.requires_grad for i in inputs)
        seen.add(id(out))
    assert tape.entries[-1][0] is z


# -- finite_diff_check ------------------------------------------------------------

def test_fd_check_on_sum():
    x = Tensor(np.random.default_rng(4).normal(size=(3, 2)))
    assert finite_diff_check(sum_all, x) < 1e-8


def test_fd_check_softmax_sum_of_squares():
    x = Tensor(np.random.default_rng(5).normal(size=(2, 5)))
    assert finite_diff_check(lambda p: sum_all(mul(softmax(p), softmax(p))), x, eps=1e-5) < 1e-4


OPS = {
    "add": lambda p, c: sum_all(mul(p + c, p + c)),
    "sub": lambda p, c: sum_all(mul(p - c, c)),
    "mul": lambda p, c: sum_all(mul(mul(p, c), p)),
    "scale": lambda p, c: sum_all(mul(scale(p, -1.5), p)),
    "tanh": lambda p, c: sum_all(mul(tanh(p), c)),
    "matmul": lambda p, c: sum_all(tanh(matmul(p, transpose(c)))),
    "transpose": lambda p, c: sum_all(mul(transpose(p), transpose(c)) * 2.0),
    "reshape": lambda p, c: sum_all(mul(reshape(p, (-1,)), reshape(c, (-1,)))),
    "sum_axis": lambda p, c: sum_all(mul(sum_axis(p, 0), sum_axis(p, 0))),
    "mean": lambda p, c: sum_all(mul(mean(p, axis=1), mean(p, axis=1))),
    "row_norm": lambda p, c: sum_all(row_norm(p)),
    "softmax": lambda p, c: sum_all(mul(softmax(p), c)),
    "index": lambda p, c: sum_all(mul(index(p, (slice(None), slice(1, 3))), index(p, (slice(None), [0, 0])))),
    "concat": lambda p, c: sum_all(tanh(concat([p, c, p], axis=1))),
    "cross_entropy": lambda p, c: cross_entropy(p, [0, 2, 1]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_fd_check_on_random_inputs(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    for _ in range(10):
        x = Tensor(rng.normal(size=(3, 4)))
        c = Tensor(rng.normal(size=(3, 4)))
        assert finite_diff_check(lambda p: OPS[name](p, c), x, eps=1e-5) < 1e-4, name


def test_straight_through_passes_gradient_unchanged():
    g = Tensor([[0.2, 0.9]], requires_grad=True)
    with Tape() as tape:
        q = straight_through([[0.0, 1.0]], g)
        loss = sum_all(mul(q, Tensor([[0.7, -0.3]])))
    tape.backward(loss)
    np.testing.assert_array_equal(q.data, [[0.0, 1.0]])
    np.testing.assert_array_equal(g.grad, [[0.7, -0.3]])


def test_elementwise_requires_equal_rank():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))


def test_size_one_axes_broadcast_with_reduced_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.full((2, 1), 2.0), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(mul(a, b))
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, [[3.0], [3.0]])
    np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.0))
