import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chat_transducer import numerics as nx
from chat_transducer.numerics import Graph, Tensor


def numeric_grad(f, x: np.ndarray, h=1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.reshape(-1)[i] += h
        xm.reshape(-1)[i] -= h
        g.reshape(-1)[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def analytic_grads(build, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph() as g:
        out = build(*leaves)
    g.backward(out)
    return [t.grad for t in leaves]


def test_matmul_identity_and_hand_product():
    a = Tensor(np.eye(2))
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(nx.matmul(a, b).data, b.data)
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\[2, 3\].*\[2, 3\]"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_matches_central_differences():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ga, gb = analytic_grads(lambda a, b: nx.sum(nx.matmul(a, b)), A, B)
    fa = numeric_grad(lambda x: (x @ B).sum(), A)
    fb = numeric_grad(lambda x: (A @ x).sum(), B)
    assert rel_err(ga, fa) < 1e-6
    assert rel_err(gb, fb) < 1e-6


def test_softmax_values():
    assert np.allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    z = math.exp(2) + math.exp(-1) + 1
    expected = [math.exp(2) / z, math.exp(-1) / z, 1 / z]
    out = nx.softmax(Tensor([2.0, -1.0, 0.0])).data
    assert np.allclose(out, expected, atol=1e-15)
    assert np.allclose(out, [0.84379, 0.04201, 0.11420], atol=1e-5)


def test_softmax_empty_dim_errors():
    with pytest.raises(nx.DimensionError):
        nx.softmax(Tensor(np.zeros((2, 0))))


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalisation(x, c):
    a = nx.softmax(Tensor(x)).data
    b = nx.softmax(Tensor(x + c)).data
    assert np.abs(a - b).max() < 1e-12
    assert abs(a.sum() - 1) < 1e-12
    assert (a >= 0).all()


def test_log_sum_exp_cases():
    assert abs(nx.log_sum_exp(Tensor([math.log(0.4), math.log(0.6)])).item()) < 1e-15
    assert nx.log_sum_exp(Tensor([-math.inf, 0.0])).item() == 0.0
    assert nx.log_sum_exp(Tensor([1000.0, 1000.0])).item() == pytest.approx(1000 + math.log(2), abs=1e-12)


def test_log_sum_exp_gradient_ignores_minus_inf():
    x = Tensor([-math.inf, 0.0, 1.0], requires_grad=True)
    with Graph() as g:
        out = nx.log_sum_exp(x)
    g.backward(out)
    assert x.grad[0] == 0.0
    assert np.allclose(x.grad[1:], nx.softmax(Tensor([0.0, 1.0])).data)


OPS = {
    "add": (lambda a, b: nx.sum(nx.mul(nx.add(a, b), nx.add(a, b))), [(3, 4), (1, 4)]),
    "sub": (lambda a, b: nx.sum(nx.mul(nx.sub(a, b), a)), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: nx.sum(nx.mul(a, b)), [(2, 3), (2, 3)]),
    "matmul3d": (lambda a, b: nx.sum(nx.relu(nx.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    "batched": (lambda a, b: nx.sum(nx.mul(nx.matmul(a, b), nx.matmul(a, b))), [(1, 3, 4), (2, 4, 2)]),
    "relu": (lambda a: nx.sum(nx.mul(nx.relu(a), a)), [(4, 3)]),
    "softmax": (lambda a: nx.sum(nx.mul(nx.softmax(a, dim=0), a)), [(4, 3)]),
    "log_softmax": (lambda a: nx.sum(nx.mul(nx.log_softmax(a), a)), [(3, 5)]),
    "log_sum_exp": (lambda a: nx.sum(nx.mul(nx.log_sum_exp(a, dim=1), nx.log_sum_exp(a, dim=1))), [(3, 4)]),
    "concat_split": (lambda a, b: nx.sum(nx.mul(nx.split(nx.concat([a, b], 0), [1, 3, 1], 0)[1], nx.split(nx.concat([b, a], 0), [3, 2], 0)[0])), [(2, 3), (3, 3)]),
    "reshape_transpose": (lambda a: nx.sum(nx.mul(nx.transpose(nx.reshape(a, (3, 2, 2)), (2, 0, 1)), nx.transpose(nx.reshape(a, (3, 2, 2)), (2, 0, 1)))), [(6, 2)]),
    "mean_scale": (lambda a: nx.sum(nx.mul(nx.mean(a, dim=0), nx.scale(nx.mean(a, dim=0), 3.0))), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(5))
def test_op_gradients_match_central_differences(name, seed):
    build, shapes = OPS[name]
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(-2, 2, size=s) for s in shapes]
    grads = analytic_grads(build, *xs)
    for i, x in enumerate(xs):

        def f(v, i=i):
            args = [Tensor(a) for a in xs]
            args[i] = Tensor(v)
            return build(*args).item()

        assert rel_err(grads[i], numeric_grad(f, x)) < 1e-4, (name, i)


def test_embedding_gradient_accumulates_repeated_rows():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Graph() as g:
        out = nx.sum(nx.embedding(table, [1, 1, 2]))
    g.backward(out)
    assert table.grad.tolist() == [[0, 0], [2, 2], [1, 1]]
    with pytest.raises(IndexError):
        nx.embedding(table, [3])


def test_backward_visits_ops_in_reverse_order():
    a = Tensor([1.0, 2.0], requires_grad=True)
    g = Graph()
    with g:
        b = nx.relu(a)
        c = nx.scale(b, 2.0)
        d = nx.sum(c)
    forward = [n.op for n in g.nodes]
    assert [b.node_id, c.node_id, d.node_id] == [0, 1, 2]
    g.trace = []
    g.backward(d)
    assert g.trace == list(reversed(forward))


def test_backward_twice_is_an_error():
    a = Tensor([1.0], requires_grad=True)
    with Graph() as g:
        out = nx.sum(nx.scale(a, 3.0))
    g.backward(out)
    with pytest.raises(nx.GraphError):
        g.backward(out)
    with pytest.raises(nx.GraphError):
        with g:
            pass


def test_no_recording_outside_a_graph():
    a = Tensor([1.0, -1.0], requires_grad=True)
    out = nx.relu(a)
    assert out.node_id is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_from_finite_input_is_rejected():
    with pytest.raises(nx.NonFiniteError):
        nx.scale(Tensor([1e308]), 10.0)


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))

    def run():
        return nx.log_softmax(nx.relu(nx.matmul(Tensor(a), Tensor(b)))).data.tobytes()

    assert run() == run()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).uniform(-30, 30, size=(4, 6))
    out = nx.softmax(Tensor(x), dim=1).data
    assert np.abs(out.sum(axis=1) - 1).max() < 1e-12
