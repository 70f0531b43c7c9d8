import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chat_transducer import numerics as nx
from chat_transducer.errors import SizeError, VocabularyError
from chat_transducer.lattice import (
    JointLattice,
    best_path,
    enumerate_paths,
    log_likelihood,
    oracle_loss,
    transducer_loss,
)
from chat_transducer.numerics import Tensor


def random_lattice(rng, S, U, V, spread=3.0):
    z = rng.normal(size=(S, U + 1, V + 1)) * spread
    z -= np.log(np.exp(z).sum(-1, keepdims=True))
    return JointLattice(Tensor(z)), rng.integers(V, size=U).tolist()


def max_path_score(lat, y):
    z = lat.logp.data
    S, U = lat.num_steps, len(y)
    best = -math.inf
    for moves in enumerate_paths(S, U):
        s = u = 0
        total = 0.0
        for is_label in moves:
            if is_label:
                total += z[s, u, y[u]]
                u += 1
            else:
                total += z[s, u, lat.blank]
                s += 1
        best = max(best, total + z[S - 1, U, lat.blank])
    return best


def _probs_lattice(rows):
    return JointLattice(Tensor(np.log(np.array(rows, dtype=float))))


def test_single_step_single_label():
    # p(y at (0,0)) = 0.6, p(blank at (0,1)) = 0.7
    lat = _probs_lattice([[[0.6, 0.4], [0.3, 0.7]]])
    assert transducer_loss(lat, [0]).item() == pytest.approx(-math.log(0.42), abs=1e-12)
    assert transducer_loss(lat, [0]).item() == pytest.approx(0.8675, abs=1e-4)


def test_two_steps_one_label_sums_both_paths():
    p = [[[0.5, 0.5], [0.2, 0.8]], [[0.3, 0.7], [0.1, 0.9]]]
    # emit at step 0: 0.5 * 0.8 * 0.9 ; emit at step 1: 0.5 * 0.3 * 0.9
    expected = -math.log(0.5 * 0.8 * 0.9 + 0.5 * 0.3 * 0.9)
    lat = _probs_lattice(p)
    assert transducer_loss(lat, [0]).item() == pytest.approx(expected, abs=1e-12)
    assert oracle_loss(lat, [0]) == pytest.approx(expected, abs=1e-12)


def test_uniform_lattice_is_log_four():
    lat = _probs_lattice(np.full((2, 2, 2), 0.5))
    assert transducer_loss(lat, [0]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_empty_target():
    lat = _probs_lattice([[[0.4, 0.6]], [[0.5, 0.5]]])
    assert transducer_loss(lat, []).item() == pytest.approx(-math.log(0.3), abs=1e-12)


def test_path_count_is_binomial():
    for S in range(1, 5):
        for U in range(0, 5):
            assert sum(1 for _ in enumerate_paths(S, U)) == math.comb(S + U - 1, U)


@pytest.mark.parametrize("seed", range(40))
def test_dp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    S, U, V = int(rng.integers(1, 6)), int(rng.integers(0, 6)), int(rng.integers(1, 5))
    lat, y = random_lattice(rng, S, U, V)
    assert abs(transducer_loss(lat, y).item() - oracle_loss(lat, y)) < 1e-9


def test_oracle_size_limit():
    lat, y = random_lattice(np.random.default_rng(0), 8, 7, 2)
    with pytest.raises(SizeError):
        oracle_loss(lat, y)


def test_vocabulary_and_shape_errors():
    lat, _ = random_lattice(np.random.default_rng(0), 2, 2, 3)
    with pytest.raises(VocabularyError):
        transducer_loss(lat, [0, 3])
    with pytest.raises(nx.DimensionError):
        transducer_loss(lat, [0])


def test_zero_probability_target_raises():
    with np.errstate(divide="ignore"):
        logp = np.log(np.array([[[0.0, 1.0], [0.5, 0.5]]]))
    with pytest.raises(nx.NonFiniteError):
        transducer_loss(JointLattice(Tensor(logp)), [0])


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    lat, y = random_lattice(rng, 3, 2, 2, spread=1.0)
    z = lat.logp.data
    t = Tensor(z, requires_grad=True)
    with nx.Graph() as g:
        loss = transducer_loss(JointLattice(t), y)
    g.backward(loss)
    num = np.zeros_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp.reshape(-1)[i] += 1e-6
        zm.reshape(-1)[i] -= 1e-6
        num.reshape(-1)[i] = (oracle_loss(JointLattice(Tensor(zp)), y) - oracle_loss(JointLattice(Tensor(zm)), y)) / 2e-6
    assert np.abs(num - t.grad).max() / np.abs(num).max() < 1e-6


def test_gradient_is_negative_posterior():
    # occupancies of blank moves in each step sum to one
    lat, y = random_lattice(np.random.default_rng(3), 4, 3, 3)
    t = Tensor(lat.logp.data, requires_grad=True)
    with nx.Graph() as g:
        loss = transducer_loss(JointLattice(t), y)
    g.backward(loss)
    assert np.allclose(-t.grad[:, :, -1].sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(-t.grad[:, :, :-1].sum(), len(y), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_vocabulary_relabel_invariance(seed):
    rng = np.random.default_rng(seed)
    V = 4
    lat, y = random_lattice(rng, 3, 3, V)
    perm = rng.permutation(V)
    z = lat.logp.data
    relabeled = z.copy()
    relabeled[:, :, perm] = z[:, :, :V]
    y2 = [int(perm[k]) for k in y]
    assert abs(log_likelihood(lat, y) - log_likelihood(JointLattice(Tensor(relabeled)), y2)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_raising_target_probability_lowers_loss(seed):
    rng = np.random.default_rng(seed)
    lat, y = random_lattice(rng, 3, 2, 3)
    if not y:
        return
    before = transducer_loss(lat, y).item()
    s = int(rng.integers(3))
    bumped = lat.logp.data.copy()
    bumped[s, 0, y[0]] += 0.5
    assert transducer_loss(JointLattice(Tensor(bumped)), y).item() <= before + 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_best_path_structure(seed):
    rng = np.random.default_rng(seed)
    S, U = int(rng.integers(1, 6)), int(rng.integers(0, 5))
    lat, y = random_lattice(rng, S, U, 3)
    path = best_path(lat, y)
    assert path.num_blanks == S
    assert path.num_labels == U
    steps = path.emit_steps()
    assert steps == sorted(steps)
    assert [k for _, _, k in path.moves if k != lat.blank] == y
    assert path.logprob <= log_likelihood(lat, y) + 1e-12
    assert path.logprob == pytest.approx(max_path_score(lat, y), abs=1e-12)


def test_best_path_ties_prefer_blank():
    lat = _probs_lattice(np.full((2, 2, 2), 0.5))
    # the cell recursion picks the blank predecessor at (1, 1): emit, blank, blank
    path = best_path(lat, [0])
    assert [k for _, _, k in path.moves] == [0, lat.blank, lat.blank]
    assert path.emit_steps() == [0]
