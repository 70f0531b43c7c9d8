"""Transducer negative log-likelihood over a (decision-step x label-position) lattice.

Decision steps are frames for RNN-T and chunks for CHAT; the recursion is the
same for both. A blank at (s, u) moves to (s + 1, u); emitting y[u] at (s, u)
moves to (s, u + 1). Every alignment ends with the blank at (S - 1, U).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .errors import SizeError, VocabularyError
from .numerics import Tensor

NEG_INF = -math.inf
ORACLE_MAX_SIZE = 14


@dataclass
class JointLattice:
    """Log-probabilities [S, U+1, V+1]; the last symbol is blank."""

    logp: Tensor
    attention: np.ndarray | None = None  # CHAT only: [S, H, U+1, C+1] weights

    def __post_init__(self):
        if self.logp.ndim != 3 or self.logp.shape[0] < 1:
            raise nx.DimensionError(f"lattice must be [S>=1, U+1, V+1], got {list(self.logp.shape)}")

    @property
    def num_steps(self) -> int:
        return self.logp.shape[0]

    @property
    def num_labels(self) -> int:
        return self.logp.shape[1] - 1

    @property
    def blank(self) -> int:
        return self.logp.shape[2] - 1

    @property
    def num_elements(self) -> int:
        return int(self.logp.data.size)


@dataclass
class AlignmentPath:
    """Sequence of (step, label_position, symbol) moves ending in the final blank."""

    moves: list[tuple[int, int, int]]
    blank: int
    logprob: float = 0.0

    @property
    def num_blanks(self) -> int:
        return sum(1 for _, _, k in self.moves if k == self.blank)

    @property
    def num_labels(self) -> int:
        return len(self.moves) - self.num_blanks

    def emit_steps(self) -> list[int]:
        return [s for s, _, k in self.moves if k != self.blank]


def _lae(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def _split_lattice(logp: np.ndarray, target: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Blank log-probs [S, U+1] and target-emission log-probs [S, U]."""
    S, U1, V1 = logp.shape
    U = len(target)
    if U1 != U + 1:
        raise nx.DimensionError(f"lattice has {U1 - 1} label positions but target has length {U}")
    for y in target:
        if not 0 <= y < V1 - 1:
            raise VocabularyError(f"target id {y} outside [0, {V1 - 1})")
    blank = logp[:, :, V1 - 1]
    emit = logp[:, np.arange(U), np.asarray(target, dtype=np.int64)] if U else np.zeros((S, 0))
    return blank, emit


def forward_variables(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    """alpha[s, u]: log-probability of reaching (s, u) before acting there."""
    S, U1 = blank.shape
    b = blank.tolist()
    y = emit.tolist()
    alpha = [[NEG_INF] * U1 for _ in range(S)]
    alpha[0][0] = 0.0
    for s in range(S):
        row = alpha[s]
        prev = alpha[s - 1] if s else None
        bprev = b[s - 1] if s else None
        ys = y[s]
        for u in range(U1):
            if s == 0 and u == 0:
                continue
            a = prev[u] + bprev[u] if prev is not None else NEG_INF
            c = row[u - 1] + ys[u - 1] if u else NEG_INF
            row[u] = _lae(a, c)
    return np.array(alpha)


def backward_variables(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    """beta[s, u]: log-probability of finishing from (s, u), final blank included."""
    S, U1 = blank.shape
    b = blank.tolist()
    y = emit.tolist()
    beta = [[NEG_INF] * U1 for _ in range(S)]
    U = U1 - 1
    beta[S - 1][U] = b[S - 1][U]
    for s in range(S - 1, -1, -1):
        row = beta[s]
        nxt = beta[s + 1] if s + 1 < S else None
        for u in range(U, -1, -1):
            if s == S - 1 and u == U:
                continue
            a = b[s][u] + nxt[u] if nxt is not None else NEG_INF
            c = y[s][u] + row[u + 1] if u < U else NEG_INF
            row[u] = _lae(a, c)
    return np.array(beta)


def log_likelihood(lattice: JointLattice, target: Sequence[int]) -> float:
    blank, emit = _split_lattice(lattice.logp.data, target)
    alpha = forward_variables(blank, emit)
    return float(alpha[-1, -1] + blank[-1, -1])


def transducer_loss(lattice: JointLattice, target: Sequence[int]) -> Tensor:
    """-log P(target | lattice), summed over all alignments.

    The result is a scalar tensor on the active graph; its backward pass
    distributes the alignment posteriors onto the lattice entries.
    """
    logp = lattice.logp
    blank, emit = _split_lattice(logp.data, target)
    alpha = forward_variables(blank, emit)
    log_z = alpha[-1, -1] + blank[-1, -1]
    if not math.isfinite(log_z):
        raise nx.NonFiniteError("transducer lattice assigns zero probability to the target")
    S, U1, V1 = logp.shape
    U = U1 - 1
    tgt = np.asarray(target, dtype=np.int64)

    def backward(g):
        beta = backward_variables(blank, emit)
        nxt_blank = np.full((S, U1), NEG_INF)
        nxt_blank[:-1] = beta[1:]
        nxt_blank[-1, -1] = 0.0
        grad = np.zeros((S, U1, V1))
        with np.errstate(under="ignore"):
            grad[:, :, V1 - 1] = -np.exp(alpha + blank + nxt_blank - log_z)
            if U:
                grad[:, np.arange(U), tgt] = -np.exp(alpha[:, :U] + emit + beta[:, 1:] - log_z)
        return (grad * float(np.asarray(g).reshape(-1)[0]),)

    return nx.custom_op(np.asarray(-log_z), (logp,), backward, "transducer_loss")


def batch_loss(items: Sequence[tuple[JointLattice, Sequence[int]]]) -> Tensor:
    """Mean of per-utterance losses, reduced in input order."""
    if not items:
        raise ValueError("empty batch")
    total = None
    for lat, tgt in items:
        loss = transducer_loss(lat, tgt)
        total = loss if total is None else nx.add(total, loss)
    return nx.scale(total, 1.0 / len(items))


def enumerate_paths(S: int, U: int) -> Iterator[tuple[bool, ...]]:
    """Yield each alignment as a tuple of booleans (True = label move), final blank excluded."""
    n = S + U - 1
    for pos in itertools.combinations(range(n), U):
        moves = [False] * n
        for p in pos:
            moves[p] = True
        yield tuple(moves)


def oracle_loss(lattice: JointLattice, target: Sequence[int]) -> float:
    """Exhaustive alignment enumeration; independent of the dynamic program."""
    logp = lattice.logp.data
    S, U = lattice.num_steps, len(target)
    if S + U > ORACLE_MAX_SIZE:
        raise SizeError(f"S + U = {S + U} exceeds the enumeration limit {ORACLE_MAX_SIZE}")
    _split_lattice(logp, target)
    blank = lattice.blank
    scores = []
    for moves in enumerate_paths(S, U):
        s = u = 0
        total = 0.0
        for is_label in moves:
            if is_label:
                total += logp[s, u, target[u]]
                u += 1
            else:
                total += logp[s, u, blank]
                s += 1
        total += logp[S - 1, U, blank]
        scores.append(total)
    scores = np.array(scores)
    m = scores.max()
    return float(-(m + math.log(np.exp(scores - m).sum())))


def best_path(lattice: JointLattice, target: Sequence[int]) -> AlignmentPath:
    """Max-probability alignment; ties go to the blank (step-advancing) predecessor."""
    blank_lp, emit = _split_lattice(lattice.logp.data, target)
    S, U1 = blank_lp.shape
    delta = np.full((S, U1), NEG_INF)
    from_blank = np.zeros((S, U1), dtype=bool)
    delta[0, 0] = 0.0
    for s in range(S):
        for u in range(U1):
            if s == 0 and u == 0:
                continue
            a = delta[s - 1, u] + blank_lp[s - 1, u] if s else NEG_INF
            c = delta[s, u - 1] + emit[s, u - 1] if u else NEG_INF
            if a >= c:
                delta[s, u], from_blank[s, u] = a, True
            else:
                delta[s, u] = c
    blank = lattice.blank
    moves = [(S - 1, U1 - 1, blank)]
    s, u = S - 1, U1 - 1
    while (s, u) != (0, 0):
        if from_blank[s, u]:
            s -= 1
            moves.append((s, u, blank))
        else:
            u -= 1
            moves.append((s, u, int(target[u])))
    moves.reverse()
    return AlignmentPath(moves, blank, float(delta[-1, -1] + blank_lp[-1, -1]))
