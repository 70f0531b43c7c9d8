import numpy as np
import pytest

from chat_transducer.decode import DecodeConfig, DecodePath, batched_decode, count_joiner_calls, greedy_decode
from chat_transducer.transducer import Transducer

from conftest import balanced_model, make_model


def two_token_chat():
    """Hand-set CHAT model over vocab {a=0, b=1}: emits a in chunk 0 and b in chunk 1.

    The encoder is a plain ReLU identity, keys are zero (uniform attention over
    two real frames plus the zero frame) and values are 1.5x, so the context
    equals the chunk's frame. The predictor embedding of a token cancels that
    token's feature, so after emitting it only the blank logit remains.
    """
    m = Transducer.create("chat", input_dim=3, vocab_size=2, d_enc=3, d_pred=3, d_joint=3, num_heads=1,
                          chunk_size=2, left_context=0, num_sa_layers=0, num_heads_enc=1)
    p = m.params
    p.assign("enc.in", np.eye(3))
    p.assign("pred.start", [0.0, 0.0, 1.0])
    p.assign("pred.embed", [[-1.0, 0.0, 1.0], [0.0, -1.0, 1.0]])
    p.assign("join.q", np.zeros((3, 3)))
    p.assign("join.k", np.zeros((3, 3)))
    p.assign("join.v", 1.5 * np.eye(3))
    p.assign("join.out", [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
    x = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0]])
    return m, x


def test_hand_set_chat_decode():
    m, x = two_token_chat()
    path = greedy_decode(m, x)
    assert path.tokens == [0, 1]
    assert path.emit_steps == [0, 1]
    assert path.blank_count == 2
    assert count_joiner_calls(path) == 4
    assert np.allclose(path.attn[0].weights, 1 / 3)


def _constant_output(variant, winner):
    """Model whose joiner hidden state is positive and whose output favours ``winner``."""
    m = make_model(variant=variant, vocab_size=3, d=4, heads=2, num_sa_layers=0)
    p = m.params
    for name in p:
        if name.startswith("join.") and name != "join.out":
            p.assign(name, np.zeros(p[name].shape))
    p.assign("pred.start", np.ones(4))
    p.assign("pred.embed", np.ones((3, 4)))
    if variant == "rnnt":
        p.assign("join.pred", np.eye(4))
    out = -np.ones((4, 4))
    out[:, winner] = 1.0
    p.assign("join.out", out)
    return m


@pytest.mark.parametrize("variant", ["rnnt", "chat"])
def test_always_blank(variant):
    m = _constant_output(variant, winner=3)
    path = greedy_decode(m, np.random.default_rng(0).normal(size=(10, 5)))
    assert path.tokens == []
    assert path.blank_count == m.num_steps(10)


@pytest.mark.parametrize("variant", ["rnnt", "chat"])
@pytest.mark.parametrize("cap", [1, 3])
def test_emission_cap(variant, cap):
    m = _constant_output(variant, winner=1)
    x = np.random.default_rng(0).normal(size=(10, 5))
    path = greedy_decode(m, x, DecodeConfig(cap))
    S = m.num_steps(10)
    assert path.tokens == [1] * (cap * S)
    assert path.blank_count == S
    assert path.emit_steps == [s for s in range(S) for _ in range(cap)]
    assert batched_decode(m, [x, x[:5]], DecodeConfig(cap))[0].same_output(path)


def test_count_joiner_calls_arithmetic():
    # T = 96 frames, C = 12, ten emitted tokens
    rnnt = DecodePath(tokens=list(range(10)), blank_count=96, num_steps=96, variant="rnnt")
    chat = DecodePath(tokens=list(range(10)), blank_count=8, num_steps=8, variant="chat")
    assert count_joiner_calls(rnnt) == 106
    assert count_joiner_calls(chat) == 18
    assert count_joiner_calls(rnnt) - count_joiner_calls(chat) == 96 - 8


def _assert_same(batched, sequential):
    assert batched.tokens == sequential.tokens
    assert batched.emit_steps == sequential.emit_steps
    assert batched.blank_count == sequential.blank_count
    assert len(batched.attn) == len(sequential.attn)
    for a, b in zip(batched.attn, sequential.attn):
        assert a.weights.tobytes() == b.weights.tobytes()


@pytest.mark.parametrize("variant", ["rnnt", "chat"])
@pytest.mark.parametrize("seed", range(6))
def test_batched_matches_sequential(variant, seed):
    rng = np.random.default_rng(seed)
    m = balanced_model(variant, seed, chunk_size=3)
    cfg = DecodeConfig(int(rng.choice([1, 3, 10])))
    xs = [rng.normal(size=(int(rng.integers(1, 20)), 5)) * 2 for _ in range(int(rng.integers(2, 9)))]
    for b, x in zip(batched_decode(m, xs, cfg), xs):
        _assert_same(b, greedy_decode(m, x, cfg))


@pytest.mark.parametrize("variant", ["rnnt", "chat"])
@pytest.mark.parametrize("seed", range(4))
def test_streaming_prefix_probe(variant, seed):
    # decoding a chunk-aligned prefix reproduces every emission from those chunks
    rng = np.random.default_rng(seed)
    m = balanced_model(variant, seed, chunk_size=3, left_context=1, num_sa_layers=2)
    cfg = DecodeConfig(3)
    x = rng.normal(size=(17, 5)) * 2
    full = greedy_decode(m, x, cfg)
    k = int(rng.integers(1, 6))
    prefix = greedy_decode(m, x[: 3 * k], cfg)
    limit = k if variant == "chat" else 3 * k
    kept = [(t, s) for t, s in zip(full.tokens, full.emit_steps) if s < limit]
    assert list(zip(prefix.tokens, prefix.emit_steps)) == kept


@pytest.mark.parametrize("variant", ["rnnt", "chat"])
def test_decode_structure(variant):
    m = balanced_model(variant, chunk_size=4)
    x = np.random.default_rng(3).normal(size=(13, 5)) * 2
    path = greedy_decode(m, x, DecodeConfig(3))
    assert path.blank_count == m.num_steps(13)
    assert path.emit_steps == sorted(path.emit_steps)
    assert all(0 <= s < path.num_steps for s in path.emit_steps)
    assert all(0 <= t < 6 for t in path.tokens)
    if variant == "chat":
        assert len(path.attn) == len(path.tokens)
        for rec, s in zip(path.attn, path.emit_steps):
            assert rec.weights.shape == (2, min(4, 13 - 4 * s) + 1)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        batched_decode(make_model(), [])
