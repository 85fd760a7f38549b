import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iptkit import tensorcore as tc
from iptkit.encoder import Encoder, parser_inputs, pool_words
from iptkit.parsehead import (
    BiaffineParams,
    ParseScores,
    parsing_loss,
    score,
    score_arcs,
    score_rels,
)
from iptkit.tensorcore import DimensionError, Tensor
from iptkit.tokenizer import CLS, SEP, Alignment

from gradcheck import check


def random_params(H, R, seed):
    p = BiaffineParams(H, R, seed=seed, init="xavier_uniform")
    rng = np.random.default_rng(seed + 1)
    p.b_arc.data = rng.normal(size=H)
    p.b_rel.data = rng.normal(size=(H, R))
    return p


def random_inputs(N, H, seed):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(N, H))), Tensor(rng.normal(size=(N + 1, H)))


def loop_arcs(X, Xh, W, b):
    N, H = X.shape
    Y = np.zeros((N, N + 1))
    for i in range(N):
        for j in range(N + 1):
            total = 0.0
            for a in range(H):
                for c in range(H):
                    total += X[i, a] * W[a, c] * Xh[j, c]
                total += b[a] * Xh[j, a]
            Y[i, j] = total
    return Y


def loop_rels(X, Xh, W, b):
    R = W.shape[2]
    return np.stack([loop_arcs(X, Xh, W[:, :, r], b[:, r]) for r in range(R)], axis=2)


def loop_loss(arc, rel, heads, rels):
    def nll(row, gold):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        return lse - row[gold]
    N = arc.shape[0]
    a = sum(nll(list(arc[i]), heads[i]) for i in range(N)) / N
    r = sum(nll(list(rel[i, heads[i]]), rels[i]) for i in range(N)) / N
    return a + r


def test_default_init_is_zero_and_shapes():
    p = BiaffineParams(8, 3)
    assert p.W_arc.shape == (8, 8) and p.b_arc.shape == (8,)
    assert p.W_rel.shape == (8, 8, 3) and p.b_rel.shape == (8, 3)
    X, Xh = random_inputs(4, 8, 0)
    assert np.all(score_arcs(X, Xh, p).data == 0)
    assert np.all(score_rels(X, Xh, p).data == 0)
    assert set(p.params) == {"parse/W_arc", "parse/b_arc", "parse/W_rel", "parse/b_rel"}
    with pytest.raises(ValueError):
        BiaffineParams(8, 0)


def test_hand_example():
    p = BiaffineParams(2, 1)
    p.W_arc.data = np.eye(2)
    X = Tensor(np.array([[1.0, 0.0]]))
    Xh = Tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(score_arcs(X, Xh, p).data, [[0.0, 1.0]])


def test_identity_recovers_dot_product():
    rng = np.random.default_rng(3)
    x, xh = rng.normal(size=5), rng.normal(size=(2, 5))
    p = BiaffineParams(5, 1)
    p.W_arc.data = np.eye(5)
    Y = score_arcs(Tensor(x[None]), Tensor(xh), p).data
    np.testing.assert_allclose(Y[0], xh @ x, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_matches_loop_reference(seed):
    N, H, R = 4, 3, 3
    p = random_params(H, R, seed)
    X, Xh = random_inputs(N, H, seed)
    np.testing.assert_allclose(score_arcs(X, Xh, p).data,
                               loop_arcs(X.data, Xh.data, p.W_arc.data, p.b_arc.data), atol=1e-10)
    np.testing.assert_allclose(score_rels(X, Xh, p).data,
                               loop_rels(X.data, Xh.data, p.W_rel.data, p.b_rel.data), atol=1e-10)


def test_single_relation_collapses_to_arcs():
    p = random_params(4, 1, 7)
    q = BiaffineParams(4, 1)
    q.W_arc.data = p.W_rel.data[:, :, 0].copy()
    q.b_arc.data = p.b_rel.data[:, 0].copy()
    X, Xh = random_inputs(5, 4, 2)
    np.testing.assert_allclose(score_rels(X, Xh, p).data[:, :, 0], score_arcs(X, Xh, q).data,
                               atol=1e-12)


def test_shape_mismatch():
    p = BiaffineParams(4, 2)
    X, Xh = random_inputs(3, 4, 0)
    with pytest.raises(DimensionError):
        score_arcs(X, Tensor(Xh.data[:3]), p)
    with pytest.raises(DimensionError):
        score_rels(Tensor(X.data[:, :3]), Xh, p)


@given(st.floats(-5, 5), st.integers(0, 1000))
def test_bilinearity(alpha, seed):
    p = random_params(3, 2, seed)
    p.b_arc.data[:] = 0
    X, Xh = random_inputs(3, 3, seed)
    a = score_arcs(Tensor(alpha * X.data), Xh, p).data
    np.testing.assert_allclose(a, alpha * score_arcs(X, Xh, p).data, atol=1e-9)


@pytest.mark.parametrize("N, R", [(1, 1), (3, 2), (7, 5), (12, 37)])
def test_zero_scores_give_uniform_loss(N, R):
    s = ParseScores(Tensor(np.zeros((N, N + 1))), Tensor(np.zeros((N, N + 1, R))))
    heads = [0] + [1] * (N - 1)
    loss = parsing_loss(s, heads, [0] * N).item()
    assert loss == pytest.approx(math.log(N + 1) + math.log(R), abs=1e-12)


def test_saturation():
    N, R = 3, 2
    heads, rels = [2, 0, 2], [1, 0, 1]
    arc = np.zeros((N, N + 1))
    rel = np.zeros((N, N + 1, R))
    for i in range(N):
        arc[i, heads[i]] = 1000
        rel[i, heads[i], rels[i]] = 1000
    assert parsing_loss(ParseScores(Tensor(arc), Tensor(rel)), heads, rels).item() < 1e-12


def test_relation_loss_read_at_gold_head():
    N, R = 2, 2
    rel = np.zeros((N, N + 1, R))
    rel[:, 1, 0] = 50.0  # confident but at a non-gold head column
    s = ParseScores(Tensor(np.zeros((N, N + 1))), Tensor(rel))
    assert parsing_loss(s, [0, 0], [1, 1]).item() == pytest.approx(math.log(3) + math.log(2))


@pytest.mark.parametrize("seed", range(10))
def test_loss_matches_loop_reference(seed):
    rng = np.random.default_rng(seed)
    N, R = int(rng.integers(1, 8)), int(rng.integers(1, 6))
    arc, rel = rng.normal(scale=3, size=(N, N + 1)), rng.normal(scale=3, size=(N, N + 1, R))
    heads = [int(h) for h in rng.integers(0, N + 1, size=N)]
    rels = [int(r) for r in rng.integers(0, R, size=N)]
    got = parsing_loss(ParseScores(Tensor(arc), Tensor(rel)), heads, rels).item()
    assert got >= 0
    assert abs(got - loop_loss(arc, rel, heads, rels)) < 1e-10


def test_loss_index_errors():
    s = ParseScores(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3, 2))))
    with pytest.raises(IndexError):
        parsing_loss(s, [0, 3], [0, 0])
    with pytest.raises(IndexError):
        parsing_loss(s, [0, 1], [0, 2])
    with pytest.raises(DimensionError):
        parsing_loss(s, [0], [0])


def test_gradient_wrt_biaffine_params():
    N, H, R = 3, 4, 3
    p = random_params(H, R, 5)
    X, Xh = random_inputs(N, H, 5)
    heads, rels = [2, 0, 2], [1, 0, 2]
    names = list(p.params)

    def build(ts):
        q = BiaffineParams(H, R)
        q.params.update(dict(zip(names, ts)))
        return parsing_loss(score(X, Xh, q), heads, rels)
    assert check(build, [p.params[n].data for n in names]) < 1e-4


def test_gradient_through_encoder(tiny_config):
    enc = Encoder(tiny_config(20, layers=1, hidden=8, ffn_size=8, max_len=8), seed=1)
    p = random_params(8, 2, 3)
    ids = [CLS, 7, 8, 9, SEP]
    al = Alignment(((1, 3), (3, 4)))
    enc_names = ["base/layer0/attn/out_w", "base/emb/tok"]
    par_names = list(p.params)

    def build(ts):
        saved = {n: enc.params[n] for n in enc_names}
        enc.params.update(dict(zip(enc_names, ts[:2])))
        q = BiaffineParams(8, 2)
        q.params.update(dict(zip(par_names, ts[2:])))
        try:
            state = enc.encode(ids)[-1]
            X = pool_words(state, al)
            return parsing_loss(score(X, parser_inputs(state, X), q), [0, 1], [1, 0])
        finally:
            enc.params.update(saved)
    arrays = [enc.params[n].data for n in enc_names] + [p.params[n].data for n in par_names]
    assert check(build, arrays) < 1e-4
