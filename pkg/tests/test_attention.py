import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlattn import _backend
from mlattn.attention import (EPS, AttentionWeights, HeadGeometry, Mechanism, ReweightLengths,
                              cosformer_feature_maps, linear_attention, multi_head_attention,
                              relu_feature_map, reweight_matrix, scaled_dot_attention,
                              similarity_attention_oracle)
from mlattn.numerics import ConfigError, Rng, ShapeError, max_rel_error


def loop_attention(q, k, v, weight, causal):
    """Scalar-loop reference: row i = sum_j w(i, j) v_j / sum_j w(i, j)."""
    out = np.zeros((len(q), len(v[0])))
    for i in range(len(q)):
        ws = []
        for j in range(len(k)):
            if causal and j > i:
                continue
            ws.append((j, weight(i, j)))
        total = sum(w for _, w in ws)
        for c in range(len(v[0])):
            out[i, c] = sum(w * v[j][c] for j, w in ws) / max(total, EPS)
    return out


def softmax_loop(q, k, v, causal):
    d = len(q[0])
    scores = [[sum(a * b for a, b in zip(q[i], k[j])) / math.sqrt(d) for j in range(len(k))]
              for i in range(len(q))]
    top = [max(s[: i + 1] if causal else s) for i, s in enumerate(scores)]
    return loop_attention(q, k, v, lambda i, j: math.exp(scores[i][j] - top[i]), causal)


def linear_loop(q, k, v, causal, lengths=None):
    def weight(i, j):
        w = sum(max(a, 0.0) * max(b, 0.0) for a, b in zip(q[i], k[j]))
        if lengths is not None:
            w *= math.cos(math.pi / 2 * (i / lengths[0] - j / lengths[1]))
        return w
    return loop_attention(q, k, v, weight, causal)


def test_single_key_softmax():
    assert np.allclose(scaled_dot_attention([[1, 0]], [[1, 0]], [[3, 4]]), [[3, 4]], rtol=0, atol=1e-15)


def test_equal_scores_average_values():
    out = scaled_dot_attention([[0, 0]], [[1, 2], [3, 4]], [[2, 0], [0, 2]])
    assert np.allclose(out, [[1, 1]], rtol=0, atol=1e-15)


@pytest.mark.parametrize("causal", [False, True])
def test_softmax_matches_loop_oracle(backend, causal):
    rng = Rng(21)
    q, k, v = (rng.uniform((8, 4), -1, 1) for _ in range(3))
    want = softmax_loop(q.tolist(), k.tolist(), v.tolist(), causal)
    assert max_rel_error(scaled_dot_attention(q, k, v, causal), want) <= 1e-9


def test_relu_feature_map_examples():
    assert relu_feature_map([[-1, 2]]).tolist() == [[0.0, 2.0]]
    assert not relu_feature_map(-np.ones((3, 4))).any()


def test_cosformer_feature_boundaries():
    m = np.array([[1.0, -2.0, 3.0], [0.5, 0.5, -1.0]])
    c, s = cosformer_feature_maps(m, [0, 0], 7)
    assert np.array_equal(c, relu_feature_map(m)) and not s.any()
    c, s = cosformer_feature_maps(m, [7, 7], 7)
    assert np.max(np.abs(c)) <= 1e-12
    assert np.allclose(s, relu_feature_map(m), rtol=0, atol=1e-15)


def test_cosformer_multiplier_edge_values():
    lengths = ReweightLengths(4, 4)
    assert np.allclose(np.diag(reweight_matrix(4, 4, lengths)), 1.0, rtol=0, atol=0)
    # i/N - j/M = 1 gives a quarter period
    assert abs(reweight_matrix(5, 1, ReweightLengths(4, 4))[4, 0]) <= 1e-15


def test_linear_one_part_example():
    assert linear_attention([[1.0]], [[2.0]], [[5.0]]).tolist() == [[5.0]]


def test_relu_single_positive_pair_returns_value_row():
    out = similarity_attention_oracle([[1.0, 2.0]], [[3.0, 0.5]], [[7.0, -1.0, 2.0]], "relu")
    assert np.allclose(out, [[7.0, -1.0, 2.0]], rtol=1e-15, atol=0)
    got = linear_attention(relu_feature_map([[1.0, 2.0]]), relu_feature_map([[3.0, 0.5]]), [[7.0, -1.0, 2.0]])
    assert np.allclose(got, [[7.0, -1.0, 2.0]], rtol=1e-15, atol=0)


def test_zero_denominator_is_guarded():
    out = linear_attention(relu_feature_map([[-1.0, -1.0]]), relu_feature_map([[1.0, 1.0]]), [[3.0, 4.0]])
    assert np.all(np.isfinite(out)) and not out.any()


@pytest.mark.parametrize("causal", [False, True])
def test_relu_linear_matches_loop_oracle(backend, causal):
    rng = Rng(4)
    q, k, v = rng.uniform((32, 8), -1, 1), rng.uniform((32, 8), -1, 1), rng.uniform((32, 5), -1, 1)
    got = linear_attention(relu_feature_map(q), relu_feature_map(k), v, causal)
    want = linear_loop(q.tolist(), k.tolist(), v.tolist(), causal)
    assert max_rel_error(got, want) <= 1e-9
    assert max_rel_error(got, similarity_attention_oracle(q, k, v, "relu", causal=causal)) <= 1e-9


def test_cosformer_cross_matches_loop_oracle(backend):
    rng = Rng(5)
    q, k, v = rng.uniform((24, 6), -1, 1), rng.uniform((40, 6), -1, 1), rng.uniform((40, 3), -1, 1)
    lengths = ReweightLengths(24, 40)
    got = linear_attention(cosformer_feature_maps(q, np.arange(24), 24),
                           cosformer_feature_maps(k, np.arange(40), 40), v)
    want = linear_loop(q.tolist(), k.tolist(), v.tolist(), False, (24, 40))
    assert max_rel_error(got, want) <= 1e-9
    assert max_rel_error(got, similarity_attention_oracle(q, k, v, "cosformer", lengths)) <= 1e-9


def test_backends_agree():
    if len(_backend.available()) < 2:
        pytest.skip("compiled backend not built")
    rng = Rng(8)
    q, k, v = rng.uniform((3, 17, 5), -1, 1), rng.uniform((3, 17, 5), -1, 1), rng.uniform((3, 17, 4), -1, 1)
    qf, kf = np.maximum(q, 0), np.maximum(k, 0)
    compiled, python = _backend.load("compiled"), _backend.load("python")
    for causal in (False, True):
        a = compiled.softmax_attention(q, k, v, causal, 0.5)
        b = python.softmax_attention(q, k, v, causal, 0.5)
        assert np.max(np.abs(a - b)) <= 1e-13
        a = compiled.linear_attention(qf, kf, v, causal, EPS)
        b = python.linear_attention(qf, kf, v, causal, EPS)
        assert np.max(np.abs(a - b)) <= 1e-13


def test_shape_errors():
    with pytest.raises(ShapeError):
        scaled_dot_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 1)))
    with pytest.raises(ShapeError):
        linear_attention(np.ones((2, 3)), np.ones((3, 3)), np.ones((2, 1)))


def test_head_geometry_requires_even_split():
    assert HeadGeometry(4, 32).d_kh == 8
    with pytest.raises(ConfigError):
        HeadGeometry(3, 32)


def test_single_identity_head_is_plain_attention():
    rng = Rng(6)
    x = rng.uniform((6, 8), -1, 1)
    eye = np.eye(8)
    w = AttentionWeights(eye, eye, eye, eye)
    out = multi_head_attention(x, x, x, w, 1, "softmax")
    assert np.max(np.abs(out - scaled_dot_attention(x, x, x))) <= 1e-15


def test_two_heads_match_hand_split_loop():
    rng = Rng(7)
    x = rng.uniform((6, 8), -1, 1)
    w = AttentionWeights(*(rng.uniform((8, 8), -0.5, 0.5) for _ in range(4)))
    q, k, v = x @ w.wq, x @ w.wk, x @ w.wv
    heads = [softmax_loop(q[:, s].tolist(), k[:, s].tolist(), v[:, s].tolist(), False)
             for s in (slice(0, 4), slice(4, 8))]
    want = np.concatenate(heads, axis=1) @ w.wo
    assert max_rel_error(multi_head_attention(x, x, x, w, 2, "softmax"), want) <= 1e-9
    with pytest.raises(ConfigError):
        multi_head_attention(x, x, x, w, 3, "softmax")


@pytest.mark.parametrize("mech", list(Mechanism))
def test_multi_head_fast_path_matches_oracle(mech):
    rng = Rng(12)
    q, kv = rng.uniform((9, 16), -1, 1), rng.uniform((13, 16), -1, 1)
    w = AttentionWeights(*(rng.uniform((16, 16), -0.5, 0.5) for _ in range(4)))
    lengths = ReweightLengths(9, 13)
    for causal in (False, True):
        fast = multi_head_attention(q, kv, kv, w, 4, mech, lengths, causal)
        slow = multi_head_attention(q, kv, kv, w, 4, mech, lengths, causal, oracle=True)
        assert max_rel_error(fast, slow) <= 1e-9


def test_mechanism_parse():
    assert Mechanism.parse("ReLU") is Mechanism.RELU
    assert Mechanism.COSFORMER.parts == 2 and Mechanism.RELU.parts == 1
    with pytest.raises(ConfigError):
        Mechanism.parse("performer")


small = st.integers(1, 12)
seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=50, deadline=None)
@given(small, small, small, seeds)
def test_softmax_rows_are_convex_combinations(n1, n2, d, seed):
    rng = Rng(seed)
    q, k, v = rng.uniform((n1, d), -3, 3), rng.uniform((n2, d), -3, 3), rng.uniform((n2, 3), -1, 1)
    out = scaled_dot_attention(q, k, v)
    assert np.all(out >= v.min(axis=0) - 1e-12) and np.all(out <= v.max(axis=0) + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(list(Mechanism)), small, seeds, st.integers(0, 11))
def test_causal_outputs_ignore_future_rows(mech, n, seed, j):
    j = j % n
    rng = Rng(seed)
    q, k, v = rng.uniform((n, 4), -1, 1), rng.uniform((n, 4), -1, 1), rng.uniform((n, 3), -1, 1)
    lengths = ReweightLengths(n, n)
    base = similarity_attention_oracle(q, k, v, mech, lengths, causal=True)
    k[j:] = rng.uniform((n - j, 4), -9, 9)
    v[j:] = rng.uniform((n - j, 3), -9, 9)
    assert np.array_equal(similarity_attention_oracle(q, k, v, mech, lengths, causal=True)[:j], base[:j])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 39))
def test_cosformer_weight_peaks_at_nearest_relative_position(n, m, i):
    i = i % n
    w = reweight_matrix(n, m, ReweightLengths(n, m))[i]
    diff = np.abs(i / n - np.arange(m) / m)
    valid = diff <= 1
    best = np.argmax(np.where(valid, w, -np.inf))
    # ties in |i/N - j/M| may differ by rounding, so compare within a tolerance
    assert diff[best] <= diff[valid].min() + 1e-12
    assert np.all(w[valid] >= -1e-15)


@settings(max_examples=50, deadline=None)
@given(small, small, small, seeds)
def test_linear_similarities_are_nonnegative(n1, n2, d, seed):
    rng = Rng(seed)
    q, k = rng.uniform((n1, d), -1, 1), rng.uniform((n2, d), -1, 1)
    # positions chosen so that |i/N - j/M| <= 1 holds everywhere
    qc, qs = cosformer_feature_maps(q, np.arange(n1), n1)
    kc, ks = cosformer_feature_maps(k, np.arange(n2), n2)
    assert np.all(qc @ kc.T + qs @ ks.T >= -1e-15)
    assert np.all(relu_feature_map(q) @ relu_feature_map(k).T >= 0)
