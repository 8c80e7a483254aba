import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snipsearch.corpus_store import CompositionPolicy, DocumentRecord
from snipsearch.dense_retrieval import (
    DenseRetriever,
    DimensionError,
    EncoderParams,
    VectorIndex,
    build_vector_index,
    dense_search,
    dot_score,
    encode,
    encode_batch,
    featurize,
    load_dense_index,
    load_params,
    save_dense_index,
    save_params,
    token_hash,
)
from snipsearch.lexical_index import tokenize

F = 1 << 10


def rec(i, text):
    return DocumentRecord(i, text, CompositionPolicy.INFERENCE_FULL)


def test_token_hash_stable():
    # fixed value guards against accidental use of Python's salted hash()
    assert token_hash("valueerror") == int.from_bytes(
        __import__("hashlib").blake2b(b"valueerror", digest_size=8).digest(), "little")


def test_featurize_empty():
    fv = featurize([], F)
    assert fv.is_zero and not fv.to_dense().any()


def test_featurize_singleton():
    fv = featurize(["a"], F)
    assert fv.indices.tolist() == [token_hash("a") % F] and fv.values.tolist() == [1.0]


def test_featurize_counts_normalised():
    a, b = token_hash("a") % F, token_hash("b") % F
    assert a != b
    dense = featurize(["a", "a", "b"], F).to_dense()
    assert dense[a] == pytest.approx(2 / np.sqrt(5), abs=1e-15)
    assert dense[b] == pytest.approx(1 / np.sqrt(5), abs=1e-15)


def test_featurize_requires_power_of_two():
    with pytest.raises(ValueError):
        featurize(["a"], 1000)


@given(st.lists(st.text(min_size=1, max_size=4), min_size=1, max_size=30))
def test_featurize_unit_norm(tokens):
    fv = featurize(tokens, F)
    assert np.all(fv.indices < F)
    assert np.linalg.norm(fv.values) == pytest.approx(1.0, abs=1e-12)


def test_encode_zero_vector():
    p = EncoderParams.initialize(8, F, 0)
    assert not encode(p, featurize([], F)).any()


def test_encode_unit_bucket_is_column():
    W = np.zeros((4, 16))
    W[:, :4] = np.eye(4)
    p = EncoderParams(W)
    for tok in ["a", "b", "c", "d", "e"]:
        i = token_hash(tok) % 16
        assert np.array_equal(encode(p, featurize([tok], 16)), W[:, i])


def test_encode_deterministic_and_matches_batch():
    p = EncoderParams.initialize(16, F, 3)
    fvs = [featurize(tokenize(t), F) for t in ["x y z", "", "a a b"]]
    single = np.array([encode(p, fv) for fv in fvs])
    assert np.array_equal(single, np.array([encode(p, fv) for fv in fvs]))
    np.testing.assert_allclose(encode_batch(p, fvs), single, rtol=0, atol=1e-15)


def test_encode_dimension_mismatch():
    with pytest.raises(DimensionError):
        encode(EncoderParams.initialize(4, 16), featurize(["a"], 32))


def test_initialization_range():
    p = EncoderParams.initialize(64, F, 7)
    assert p.weight.shape == (64, F) and p.seed == 7
    assert np.abs(p.weight).max() <= 1 / np.sqrt(F)
    assert np.array_equal(p.weight, EncoderParams.initialize(64, F, 7).weight)


@pytest.mark.parametrize("W", [np.zeros((1, 16)), np.full((2, 4), np.nan)])
def test_params_invariants(W):
    with pytest.raises(ValueError):
        EncoderParams(W)


@pytest.mark.parametrize(
    "u, v, expected", [((1, 0), (0, 1), 0.0), ((1, 2), (3, 4), 11.0), ((3, 4), (3, 4), 25.0)]
)
def test_dot_score(u, v, expected):
    assert dot_score(np.array(u, float), np.array(v, float)) == expected


def test_dot_score_mismatch():
    with pytest.raises(DimensionError):
        dot_score(np.ones(2), np.ones(3))


@given(st.floats(0.01, 100), st.integers(0, 2**31))
def test_bilinearity(alpha, seed):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=5), rng.normal(size=5)
    assert dot_score(alpha * u, v) == pytest.approx(alpha * dot_score(u, v), rel=1e-12, abs=1e-12)


def test_vector_index_shapes():
    p = EncoderParams.initialize(8, F)
    assert len(build_vector_index(p, [])) == 0
    idx = build_vector_index(p, [rec(3, "a b"), rec(1, "c"), rec(2, "a")])
    assert idx.doc_ids.tolist() == [3, 1, 2] and idx.embeddings.shape == (3, 8)
    np.testing.assert_array_equal(idx.embeddings[1], encode(p, featurize(["c"], F)))
    assert np.array_equal(idx.embeddings, build_vector_index(p, [rec(3, "a b"), rec(1, "c"), rec(2, "a")]).embeddings)


def test_vector_index_duplicate_id():
    with pytest.raises(ValueError):
        build_vector_index(EncoderParams.initialize(4, 16), [rec(1, "a"), rec(1, "b")])


def test_search_aligned_query_first():
    emb = np.eye(4)
    idx = VectorIndex(np.array([10, 11, 12, 13]), emb)
    assert dense_search(idx, np.array([0, 0, 1.0, 0]), 2)[0] == (12, 1.0)


def test_search_zero_query_ties():
    idx = VectorIndex(np.array([5, 2, 9]), np.random.default_rng(0).normal(size=(3, 4)))
    assert [d for d, _ in dense_search(idx, np.zeros(4), 3)] == [2, 5, 9]


def test_search_empty_and_bad_k():
    idx = VectorIndex(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
    assert dense_search(idx, np.ones(4), 3) == []
    with pytest.raises(ValueError):
        dense_search(VectorIndex(np.array([1]), np.ones((1, 4))), np.ones(4), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 100))
def test_search_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    ids = rng.permutation(1000)[:100]
    # small integers keep every dot product exact, so ties are real ties
    emb = rng.integers(-3, 4, size=(100, 6)).astype(float)
    q = rng.integers(-3, 4, size=6).astype(float)
    brute = sorted(((float(sum(a * b for a, b in zip(row, q))), int(d)) for row, d in zip(emb, ids)),
                   key=lambda t: (-t[0], t[1]))
    got = dense_search(VectorIndex(ids, emb), q, k)
    assert [d for d, _ in got] == [d for _, d in brute[:k]]
    np.testing.assert_allclose([s for _, s in got], [s for s, _ in brute[:k]], atol=1e-12)


def test_full_search_is_permutation():
    rng = np.random.default_rng(1)
    idx = VectorIndex(np.arange(50), rng.normal(size=(50, 3)))
    res = dense_search(idx, rng.normal(size=3), 50)
    assert sorted(d for d, _ in res) == list(range(50))


def test_params_round_trip_deterministic(tmp_path):
    p = EncoderParams.initialize(8, 64, 11)
    save_params(p, tmp_path / "a.npz")
    save_params(p, tmp_path / "b.npz")
    q = load_params(tmp_path / "a.npz")
    assert np.array_equal(q.weight, p.weight) and q.seed == 11
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_params_wrong_file(tmp_path):
    r = DenseRetriever.build(EncoderParams.initialize(4, 16), [rec(1, "a")])
    save_dense_index(r, tmp_path / "i.npz")
    with pytest.raises(ValueError):
        load_params(tmp_path / "i.npz")


def test_dense_index_round_trip(tmp_path):
    p = EncoderParams.initialize(8, 256, 2)
    r = DenseRetriever.build(p, [rec(1, "alpha beta"), rec(2, "beta gamma"), rec(3, "delta")])
    r.max_query_len = 64
    save_dense_index(r, tmp_path / "i.npz")
    loaded = load_dense_index(tmp_path / "i.npz")
    assert loaded.doc_ids == {1, 2, 3} and loaded.max_query_len == 64
    assert loaded.search(["beta"], 3) == r.search(["beta"], 3)
