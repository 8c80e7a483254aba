import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snipsearch.corpus_store import CompositionPolicy, DocumentRecord
from snipsearch.lexical_index import (
    Bm25Retriever,
    IndexBuildError,
    bm25_score,
    bm25_scores,
    bm25_search,
    build_bm25_index,
    idf,
    load_bm25_index,
    save_bm25_index,
    tokenize,
)

from . import oracles


def docs(mapping: dict) -> list[DocumentRecord]:
    return [DocumentRecord(i, t, CompositionPolicy.INFERENCE_FULL) for i, t in mapping.items()]


THREE = {1: "a b", 2: "a", 3: "c"}


@pytest.mark.parametrize(
    "text, tokens",
    [
        ("ValueError: invalid literal", ["valueerror", "invalid", "literal"]),
        ("x=1", ["x", "1"]),
        ("", []),
        ("snake_case-and.dots", ["snake_case", "and", "dots"]),
    ],
)
def test_tokenize(text, tokens):
    assert tokenize(text) == tokens


def test_build_counts():
    index = build_bm25_index(docs(THREE))
    assert index.doc_count == 3 and index.total_len == 4 and index.df("a") == 2
    assert set(index.postings) == {"a", "b", "c"}


def test_empty_index():
    index = build_bm25_index([])
    assert index.doc_count == 0
    assert bm25_search(index, ["a"], 5) == []


def test_repeated_token_tf():
    assert build_bm25_index(docs({1: "a a a"})).tf("a", 1) == 3


def test_duplicate_doc_id_rejected():
    with pytest.raises(IndexBuildError):
        build_bm25_index(docs({1: "a"}) + docs({1: "b"}))


@pytest.mark.parametrize("k1, b", [(-0.1, 0.5), (1.2, 1.5), (1.2, -0.1)])
def test_bad_parameters(k1, b):
    with pytest.raises(ValueError):
        build_bm25_index(docs(THREE), k1, b)


@pytest.mark.parametrize(
    "mapping, term, expected",
    [
        (THREE, "a", math.log(1.6)),
        (THREE, "zzz", math.log(8)),
        ({}, "a", math.log(2)),
    ],
)
def test_idf(mapping, term, expected):
    assert idf(build_bm25_index(docs(mapping)), term) == pytest.approx(expected, abs=1e-12)


def test_hand_derived_scores():
    index = build_bm25_index(docs(THREE), 1.2, 0.75)
    assert bm25_score(index, ["a"], 2) == pytest.approx(0.5236, abs=1e-4)
    assert bm25_score(index, ["a"], 1) == pytest.approx(0.3902, abs=1e-4)
    assert bm25_score(index, ["a"], 3) == 0.0
    assert [d for d, _ in bm25_search(index, ["a"], 2)] == [2, 1]


def test_unknown_term_scores_zero():
    index = build_bm25_index(docs(THREE))
    assert all(bm25_score(index, ["zzz"], d) == 0 for d in THREE)


def test_query_tokens_count_per_occurrence():
    index = build_bm25_index(docs(THREE))
    for d in THREE:
        assert bm25_score(index, ["a", "a"], d) == pytest.approx(2 * bm25_score(index, ["a"], d), rel=1e-15)


def test_unknown_doc():
    with pytest.raises(KeyError):
        bm25_score(build_bm25_index(docs(THREE)), ["a"], 9)


def test_search_k_larger_than_corpus():
    assert len(bm25_search(build_bm25_index(docs(THREE)), ["a"], 10)) == 3


def test_search_no_matching_terms_ties_by_id():
    index = build_bm25_index(docs({5: "x", 2: "y", 9: "z"}))
    assert bm25_search(index, ["nothing"], 3) == [(2, 0.0), (5, 0.0), (9, 0.0)]


def test_search_k_must_be_positive():
    with pytest.raises(ValueError):
        bm25_search(build_bm25_index(docs(THREE)), ["a"], 0)


def test_retriever_contract():
    r = Bm25Retriever(build_bm25_index(docs(THREE)))
    assert r.doc_ids == {1, 2, 3}
    assert r.search(["a"], 1)[0][0] == 2


vocab = st.sampled_from([f"w{i}" for i in range(20)])
corpora = st.dictionaries(st.integers(1, 500), st.lists(vocab, min_size=0, max_size=10), min_size=1, max_size=50)


@settings(max_examples=60, deadline=None)
@given(corpora, st.lists(vocab, min_size=1, max_size=6), st.sampled_from([0.5, 1.2, 2.0]), st.sampled_from([0.0, 0.75, 1.0]))
def test_oracle_equivalence(corpus, query, k1, b):
    if sum(map(len, corpus.values())) == 0:
        return
    index = build_bm25_index(docs({i: " ".join(t) for i, t in corpus.items()}), k1, b)
    ids, vec = bm25_scores(index, query)
    for d, s in zip(ids.tolist(), vec.tolist()):
        expected = oracles.bm25_score(corpus, query, d, k1, b)
        assert abs(bm25_score(index, query, d) - expected) < 1e-9
        assert abs(s - expected) < 1e-9


@pytest.mark.parametrize("k1, b", [(0.5, 0.0), (1.2, 0.75), (2.0, 1.0)])
def test_score_non_decreasing_in_tf(k1, b):
    # doc 1 keeps length 10 while matches replace filler
    scores = []
    for tf in range(11):
        corpus = {1: "a " * tf + "z " * (10 - tf), 2: "a c", 3: "c d"}
        scores.append(bm25_score(build_bm25_index(docs(corpus), k1, b), ["a"], 1))
    assert all(y >= x for x, y in zip(scores, scores[1:]))


def test_adding_document_keeps_existing_tf():
    index = build_bm25_index(docs(THREE))
    before = {(t, d): tf for t, p in index.postings.items() for d, tf in p.items()}
    index.add(4, ["a", "c", "c"])
    after = {(t, d): tf for t, p in index.postings.items() for d, tf in p.items() if d != 4}
    assert before == after
    corpus = {i: tokenize(t) for i, t in THREE.items()} | {4: ["a", "c", "c"]}
    for d in corpus:
        assert bm25_score(index, ["a", "c"], d) == pytest.approx(oracles.bm25_score(corpus, ["a", "c"], d, 1.2, 0.75), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(corpora, st.lists(vocab, min_size=1, max_size=4), st.integers(1, 60))
def test_search_sorted_and_deterministic(corpus, query, k):
    index = build_bm25_index(docs({i: " ".join(t) for i, t in corpus.items()}))
    res = bm25_search(index, query, k)
    assert len(res) == min(k, len(corpus))
    keys = [(-s, d) for d, s in res]
    assert keys == sorted(keys)
    assert res == bm25_search(index, query, k)


def test_save_load_round_trip(tmp_path):
    index = build_bm25_index(docs({1: "a b", 2: "a", 3: "ünïcode c"}), 0.9, 0.4)
    save_bm25_index(index, tmp_path / "i.json")
    loaded = load_bm25_index(tmp_path / "i.json")
    assert loaded.postings == index.postings and loaded.doc_len == index.doc_len
    assert (loaded.k1, loaded.b) == (0.9, 0.4)
    assert bm25_search(loaded, ["a"], 3) == bm25_search(index, ["a"], 3)
    save_bm25_index(loaded, tmp_path / "j.json")
    assert (tmp_path / "i.json").read_bytes() == (tmp_path / "j.json").read_bytes()


def test_load_rejects_wrong_format(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other", "version": 1}')
    with pytest.raises(ValueError):
        load_bm25_index(tmp_path / "x.json")
