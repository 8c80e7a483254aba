"""Shared tokenizer and an Okapi BM25 inverted index."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .io_utils import atomic_write_text

if TYPE_CHECKING:
    from .corpus_store import DocumentRecord

INDEX_FORMAT = "snipsearch.bm25"
INDEX_VERSION = 1

_SPLIT = re.compile(r"[^a-z0-9_]+")


class IndexBuildError(ValueError):
    """Raised for malformed index builds or lookups."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on every character outside ``[a-z0-9_]``."""
    return [t for t in _SPLIT.split(text.lower()) if t]


@dataclass
class Bm25Index:
    postings: dict[str, dict[int, int]] = field(default_factory=dict)
    doc_len: dict[int, int] = field(default_factory=dict)
    k1: float = 1.2
    b: float = 0.75
    total_len: int = 0
    _arrays: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.total_len = sum(self.doc_len.values())

    @property
    def doc_count(self) -> int:
        return len(self.doc_len)

    @property
    def avgdl(self) -> float:
        return self.total_len / self.doc_count if self.doc_count else 0.0

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def tf(self, term: str, doc_id: int) -> int:
        return self.postings.get(term, {}).get(doc_id, 0)

    def add(self, doc_id: int, tokens: Sequence[str]) -> None:
        if doc_id in self.doc_len:
            raise IndexBuildError(f"duplicate doc_id {doc_id}")
        self.doc_len[doc_id] = len(tokens)
        self.total_len += len(tokens)
        for term, count in Counter(tokens).items():
            self.postings.setdefault(term, {})[doc_id] = count
        self._arrays.clear()

    def doc_ids(self) -> np.ndarray:
        if "ids" not in self._arrays:
            ids = np.fromiter(self.doc_len, dtype=np.int64, count=self.doc_count)
            self._arrays["ids"] = ids
            self._arrays["lens"] = np.fromiter(self.doc_len.values(), dtype=np.float64, count=self.doc_count)
            self._arrays["pos"] = {d: i for i, d in enumerate(ids.tolist())}
        return self._arrays["ids"]

    def posting_arrays(self, term: str) -> tuple[np.ndarray, np.ndarray]:
        """Row positions (in :meth:`doc_ids` order) and term frequencies."""
        key = ("t", term)
        if key not in self._arrays:
            self.doc_ids()
            pos = self._arrays["pos"]
            plist = self.postings.get(term, {})
            rows = np.fromiter((pos[d] for d in plist), dtype=np.int64, count=len(plist))
            tfs = np.fromiter(plist.values(), dtype=np.float64, count=len(plist))
            self._arrays[key] = (rows, tfs)
        return self._arrays[key]


def build_bm25_index(
    docs: Iterable[DocumentRecord], k1: float = 1.2, b: float = 0.75
) -> Bm25Index:
    if k1 < 0 or not 0 <= b <= 1:
        raise IndexBuildError(f"need k1 >= 0 and 0 <= b <= 1, got k1={k1}, b={b}")
    index = Bm25Index(k1=k1, b=b)
    for doc in docs:
        index.add(doc.doc_id, tokenize(doc.text))
    return index


def idf(index: Bm25Index, term: str) -> float:
    # ln((|D| + 1) / (df + 0.5)); strictly positive since df <= |D|
    return math.log((index.doc_count + 1) / (index.df(term) + 0.5))


def _term_weight(index: Bm25Index, term: str, tf: int, length: int) -> float:
    if tf == 0:
        return 0.0
    norm = 1.0 - index.b + index.b * length / index.avgdl
    return idf(index, term) * tf * (index.k1 + 1) / (tf + index.k1 * norm)


def bm25_score(index: Bm25Index, query: Sequence[str], doc_id: int) -> float:
    """Score one document. Repeated query tokens count once per occurrence."""
    if doc_id not in index.doc_len:
        raise KeyError(f"unknown doc_id {doc_id}")
    length = index.doc_len[doc_id]
    return sum(_term_weight(index, t, index.tf(t, doc_id), length) for t in query)


def bm25_scores(index: Bm25Index, query: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Scores for every indexed document, as ``(doc_ids, scores)``."""
    doc_ids = index.doc_ids()
    scores = np.zeros(len(doc_ids))
    if not len(doc_ids):
        return doc_ids, scores
    lens = index._arrays["lens"]
    for term, mult in Counter(query).items():
        rows, tfs = index.posting_arrays(term)
        if not rows.size:
            continue
        norm = 1.0 - index.b + index.b * lens[rows] / index.avgdl
        scores[rows] += mult * idf(index, term) * tfs * (index.k1 + 1) / (tfs + index.k1 * norm)
    return doc_ids, scores


def rank_top_k(doc_ids: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Descending score, ties broken by ascending doc id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = np.lexsort((doc_ids, -scores))[:k]
    return [(int(doc_ids[i]), float(scores[i])) for i in order]


def bm25_search(index: Bm25Index, query: Sequence[str], k: int) -> list[tuple[int, float]]:
    doc_ids, scores = bm25_scores(index, query)
    return rank_top_k(doc_ids, scores, k)


class Bm25Retriever:
    """Adapter exposing ``search(tokens, k)`` over a BM25 index."""

    label = "bm25"

    def __init__(self, index: Bm25Index):
        self.index = index

    @property
    def doc_ids(self) -> set[int]:
        return set(self.index.doc_len)

    def search(self, tokens: Sequence[str], k: int) -> list[tuple[int, float]]:
        return bm25_search(self.index, tokens, k)


def save_bm25_index(index: Bm25Index, path: str | Path) -> None:
    payload = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "k1": index.k1,
        "b": index.b,
        "doc_len": [[d, n] for d, n in index.doc_len.items()],
        "postings": {
            t: [[d, tf] for d, tf in plist.items()]
            for t, plist in sorted(index.postings.items())
        },
    }
    atomic_write_text(path, json.dumps(payload, separators=(",", ":")))


def load_bm25_index(path: str | Path) -> Bm25Index:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != INDEX_FORMAT:
        raise IndexBuildError(f"{path}: not a BM25 index")
    if payload.get("version") != INDEX_VERSION:
        raise IndexBuildError(f"{path}: unsupported index version {payload.get('version')}")
    return Bm25Index(
        postings={t: {d: tf for d, tf in plist} for t, plist in payload["postings"].items()},
        doc_len={d: n for d, n in payload["doc_len"]},
        k1=payload["k1"],
        b=payload["b"],
    )
