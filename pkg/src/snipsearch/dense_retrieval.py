"""Single shared encoder over hashed token counts, plus exact dot-product search.

The encoder is a linear map ``E(x) = W x`` where ``x`` is the L2-normalised
bag of hashed tokens. Queries and documents go through the same ``W``.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus_store import DocumentRecord
from .io_utils import atomic_write_bytes
from .lexical_index import rank_top_k, tokenize

DEFAULT_BUCKETS = 1 << 15
DEFAULT_DIM = 64

PARAMS_FORMAT = "snipsearch.params"
INDEX_FORMAT = "snipsearch.dense"
FORMAT_VERSION = 1


class DimensionError(ValueError):
    pass


@lru_cache(maxsize=1 << 18)
def token_hash(token: str) -> int:
    """Stable 64-bit hash (blake2b), independent of PYTHONHASHSEED."""
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def _check_buckets(num_buckets: int) -> None:
    if num_buckets < 1 or num_buckets & (num_buckets - 1):
        raise ValueError(f"num_buckets must be a power of two, got {num_buckets}")


@dataclass(frozen=True)
class FeatureVector:
    indices: np.ndarray  # sorted, unique bucket ids
    values: np.ndarray
    num_buckets: int

    @property
    def is_zero(self) -> bool:
        return self.indices.size == 0

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.num_buckets)
        out[self.indices] = self.values
        return out


def featurize(tokens: Sequence[str], num_buckets: int = DEFAULT_BUCKETS) -> FeatureVector:
    _check_buckets(num_buckets)
    if not tokens:
        return FeatureVector(np.zeros(0, dtype=np.int64), np.zeros(0), num_buckets)
    mask = num_buckets - 1
    buckets = np.fromiter((token_hash(t) & mask for t in tokens), dtype=np.int64, count=len(tokens))
    indices, counts = np.unique(buckets, return_counts=True)
    values = counts.astype(np.float64)
    values /= np.sqrt(np.dot(values, values))
    return FeatureVector(indices, values, num_buckets)


def stack_features(features: Sequence[FeatureVector], num_buckets: int) -> sp.csr_matrix:
    """Rows of a CSR matrix, one per feature vector."""
    for fv in features:
        if fv.num_buckets != num_buckets:
            raise DimensionError(f"feature vector has {fv.num_buckets} buckets, expected {num_buckets}")
    indptr = np.zeros(len(features) + 1, dtype=np.int64)
    if features:
        np.cumsum([fv.indices.size for fv in features], out=indptr[1:])
        indices = np.concatenate([fv.indices for fv in features])
        data = np.concatenate([fv.values for fv in features])
    else:
        indices, data = np.zeros(0, dtype=np.int64), np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(features), num_buckets))


@dataclass
class EncoderParams:
    weight: np.ndarray  # (dim, num_buckets), column-major so bucket columns are contiguous
    seed: int = 0

    def __post_init__(self):
        self.weight = np.asfortranarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[0] < 2:
            raise ValueError(f"weight must be (dim >= 2, buckets), got {self.weight.shape}")
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("weight has non-finite entries")

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def num_buckets(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def initialize(cls, dim: int = DEFAULT_DIM, num_buckets: int = DEFAULT_BUCKETS, seed: int = 0) -> "EncoderParams":
        """Entries i.i.d. uniform in ``[-1/sqrt(F), 1/sqrt(F)]``."""
        if dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {dim}")
        _check_buckets(num_buckets)
        bound = 1.0 / np.sqrt(num_buckets)
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-bound, bound, size=(dim, num_buckets)), seed)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.weight.copy(order="F"), self.seed)


def encode(params: EncoderParams, fv: FeatureVector) -> np.ndarray:
    if fv.num_buckets != params.num_buckets:
        raise DimensionError(f"feature vector has {fv.num_buckets} buckets, encoder expects {params.num_buckets}")
    return params.weight[:, fv.indices] @ fv.values


def encode_batch(params: EncoderParams, features: Sequence[FeatureVector]) -> np.ndarray:
    """Embeddings as rows, shape ``(len(features), dim)``."""
    X = stack_features(features, params.num_buckets)
    # sparse @ dense goes through scipy's sequential kernel: no BLAS threading
    return np.asarray((X @ params.weight.T))


def encode_tokens(params: EncoderParams, tokens: Sequence[str]) -> np.ndarray:
    return encode(params, featurize(tokens, params.num_buckets))


def dot_score(q_emb: np.ndarray, d_emb: np.ndarray) -> float:
    q_emb, d_emb = np.asarray(q_emb), np.asarray(d_emb)
    if q_emb.shape != d_emb.shape:
        raise DimensionError(f"shape mismatch: {q_emb.shape} vs {d_emb.shape}")
    return float(np.dot(q_emb, d_emb))


@dataclass
class VectorIndex:
    doc_ids: np.ndarray
    embeddings: np.ndarray  # (doc_count, dim)

    def __len__(self) -> int:
        return len(self.doc_ids)


def build_vector_index(
    params: EncoderParams,
    docs: Iterable[DocumentRecord],
    max_len: int | None = None,
) -> VectorIndex:
    """Encode every document; ``max_len`` keeps only the first tokens of each."""
    docs = list(docs)
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate doc_id in vector index build")
    features = []
    for d in docs:
        tokens = tokenize(d.text)
        features.append(featurize(tokens[:max_len] if max_len else tokens, params.num_buckets))
    embeddings = encode_batch(params, features) if docs else np.zeros((0, params.dim))
    return VectorIndex(np.asarray(ids, dtype=np.int64), embeddings)


def dense_scores(index: VectorIndex, q_emb: np.ndarray) -> np.ndarray:
    if index.embeddings.shape[1] != np.shape(q_emb)[0]:
        raise DimensionError("query embedding dimension does not match index")
    # einsum without optimize avoids BLAS, keeping scores independent of thread count
    return np.einsum("ij,j->i", index.embeddings, q_emb)


def dense_search(index: VectorIndex, q_emb: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-k by dot product; ties go to the smaller doc id."""
    if len(index) == 0:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        return []
    return rank_top_k(index.doc_ids, dense_scores(index, q_emb), k)


class DenseRetriever:
    """Encoder params plus the index they produced; one encoder for both sides."""

    label = "dense"

    def __init__(self, params: EncoderParams, index: VectorIndex, max_query_len: int | None = None):
        self.params = params
        self.index = index
        self.max_query_len = max_query_len

    @classmethod
    def build(cls, params: EncoderParams, docs: Iterable[DocumentRecord], max_doc_len: int | None = None) -> "DenseRetriever":
        return cls(params, build_vector_index(params, docs, max_doc_len))

    @property
    def doc_ids(self) -> set[int]:
        return set(self.index.doc_ids.tolist())

    def search(self, tokens: Sequence[str], k: int) -> list[tuple[int, float]]:
        return dense_search(self.index, encode_tokens(self.params, tokens), k)


# -- persistence -----------------------------------------------------------

def _header(kind: str, **extra) -> np.ndarray:
    return np.array(json.dumps({"format": kind, "version": FORMAT_VERSION, **extra}))


def _read_header(data, kind: str, path) -> dict:
    if "header" not in data:
        raise ValueError(f"{path}: missing header")
    header = json.loads(str(data["header"]))
    if header.get("format") != kind:
        raise ValueError(f"{path}: expected {kind}, found {header.get('format')}")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {header.get('version')}")
    return header


def _npz_bytes(**arrays) -> bytes:
    """``.npz`` payload with fixed member timestamps, so equal arrays give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_params(params: EncoderParams, path: str | Path) -> None:
    header = _header(PARAMS_FORMAT, dim=params.dim, num_buckets=params.num_buckets, seed=params.seed)
    atomic_write_bytes(path, _npz_bytes(header=header, weight=params.weight))


def load_params(path: str | Path) -> EncoderParams:
    with np.load(path, allow_pickle=False) as data:
        header = _read_header(data, PARAMS_FORMAT, path)
        weight = data["weight"]
    if weight.shape != (header["dim"], header["num_buckets"]):
        raise ValueError(f"{path}: weight shape {weight.shape} disagrees with header")
    return EncoderParams(weight, header["seed"])


def save_dense_index(retriever: DenseRetriever, path: str | Path) -> None:
    """Store index and encoder together so a query can be encoded at search time."""
    p = retriever.params
    header = _header(INDEX_FORMAT, dim=p.dim, num_buckets=p.num_buckets, seed=p.seed,
                     max_query_len=retriever.max_query_len)
    atomic_write_bytes(path, _npz_bytes(
        header=header, weight=p.weight,
        doc_ids=retriever.index.doc_ids, embeddings=retriever.index.embeddings,
    ))


def load_dense_index(path: str | Path) -> DenseRetriever:
    with np.load(path, allow_pickle=False) as data:
        header = _read_header(data, INDEX_FORMAT, path)
        params = EncoderParams(data["weight"], header["seed"])
        index = VectorIndex(data["doc_ids"], data["embeddings"])
    return DenseRetriever(params, index, header.get("max_query_len"))
