"""Contrastive training of the shared encoder.

Scores are bilinear in the hashed features: ``s(q, d) = x_q^T W^T W x_d``.
For one batch let ``P`` be the row-softmax of the score matrix over the
candidate documents, ``Y`` the one-hot positives and ``G = (P - Y) / B``.
With query embeddings ``E_q = X_q W^T`` and candidate embeddings
``E_c = X_c W^T`` the mean loss has gradient

    dL/dW = (G E_c)^T X_q + (G^T E_q)^T X_c

which only touches the columns of ``W`` for buckets present in the batch.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus_store import (
    CompositionError,
    CompositionPolicy,
    DocumentRecord,
    EvalPair,
    PretrainPair,
    compose_document,
    read_jsonl,
)
from .dense_retrieval import (
    DenseRetriever,
    EncoderParams,
    FeatureVector,
    VectorIndex,
    featurize,
    stack_features,
)
from .io_utils import atomic_open
from .lexical_index import tokenize
from .preprocess import CutMode, ProcessedQuestion, Query, build_query, truncate

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, batch_id: int | None = None):
        prefix = f"batch {batch_id}: " if batch_id is not None else ""
        super().__init__(prefix + message)
        self.batch_id = batch_id


class DuplicatePositiveError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingExample:
    query: Query
    positive_doc_id: int
    hard_negative_doc_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.positive_doc_id in self.hard_negative_doc_ids:
            raise ValueError(f"positive {self.positive_doc_id} listed among hard negatives")


@dataclass
class TrainerConfig:
    learning_rate: float = 1e-5
    warmup_steps: int = 3500
    clip_norm: float = 2.0
    batch_size: int = 12
    accumulation_steps: int = 1
    max_query_len: int = 512
    max_doc_len: int = 512
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    composition_policy: CompositionPolicy = CompositionPolicy.TRAIN_NO_BODY
    cut_mode: CutMode = CutMode.MIDDLE
    in_batch_negatives: bool = True
    require_answer: bool = True
    crop_fraction: float = 0.0
    delete_prob: float = 0.0
    num_buckets: int = 1 << 15

    def __post_init__(self):
        if isinstance(self.composition_policy, str):
            self.composition_policy = CompositionPolicy(self.composition_policy)
        if isinstance(self.cut_mode, str):
            self.cut_mode = CutMode(self.cut_mode)
        positive = ("batch_size", "accumulation_steps", "max_query_len", "max_doc_len", "epochs", "clip_norm")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.warmup_steps < 0:
            raise ValueError("learning_rate and warmup_steps must be non-negative")
        if self.in_batch_negatives and self.batch_size < 2:
            raise ValueError("in-batch negatives need batch_size >= 2")
        if not (0 <= self.crop_fraction < 1 and 0 <= self.delete_prob < 1):
            raise ValueError("crop_fraction and delete_prob must lie in [0, 1)")

    @property
    def augment(self) -> bool:
        return self.crop_fraction > 0 or self.delete_prob > 0

    @classmethod
    def from_mapping(cls, values: Mapping) -> "TrainerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainerConfig":
        return cls.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_mapping(self) -> dict:
        out = dataclasses.asdict(self)
        out["composition_policy"] = self.composition_policy.value
        out["cut_mode"] = self.cut_mode.value
        return out


@dataclass
class AdamState:
    """Adam moments plus the set of columns that have ever seen a gradient.

    Columns outside ``active`` have zero moments, so their update is exactly
    zero and can be skipped.
    """

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    active: np.ndarray | None = None

    def __post_init__(self):
        if self.active is None:
            self.active = np.zeros(self.m.shape[1], dtype=bool)

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls(np.zeros_like(params.weight), np.zeros_like(params.weight))


@dataclass
class TrainResult:
    params: EncoderParams
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.step_losses)


# -- loss ------------------------------------------------------------------

def contrastive_loss(pos_score: float, neg_scores: Sequence[float]) -> float:
    """Negative log-likelihood of the positive among ``[pos] + negatives``."""
    scores = np.concatenate(([pos_score], np.asarray(neg_scores, dtype=np.float64)))
    top = scores.max()
    return float(top + np.log(np.exp(scores - top).sum()) - pos_score)


def assemble_batch_negatives(batch: Sequence[TrainingExample]) -> list[list[int]]:
    """Per-query negatives: other positives plus every hard negative in the batch.

    A query's own positive is never among its negatives. Order follows first
    appearance (positives, then hard negatives).
    """
    positives = [ex.positive_doc_id for ex in batch]
    if len(set(positives)) != len(positives):
        raise DuplicatePositiveError("batch contains the same positive twice")
    candidates = _candidates(batch)
    return [[c for c in candidates if c != ex.positive_doc_id] for ex in batch]


def _candidates(batch: Sequence[TrainingExample]) -> list[int]:
    seen: dict[int, None] = {}
    for ex in batch:
        seen.setdefault(ex.positive_doc_id, None)
    for ex in batch:
        for d in ex.hard_negative_doc_ids:
            seen.setdefault(d, None)
    return list(seen)


FeatureLookup = Callable[[int], FeatureVector]


def loss_and_gradients(
    params: EncoderParams,
    batch: Sequence[TrainingExample],
    doc_features: FeatureLookup | Mapping[int, FeatureVector],
    query_features: Sequence[FeatureVector] | None = None,
    in_batch_negatives: bool = True,
    batch_id: int | None = None,
) -> tuple[float, np.ndarray]:
    """Mean contrastive loss over the batch and its exact gradient w.r.t. ``W``."""
    loss, buckets, grad_cols = column_loss_and_gradients(
        params, batch, doc_features, query_features, in_batch_negatives, batch_id
    )
    grad = np.zeros_like(params.weight)
    grad[:, buckets] = grad_cols
    return loss, grad


def column_loss_and_gradients(
    params: EncoderParams,
    batch: Sequence[TrainingExample],
    doc_features: FeatureLookup | Mapping[int, FeatureVector],
    query_features: Sequence[FeatureVector] | None = None,
    in_batch_negatives: bool = True,
    batch_id: int | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Like :func:`loss_and_gradients` but returns only the touched columns:
    ``(loss, bucket_ids, grad[:, bucket_ids])``."""
    if not batch:
        raise TrainingError("empty batch", batch_id)
    lookup = doc_features.__getitem__ if isinstance(doc_features, Mapping) else doc_features
    if query_features is None:
        query_features = [featurize(ex.query.tokens, params.num_buckets) for ex in batch]
    if len({ex.positive_doc_id for ex in batch}) != len(batch):
        raise DuplicatePositiveError(f"batch {batch_id} contains the same positive twice")
    candidates = _candidates(batch)
    col = {d: j for j, d in enumerate(candidates)}
    try:
        cand_features = [lookup(d) for d in candidates]
    except (KeyError, CompositionError) as exc:
        raise TrainingError(f"missing document: {exc}", batch_id) from exc

    n_q = len(batch)
    X = stack_features(list(query_features) + cand_features, params.num_buckets)
    buckets = np.unique(X.indices)
    Xc = X[:, buckets].toarray()  # (n_q + n_c, touched buckets)
    # overflow shows up as a non-finite loss and is reported below
    with np.errstate(over="ignore", invalid="ignore"):
        E = Xc @ params.weight[:, buckets].T
        Eq, Ec = E[:n_q], E[n_q:]
        S = Eq @ Ec.T

        pos = np.array([col[ex.positive_doc_id] for ex in batch])
        if not in_batch_negatives:
            allowed = np.zeros_like(S, dtype=bool)
            for i, ex in enumerate(batch):
                allowed[i, pos[i]] = True
                allowed[i, [col[d] for d in ex.hard_negative_doc_ids]] = True
            S = np.where(allowed, S, -np.inf)

        top = S.max(axis=1, keepdims=True)
        expd = np.exp(S - top)
        Z = expd.sum(axis=1, keepdims=True)
        rows = np.arange(n_q)
        losses = (top[:, 0] + np.log(Z[:, 0])) - S[rows, pos]
        loss = float(losses.mean())

        G = expd / Z
        G[rows, pos] -= 1.0
        G /= n_q
        dE = np.vstack([G @ Ec, G.T @ Eq])
        grad_cols = dE.T @ Xc
    if not (math.isfinite(loss) and np.all(np.isfinite(grad_cols))):
        raise TrainingError("non-finite loss or gradient", batch_id)
    return loss, buckets, grad_cols


# -- optimisation ------------------------------------------------------------

def clip_gradients(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = float(np.sqrt(np.vdot(grad, grad)))
    if norm <= clip_norm:
        return grad
    return grad * (clip_norm / norm)


def lr_schedule(step: int, config: TrainerConfig) -> float:
    """Linear warmup from 0 to the base rate, constant afterwards."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if config.warmup_steps == 0 or step >= config.warmup_steps:
        return config.learning_rate
    return config.learning_rate * step / config.warmup_steps


def adam_step(state: AdamState, params: EncoderParams, grad: np.ndarray, lr: float) -> tuple[AdamState, EncoderParams]:
    """Bias-corrected Adam update, applied to ``state`` and ``params`` in place."""
    if grad.shape != params.weight.shape or state.m.shape != grad.shape:
        raise ValueError("gradient, moments and params must share a shape")
    cols = np.flatnonzero(np.any(grad != 0, axis=0))
    return adam_step_columns(state, params, cols, grad[:, cols], lr)


def adam_step_columns(
    state: AdamState, params: EncoderParams, cols: np.ndarray, grad_cols: np.ndarray, lr: float
) -> tuple[AdamState, EncoderParams]:
    """Adam step for a gradient that is zero outside ``cols``.

    Identical to the dense update: every column with non-zero moments is
    decayed and moved, untouched columns keep zero moments and do not move.
    """
    state.step += 1
    state.active[cols] = True
    idx = np.flatnonzero(state.active)
    g = np.zeros((grad_cols.shape[0], idx.size))
    g[:, np.searchsorted(idx, cols)] = grad_cols
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m[:, idx] + (1 - b1) * g
    v = b2 * state.v[:, idx] + (1 - b2) * np.square(g)
    state.m[:, idx] = m
    state.v[:, idx] = v
    if lr != 0:
        m_hat = m / (1 - b1 ** state.step)
        v_hat = v / (1 - b2 ** state.step)
        params.weight[:, idx] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, params


# -- data plumbing -----------------------------------------------------------

def corrupt_document(
    tokens: Sequence[str], rng: np.random.Generator, crop_fraction: float, delete_prob: float
) -> list[str]:
    """Cut one random contiguous span, then drop each remaining token independently."""
    if not (0 <= crop_fraction < 1 and 0 <= delete_prob < 1):
        raise ValueError("crop_fraction and delete_prob must lie in [0, 1)")
    tokens = list(tokens)
    span = math.floor(crop_fraction * len(tokens))
    if span:
        start = int(rng.integers(0, len(tokens) - span + 1))
        tokens = tokens[:start] + tokens[start + span :]
    if delete_prob > 0 and tokens:
        keep = rng.random(len(tokens)) >= delete_prob
        tokens = [t for t, k in zip(tokens, keep) if k]
    return tokens


class DocumentFeatures:
    """Composes, tokenizes, truncates and featurizes corpus documents on demand."""

    def __init__(self, corpus: Mapping[int, ProcessedQuestion], config: TrainerConfig):
        self.corpus = corpus
        self.config = config
        self._tokens: dict[int, list[str]] = {}
        self._features: dict[int, FeatureVector] = {}

    def tokens(self, doc_id: int) -> list[str]:
        if doc_id not in self._tokens:
            if doc_id not in self.corpus:
                raise KeyError(doc_id)
            doc = compose_document(self.corpus[doc_id], self.config.composition_policy,
                                   require_answer=self.config.require_answer)
            self._tokens[doc_id] = tokenize(doc.text)[: self.config.max_doc_len]
        return self._tokens[doc_id]

    def __call__(self, doc_id: int) -> FeatureVector:
        if doc_id not in self._features:
            self._features[doc_id] = featurize(self.tokens(doc_id), self.config.num_buckets)
        return self._features[doc_id]

    def corrupted(self, rng: np.random.Generator) -> FeatureLookup:
        cfg = self.config

        def lookup(doc_id: int) -> FeatureVector:
            toks = corrupt_document(self.tokens(doc_id), rng, cfg.crop_fraction, cfg.delete_prob)
            return featurize(toks, cfg.num_buckets)

        return lookup


def make_batches(examples: Sequence[TrainingExample], order: Sequence[int], batch_size: int) -> list[list[int]]:
    """Fill batches in ``order``; an example whose positive is already in the
    current batch waits for the next one."""
    queue = deque(order)
    batches: list[list[int]] = []
    while queue:
        batch, seen, waiting = [], set(), []
        while queue and len(batch) < batch_size:
            idx = queue.popleft()
            pos = examples[idx].positive_doc_id
            if pos in seen:
                waiting.append(idx)
            else:
                batch.append(idx)
                seen.add(pos)
        queue.extendleft(reversed(waiting))
        batches.append(batch)
    return batches


def _average_columns(parts: list[tuple[np.ndarray, np.ndarray]], dim: int) -> tuple[np.ndarray, np.ndarray]:
    cols = parts[0][0]
    for c, _ in parts[1:]:
        cols = np.union1d(cols, c)
    total = np.zeros((dim, cols.size))
    for c, g in parts:
        total[:, np.searchsorted(cols, c)] += g
    total /= len(parts)
    return cols, total


def train(
    params: EncoderParams,
    examples: Sequence[TrainingExample],
    corpus: Mapping[int, ProcessedQuestion] | DocumentFeatures,
    config: TrainerConfig,
) -> TrainResult:
    """Run contrastive training; the input params are left untouched.

    Each epoch reshuffles with a generator seeded by ``(seed, epoch)``.
    Micro-batch gradients are averaged over ``accumulation_steps`` before
    clipping and a single Adam step.
    """
    if not examples:
        raise ValueError("no training examples")
    if params.num_buckets != config.num_buckets:
        raise ValueError(f"params have {params.num_buckets} buckets, config says {config.num_buckets}")
    params = params.copy()
    state = AdamState.zeros_like(params)
    docs = corpus if isinstance(corpus, DocumentFeatures) else DocumentFeatures(corpus, config)
    query_features = [
        featurize(truncate(ex.query.tokens, config.max_query_len, config.cut_mode), config.num_buckets)
        for ex in examples
    ]
    result = TrainResult(params)
    aug_rng = np.random.default_rng([config.seed, 1])
    batch_id = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 0, epoch]).permutation(len(examples))
        batches = [b for b in make_batches(examples, order.tolist(), config.batch_size)
                   if len(b) > 1 or examples[b[0]].hard_negative_doc_ids]
        epoch_losses = []
        for start in range(0, len(batches), config.accumulation_steps):
            window = batches[start : start + config.accumulation_steps]
            parts = []
            window_loss = 0.0
            for b in window:
                lookup = docs.corrupted(aug_rng) if config.augment else docs
                loss, cols, grad_cols = column_loss_and_gradients(
                    params,
                    [examples[i] for i in b],
                    lookup,
                    [query_features[i] for i in b],
                    in_batch_negatives=config.in_batch_negatives,
                    batch_id=batch_id,
                )
                batch_id += 1
                window_loss += loss
                parts.append((cols, grad_cols))
            cols, grad_cols = _average_columns(parts, params.dim)
            grad_cols = clip_gradients(grad_cols, config.clip_norm)
            adam_step_columns(state, params, cols, grad_cols, lr_schedule(state.step + 1, config))
            step_loss = window_loss / len(window)
            result.step_losses.append(step_loss)
            epoch_losses.append(step_loss)
            if config.max_steps is not None and state.step >= config.max_steps:
                break
        if epoch_losses:
            result.epoch_losses.append(float(np.mean(epoch_losses)))
            log.info("epoch %d: mean loss %.4f over %d steps", epoch, result.epoch_losses[-1], len(epoch_losses))
        if config.max_steps is not None and state.step >= config.max_steps:
            break
    return result


def pretrain(
    params: EncoderParams,
    pairs: Sequence[PretrainPair],
    corpus: Mapping[int, ProcessedQuestion],
    config: TrainerConfig,
) -> TrainResult:
    """Training on duplicate pairs with bodies included in the target documents."""
    cfg = dataclasses.replace(
        config, composition_policy=CompositionPolicy.INFERENCE_FULL, require_answer=False
    )
    return train(params, examples_from_pairs(pairs), corpus, cfg)


# -- example construction and mining ----------------------------------------

def build_training_examples(
    corpus: Mapping[int, ProcessedQuestion],
    exclude_query_ids: Iterable[int] = (),
    max_len: int = 512,
    cut_mode: CutMode = CutMode.MIDDLE,
) -> list[TrainingExample]:
    """Each answered question with a snippet, paired with its own answer.

    Questions used as evaluation queries are excluded to keep them out of training.
    """
    excluded = set(exclude_query_ids)
    return [
        TrainingExample(build_query(pq, max_len, cut_mode), pq.id)
        for pq in corpus.values()
        if pq.best_answer is not None and pq.has_snippet and pq.id not in excluded
    ]


def _query_and_gold(item) -> tuple[Query, int]:
    if isinstance(item, TrainingExample):
        return item.query, item.positive_doc_id
    if isinstance(item, EvalPair):
        return item.query, item.gold_doc_id
    if isinstance(item, PretrainPair):
        return item.query, item.target_doc_id
    query, gold = item
    return query, int(gold)


def examples_from_pairs(pairs: Iterable) -> list[TrainingExample]:
    return [TrainingExample(q, g) for q, g in map(_query_and_gold, pairs)]


def mine_with_retriever(retriever, queries_with_gold: Iterable, k: int) -> list[TrainingExample]:
    """Top-k of any retriever with ``search(tokens, k)``, gold removed, as hard negatives."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    out = []
    for item in queries_with_gold:
        query, gold = _query_and_gold(item)
        hits = retriever.search(query.tokens, k)
        out.append(TrainingExample(query, gold, tuple(d for d, _ in hits if d != gold)))
    return out


def mine_hard_negatives(
    params: EncoderParams, index: VectorIndex, queries_with_gold: Iterable, k: int = 10
) -> list[TrainingExample]:
    return mine_with_retriever(DenseRetriever(params, index), queries_with_gold, k)


@dataclass
class SelfTrainResult:
    params: EncoderParams
    rounds: list[TrainResult]
    mined: list[list[TrainingExample]]


def self_train(
    params: EncoderParams,
    examples: Sequence[TrainingExample],
    corpus: Mapping[int, ProcessedQuestion],
    config: TrainerConfig,
    mining_docs: Sequence[DocumentRecord],
    iterations: int = 2,
    k: int = 10,
    miner: Callable[[EncoderParams, Sequence[TrainingExample]], list[TrainingExample]] | None = None,
) -> SelfTrainResult:
    """Train, then alternate mining hard negatives with the current model and
    retraining from it. ``miner`` replaces the dense top-k miner when given."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    docs = DocumentFeatures(corpus, config)
    rounds, mined = [], []
    current = examples
    for it in range(iterations):
        if it > 0:
            if miner is not None:
                current = miner(params, examples)
            else:
                index = DenseRetriever.build(params, mining_docs, config.max_doc_len).index
                current = mine_hard_negatives(params, index, examples, k)
            mined.append(current)
        res = train(params, current, docs, config)
        rounds.append(res)
        params = res.params
    return SelfTrainResult(params, rounds, mined)


# -- persistence -------------------------------------------------------------

def save_examples(examples: Iterable[TrainingExample], path: str | Path) -> None:
    with atomic_open(path, "w") as fh:
        for ex in examples:
            row = {
                "query_id": ex.query.source_question,
                "tokens": list(ex.query.tokens),
                "positive_doc_id": ex.positive_doc_id,
                "hard_negative_doc_ids": list(ex.hard_negative_doc_ids),
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_examples(path: str | Path) -> list[TrainingExample]:
    """Read training examples; evaluation and pretraining pair files are accepted too."""
    out = []
    for lineno, row in read_jsonl(path):
        target = next((row[k] for k in ("positive_doc_id", "target_doc_id", "gold_doc_id") if k in row), None)
        if target is None or "tokens" not in row:
            raise ValueError(f"{path}:{lineno}: row lacks tokens or a target doc id")
        query = Query(tuple(row["tokens"]), int(row.get("query_id", -1)))
        negatives = tuple(int(d) for d in row.get("hard_negative_doc_ids", ()))
        out.append(TrainingExample(query, int(target), negatives))
    return out
