"""End-to-end run on the synthetic corpus: BM25, dense before/after training,
and one round of hard-negative self-training."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Sequence

from .corpus_store import CompositionPolicy, EvalPair, build_eval_set, compose_documents
from .dense_retrieval import DenseRetriever, EncoderParams
from .evaluation import EvalReport, compare_runs, evaluate, format_delta_table
from .lexical_index import Bm25Retriever, build_bm25_index
from .synthetic import SyntheticCorpus, make_separable_corpus
from .trainer import TrainerConfig, examples_from_pairs, mine_hard_negatives, train

# Small-corpus optimiser settings. The library defaults (1e-5, 3500 warm-up
# steps) suit long runs and barely move a fresh linear encoder in 500 steps.
DEMO_CONFIG = TrainerConfig(
    learning_rate=1e-3,
    warmup_steps=50,
    clip_norm=2.0,
    batch_size=12,
    epochs=10_000,
    max_steps=500,
)
RETRAIN_STEPS = 300
MINE_K = 10
EMBED_DIM = 64


@dataclass
class ExperimentResult:
    reports: list[EvalReport]
    params: dict[str, EncoderParams]
    mined: list

    def report(self, label: str) -> EvalReport:
        return next(r for r in self.reports if r.label == label)


def run_experiment(
    sc: SyntheticCorpus,
    train_pairs: Sequence[EvalPair],
    eval_pairs: Sequence[EvalPair],
    config: TrainerConfig = DEMO_CONFIG,
    seed: int = 0,
    retrain_steps: int = RETRAIN_STEPS,
    mine_k: int = MINE_K,
    workers: int = 1,
) -> ExperimentResult:
    docs = compose_documents(sc.corpus, CompositionPolicy.INFERENCE_FULL)
    mining_docs = compose_documents(sc.corpus, config.composition_policy)
    reports = [evaluate(Bm25Retriever(build_bm25_index(docs)), eval_pairs, label="bm25", workers=workers)]

    init = EncoderParams.initialize(EMBED_DIM, config.num_buckets, seed)
    trained = train(init, examples_from_pairs(train_pairs), sc.corpus, config).params

    mining_index = DenseRetriever.build(trained, mining_docs, config.max_doc_len).index
    mined = mine_hard_negatives(trained, mining_index, train_pairs, mine_k)
    retrain_cfg = dataclasses.replace(config, max_steps=retrain_steps)
    self_trained = train(trained, mined, sc.corpus, retrain_cfg).params

    params = {"dense-init": init, "dense-trained": trained, "dense-self-trained": self_trained}
    for label, p in params.items():
        retriever = DenseRetriever.build(p, docs, config.max_doc_len)
        reports.append(evaluate(retriever, eval_pairs, label=label, workers=workers))
    return ExperimentResult(reports, params, mined)


@dataclass
class DemoReport:
    reports: list[EvalReport]
    delta_table: str

    def to_text(self) -> str:
        tables = "\n\n".join(r.to_table() for r in self.reports)
        return f"{tables}\n\n{self.delta_table}\n"

    def to_json(self) -> str:
        return json.dumps([json.loads(r.to_json()) for r in self.reports], sort_keys=True, indent=2) + "\n"


def demo_pipeline(seed: int = 0, workers: int = 1) -> DemoReport:
    """Train on every duplicate pair of the synthetic corpus and report recall on them."""
    sc = make_separable_corpus(seed)
    pairs = build_eval_set(sc.corpus, sc.links, DEMO_CONFIG.max_query_len, DEMO_CONFIG.cut_mode)
    result = run_experiment(sc, pairs, pairs, DEMO_CONFIG, seed, workers=workers)
    dense = [r for r in result.reports if r.label.startswith("dense")]
    return DemoReport(result.reports, format_delta_table(compare_runs(dense)))
