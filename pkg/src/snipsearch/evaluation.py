"""Recall@k over duplicate-question pairs, and ablation-style report comparison."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .corpus_store import EvalPair

DEFAULT_KS = (5, 10, 20, 50)


class Retriever(Protocol):
    label: str

    @property
    def doc_ids(self) -> set[int]: ...

    def search(self, tokens: Sequence[str], k: int) -> list[tuple[int, float]]: ...


@dataclass
class RetrievalRun:
    ranked: list[list[int]]
    gold: list[int]

    def __post_init__(self):
        if len(self.ranked) != len(self.gold):
            raise ValueError("one ranked list per gold id required")
        for ids in self.ranked:
            if len(set(ids)) != len(ids):
                raise ValueError("ranked list contains duplicate ids")


@dataclass
class EvalReport:
    label: str
    recall: dict[int, float]
    query_count: int
    excluded: int = 0
    errors: list[str] = field(default_factory=list)

    @property
    def ks(self) -> tuple[int, ...]:
        return tuple(sorted(self.recall))

    def to_json(self) -> str:
        return json.dumps(
            {
                "label": self.label,
                "query_count": self.query_count,
                "excluded": self.excluded,
                "recall": {str(k): self.recall[k] for k in self.ks},
                "errors": self.errors,
            },
            sort_keys=True,
        )

    def to_table(self) -> str:
        head = f"{'retriever':<24}" + "".join(f"{'R@' + str(k):>9}" for k in self.ks) + f"{'queries':>9}"
        row = f"{self.label:<24}" + "".join(f"{self.recall[k]:>9.3f}" for k in self.ks) + f"{self.query_count:>9d}"
        return head + "\n" + row


def recall_at_k(run: RetrievalRun, k: int) -> float:
    """Fraction of queries whose gold id is in the first ``k`` results."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not run.gold:
        return 0.0
    hits = sum(1 for ids, g in zip(run.ranked, run.gold) if g in ids[:k])
    return hits / len(run.gold)


def evaluate(
    retriever: Retriever,
    eval_pairs: Sequence[EvalPair],
    ks: Sequence[int] = DEFAULT_KS,
    label: str | None = None,
    workers: int = 1,
) -> EvalReport:
    """Run every query and report recall at each ``k``.

    Pairs whose gold document is not indexed are excluded and counted.
    ``workers`` only changes throughput; results are gathered in input order.
    """
    if not eval_pairs:
        raise ValueError("no evaluation pairs")
    ks = tuple(sorted(set(ks)))
    if ks[0] < 1:
        raise ValueError("every k must be >= 1")
    indexed = retriever.doc_ids
    kept, errors = [], []
    for p in eval_pairs:
        if p.gold_doc_id in indexed:
            kept.append(p)
        else:
            errors.append(f"query {p.query.source_question}: gold {p.gold_doc_id} not indexed")
    depth = min(ks[-1], len(indexed)) if indexed else ks[-1]

    def run_one(pair: EvalPair) -> list[int]:
        return [d for d, _ in retriever.search(pair.query.tokens, depth)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ranked = list(pool.map(run_one, kept))
    else:
        ranked = [run_one(p) for p in kept]
    run = RetrievalRun(ranked, [p.gold_doc_id for p in kept])
    recall = {k: recall_at_k(run, k) for k in ks}
    return EvalReport(label or retriever.label, recall, len(kept), len(errors), errors)


@dataclass
class DeltaRow:
    label: str
    recall: dict[int, float]
    delta: dict[int, float] | None


def compare_runs(reports: Sequence[EvalReport]) -> list[DeltaRow]:
    """Recall per configuration with the change from the previous one."""
    if not reports:
        return []
    ks = reports[0].ks
    count = reports[0].query_count
    for r in reports[1:]:
        if r.ks != ks:
            raise ValueError(f"report '{r.label}' uses ks {r.ks}, expected {ks}")
        if r.query_count != count:
            raise ValueError(f"report '{r.label}' has {r.query_count} queries, expected {count}")
    rows = [DeltaRow(reports[0].label, dict(reports[0].recall), None)]
    for prev, cur in zip(reports, reports[1:]):
        rows.append(DeltaRow(cur.label, dict(cur.recall), {k: cur.recall[k] - prev.recall[k] for k in ks}))
    return rows


def format_delta_table(rows: Sequence[DeltaRow], k: int = 10) -> str:
    lines = [f"{'configuration':<32}{'Recall@' + str(k):>10}{'delta':>9}"]
    for row in rows:
        delta = "" if row.delta is None else f"{row.delta[k]:+.3f}"
        lines.append(f"{row.label:<32}{row.recall[k]:>10.3f}{delta:>9}")
    return "\n".join(lines)
