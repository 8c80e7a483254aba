"""Processed corpus persistence, document composition and duplicate-pair sets."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence, Union

from .dump_ingest import LinkType, RawLinkRow
from .io_utils import atomic_open
from .preprocess import CutMode, ProcessedQuestion, Query, build_query

Corpus = dict[int, ProcessedQuestion]
Link = Union[tuple[int, int], RawLinkRow]

FIELD_SEP = "\n\n"
CORPUS_FIELDS = (
    "id", "title", "body", "code", "error", "keyword",
    "best_answer", "duplicate_of", "favorite_count",
)


class CompositionPolicy(enum.Enum):
    TRAIN_NO_BODY = "train_no_body"
    INFERENCE_FULL = "inference_full"
    TRAIN_STRIPPED_BODY = "train_stripped_body"


class CompositionError(ValueError):
    def __init__(self, doc_id: int, field: str):
        super().__init__(f"question {doc_id}: missing required field '{field}'")
        self.doc_id = doc_id
        self.field = field


class CorpusLoadError(ValueError):
    def __init__(self, path: str | Path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: int
    text: str
    policy_used: CompositionPolicy


@dataclass(frozen=True)
class EvalPair:
    query: Query
    gold_doc_id: int


@dataclass(frozen=True)
class PretrainPair:
    query: Query
    target_doc_id: int


def strip_snippets(body: str, code: str, error: str) -> str:
    """Remove code and traceback text from a body.

    The merged fields are removed verbatim first. Merged blocks need not be
    adjacent in the body, so every non-blank line of them is removed as well.
    """
    pieces = [p for p in (code, error) if p]
    for piece in pieces:
        body = body.replace(piece, "")
    lines = {ln.strip() for p in pieces for ln in p.splitlines() if ln.strip()}
    for line in sorted(lines, key=len, reverse=True):
        body = body.replace(line, "")
    return "\n".join(ln for ln in body.splitlines() if ln.strip())


def compose_document(
    pq: ProcessedQuestion,
    policy: CompositionPolicy,
    require_answer: bool = True,
) -> DocumentRecord:
    """Join title, optional body and best answer with blank-line separators.

    ``require_answer=False`` lets duplicate targets without an accepted answer
    be composed for pretraining; the answer part is then omitted.
    """
    if not pq.title:
        raise CompositionError(pq.id, "title")
    if pq.best_answer is None and require_answer:
        raise CompositionError(pq.id, "best_answer")
    parts = [pq.title]
    if policy is CompositionPolicy.INFERENCE_FULL:
        if pq.body_text:
            parts.append(pq.body_text)
    elif policy is CompositionPolicy.TRAIN_STRIPPED_BODY:
        if not pq.body_text:
            raise CompositionError(pq.id, "body")
        stripped = strip_snippets(pq.body_text, pq.code, pq.error)
        if stripped:
            parts.append(stripped)
    if pq.best_answer:
        parts.append(pq.best_answer)
    return DocumentRecord(pq.id, FIELD_SEP.join(parts), policy)


def compose_documents(
    corpus: Mapping[int, ProcessedQuestion],
    policy: CompositionPolicy = CompositionPolicy.INFERENCE_FULL,
) -> list[DocumentRecord]:
    """Retrievable documents: every answered question, in corpus order."""
    return [compose_document(pq, policy) for pq in corpus.values() if pq.best_answer is not None]


def duplicate_links(links: Iterable[Link]) -> Iterator[tuple[int, int]]:
    for link in links:
        if isinstance(link, RawLinkRow):
            if link.link_type is LinkType.DUPLICATE:
                yield link.post_id, link.related_post_id
        else:
            yield int(link[0]), int(link[1])


def links_from_corpus(corpus: Mapping[int, ProcessedQuestion]) -> list[tuple[int, int]]:
    return [(pq.id, pq.duplicate_of) for pq in corpus.values() if pq.duplicate_of is not None]


def build_eval_set(
    corpus: Mapping[int, ProcessedQuestion],
    links: Iterable[Link],
    max_len: int = 512,
    cut_mode: CutMode = CutMode.MIDDLE,
) -> list[EvalPair]:
    """One pair per duplicate link A->B where B is answered and A has a snippet.

    Links are used pairwise; chains are not flattened.
    """
    pairs = []
    for a, b in duplicate_links(links):
        qa, qb = corpus.get(a), corpus.get(b)
        if a == b or qa is None or qb is None:
            continue
        if qb.best_answer is None or not qa.has_snippet:
            continue
        pairs.append(EvalPair(build_query(qa, max_len, cut_mode), b))
    return pairs


def build_pretraining_pairs(
    corpus: Mapping[int, ProcessedQuestion],
    links: Iterable[Link],
    eval_pairs: Sequence[EvalPair] | None = None,
    max_len: int = 512,
    cut_mode: CutMode = CutMode.MIDDLE,
) -> list[PretrainPair]:
    """Duplicate pairs usable for pretraining, disjoint from the evaluation set.

    The target need not have an accepted answer; its document is composed
    with the body included.
    """
    links = list(links)
    if eval_pairs is None:
        eval_pairs = build_eval_set(corpus, links, max_len, cut_mode)
    taken = {(p.query.source_question, p.gold_doc_id) for p in eval_pairs}
    pairs = []
    for a, b in duplicate_links(links):
        qa, qb = corpus.get(a), corpus.get(b)
        if a == b or qa is None or qb is None or not qa.has_snippet:
            continue
        if (a, b) in taken:
            continue
        pairs.append(PretrainPair(build_query(qa, max_len, cut_mode), b))
    return pairs


# -- persistence -----------------------------------------------------------

def _to_json(pq: ProcessedQuestion) -> dict:
    return {
        "id": pq.id,
        "title": pq.title,
        "body": pq.body_text,
        "code": pq.code,
        "error": pq.error,
        "keyword": pq.keyword,
        "best_answer": pq.best_answer,
        "duplicate_of": pq.duplicate_of,
        "favorite_count": pq.favorite_count,
    }


def _from_json(obj: dict) -> ProcessedQuestion:
    return ProcessedQuestion(
        id=int(obj["id"]),
        title=obj["title"],
        body_text=obj["body"],
        code=obj["code"],
        error=obj["error"],
        keyword=obj["keyword"],
        best_answer=obj["best_answer"],
        duplicate_of=obj["duplicate_of"],
        favorite_count=obj["favorite_count"],
    )


def dumps_question(pq: ProcessedQuestion) -> str:
    return json.dumps(_to_json(pq), ensure_ascii=False)


def persist_corpus(corpus: Mapping[int, ProcessedQuestion] | Iterable[ProcessedQuestion], path: str | Path) -> None:
    questions = corpus.values() if isinstance(corpus, Mapping) else corpus
    with atomic_open(path, "w") as fh:
        for pq in questions:
            fh.write(dumps_question(pq) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    corpus: Corpus = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                pq = _from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusLoadError(path, lineno, str(exc)) from exc
            if pq.id in corpus:
                raise CorpusLoadError(path, lineno, f"duplicate id {pq.id}")
            corpus[pq.id] = pq
    return corpus


def save_pairs(pairs: Iterable[EvalPair | PretrainPair], path: str | Path) -> None:
    with atomic_open(path, "w") as fh:
        for p in pairs:
            target_key, target = (
                ("gold_doc_id", p.gold_doc_id) if isinstance(p, EvalPair)
                else ("target_doc_id", p.target_doc_id)
            )
            row = {"query_id": p.query.source_question, "tokens": list(p.query.tokens), target_key: target}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusLoadError(path, lineno, str(exc)) from exc


def load_eval_pairs(path: str | Path) -> list[EvalPair]:
    """Read evaluation pairs; pretraining-style rows (``target_doc_id``) are accepted too."""
    pairs = []
    for lineno, row in read_jsonl(path):
        try:
            gold = row["gold_doc_id"] if "gold_doc_id" in row else row["target_doc_id"]
            pairs.append(EvalPair(Query(tuple(row["tokens"]), int(row["query_id"])), int(gold)))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusLoadError(path, lineno, f"bad pair row: {exc}") from exc
    return pairs
