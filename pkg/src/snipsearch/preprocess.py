"""Turn raw question rows into code/error/keyword fields and build queries."""

from __future__ import annotations

import enum
import math
import re
from collections import Counter
from dataclasses import dataclass
from html.parser import HTMLParser
from typing import Mapping, Sequence

from .dump_ingest import PostType, RawPostRow
from .lexical_index import tokenize

TRACEBACK_HEADER = "Traceback (most recent call last)"
ERROR_HEAD = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*(?:Error|Exception|Warning)\b", re.MULTILINE)

# tags rendered as a line break so words on either side stay separate tokens
_BREAK_TAGS = frozenset(
    "p br pre div li ul ol blockquote h1 h2 h3 h4 h5 h6 tr hr table".split()
)


class BlockKind(enum.Enum):
    CODE = "code"
    ERROR = "error"


class CutMode(enum.Enum):
    MIDDLE = "middle"
    HEAD = "head"


class NoSnippetError(ValueError):
    """The question has neither code nor a traceback to build a query from."""


@dataclass(frozen=True)
class CodeBlock:
    text: str
    kind: BlockKind


@dataclass(frozen=True)
class ProcessedQuestion:
    id: int
    title: str
    body_text: str
    code: str = ""
    error: str = ""
    keyword: str | None = None
    best_answer: str | None = None
    duplicate_of: int | None = None
    favorite_count: int | None = None

    @property
    def has_snippet(self) -> bool:
        return bool(self.code or self.error)


@dataclass(frozen=True)
class Query:
    tokens: tuple[str, ...]
    source_question: int


class _MarkupWalker(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.text: list[str] = []
        self.blocks: list[str] = []
        self._code_depth = 0
        self._current: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag == "code":
            self._code_depth += 1
        elif tag in _BREAK_TAGS:
            self._emit("\n")

    def handle_startendtag(self, tag, attrs):
        if tag in _BREAK_TAGS:
            self._emit("\n")

    def handle_endtag(self, tag):
        if tag == "code":
            if self._code_depth == 1:
                self._flush_block()
            self._code_depth = max(0, self._code_depth - 1)
        elif tag in _BREAK_TAGS:
            self._emit("\n")

    def handle_data(self, data):
        self._emit(data)

    def _emit(self, data: str) -> None:
        self.text.append(data)
        if self._code_depth:
            self._current.append(data)

    def _flush_block(self) -> None:
        self.blocks.append("".join(self._current))
        self._current = []

    def close(self) -> None:
        super().close()
        if self._code_depth:
            self._flush_block()
            self._code_depth = 0


def _walk(body_html: str) -> _MarkupWalker:
    walker = _MarkupWalker()
    walker.feed(body_html)
    walker.close()
    return walker


def extract_code_blocks(body_html: str) -> list[str]:
    """Inner text of each ``<code>`` region in document order, entities decoded.

    An unclosed ``<code>`` runs to the end of the input.
    """
    return _walk(body_html).blocks


def strip_markup(body_html: str) -> str:
    """Plain text of a post body; code contents stay inline where they occurred."""
    return "".join(_walk(body_html).text).strip()


def classify_block(text: str) -> BlockKind:
    if TRACEBACK_HEADER in text or ERROR_HEAD.search(text):
        return BlockKind.ERROR
    return BlockKind.CODE


def extract_error_keyword(error_text: str) -> str | None:
    """Name of the last error-head line; the final frame names the raised error."""
    heads = ERROR_HEAD.findall(error_text)
    return heads[-1] if heads else None


def classify_blocks(blocks: Sequence[str]) -> list[CodeBlock]:
    return [CodeBlock(b, classify_block(b)) for b in blocks]


def assemble_question(
    row: RawPostRow,
    answers: Mapping[int, RawPostRow],
    links: Mapping[int, Sequence[int]] | None = None,
    report: Counter | None = None,
) -> ProcessedQuestion:
    """Build the processed record for one question row.

    ``links`` maps a question id to the ids it duplicates; the first one is
    stored in ``duplicate_of``. A dangling accepted-answer id leaves
    ``best_answer`` empty and is counted under ``missing_accepted_answer``.
    """
    if row.post_type is not PostType.QUESTION:
        raise ValueError(f"post {row.id} is not a question")
    walker = _walk(row.body_html)
    blocks = classify_blocks(walker.blocks)
    code = "\n".join(b.text for b in blocks if b.kind is BlockKind.CODE)
    error = "\n".join(b.text for b in blocks if b.kind is BlockKind.ERROR)

    best_answer = None
    if row.accepted_answer_id is not None:
        answer = answers.get(row.accepted_answer_id)
        if answer is None:
            if report is not None:
                report["missing_accepted_answer"] += 1
        else:
            best_answer = strip_markup(answer.body_html)

    targets = (links or {}).get(row.id) or ()
    return ProcessedQuestion(
        id=row.id,
        title=row.title or "",
        body_text="".join(walker.text).strip(),
        code=code,
        error=error,
        keyword=extract_error_keyword(error) if error else None,
        best_answer=best_answer,
        duplicate_of=targets[0] if targets else None,
        favorite_count=row.favorite_count,
    )


def truncate_middle(tokens: Sequence[str], max_len: int) -> list[str]:
    """Keep the first ``ceil(max_len/2)`` and last ``floor(max_len/2)`` tokens."""
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    tokens = list(tokens)
    if len(tokens) <= max_len:
        return tokens
    head = math.ceil(max_len / 2)
    tail = max_len // 2
    return tokens[:head] + tokens[len(tokens) - tail :]


def truncate(tokens: Sequence[str], max_len: int, cut_mode: CutMode) -> list[str]:
    if cut_mode is CutMode.MIDDLE:
        return truncate_middle(tokens, max_len)
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    return list(tokens[:max_len])


def build_query(
    pq: ProcessedQuestion, max_len: int = 512, cut_mode: CutMode = CutMode.MIDDLE
) -> Query:
    if not pq.has_snippet:
        raise NoSnippetError(f"question {pq.id} has no code or error text")
    tokens = tokenize(pq.code) + tokenize(pq.error)
    return Query(tuple(truncate(tokens, max_len, cut_mode)), pq.id)
