"""Streaming readers for StackExchange ``Posts.xml`` and ``PostLinks.xml`` dumps.

Both readers feed the source to expat in fixed-size chunks and yield rows as
soon as their ``row`` element is parsed, so memory does not grow with file
size. Attribute values are entity-decoded once, by expat.
"""

from __future__ import annotations

import dataclasses
import enum
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Iterator, TextIO
from xml.parsers import expat
from xml.sax.saxutils import quoteattr

CHUNK_SIZE = 1 << 16
DUPLICATE_LINK_TYPE = 3

_TAG_ANGLE = re.compile(r"<([^<>]+)>")


class PostType(enum.Enum):
    QUESTION = "question"
    ANSWER = "answer"
    OTHER = "other"


class LinkType(enum.Enum):
    DUPLICATE = "duplicate"
    OTHER = "other"


class DumpParseError(ValueError):
    """Malformed XML; ``offset`` is the byte offset reported by expat."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class RawPostRow:
    id: int
    post_type: PostType
    accepted_answer_id: int | None = None
    parent_id: int | None = None
    title: str | None = None
    body_html: str = ""
    tags: tuple[str, ...] = ()
    favorite_count: int | None = None
    score: int | None = None


@dataclass(frozen=True)
class RawLinkRow:
    post_id: int
    related_post_id: int
    link_type: LinkType


@dataclass
class SkipReport:
    """Rows dropped while parsing, counted by reason."""

    rows_seen: int = 0
    skipped: Counter = field(default_factory=Counter)

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped.values())

    def skip(self, reason: str) -> None:
        self.skipped[reason] += 1


def parse_tags(raw: str | None) -> tuple[str, ...]:
    """Split ``<python><pandas>`` (or ``|python|pandas|``) into lowercase tags."""
    if not raw:
        return ()
    found = _TAG_ANGLE.findall(raw)
    if not found:
        found = raw.split("|")
    return tuple(t.strip().lower() for t in found if t.strip())


def _opt_int(value: str | None) -> int | None:
    if value is None or value == "":
        return None
    return int(value)


def _stream_rows(source: BinaryIO) -> Iterator[dict[str, str]]:
    parser = expat.ParserCreate(encoding="utf-8")
    pending: list[dict[str, str]] = []

    def start(name: str, attrs: dict[str, str]) -> None:
        if name == "row":
            pending.append(attrs)

    parser.StartElementHandler = start
    while True:
        chunk = source.read(CHUNK_SIZE)
        try:
            parser.Parse(chunk, not chunk)
        except expat.ExpatError as exc:
            raise DumpParseError(expat.errors.messages[exc.code], parser.ErrorByteIndex) from exc
        yield from pending
        pending.clear()
        if not chunk:
            return


def _post_from_attrs(attrs: dict[str, str], report: SkipReport) -> RawPostRow | None:
    try:
        post_id = int(attrs["Id"])
        type_id = int(attrs["PostTypeId"])
    except (KeyError, ValueError):
        report.skip("missing_id_or_type")
        return None
    if post_id <= 0:
        report.skip("non_positive_id")
        return None
    post_type = {1: PostType.QUESTION, 2: PostType.ANSWER}.get(type_id, PostType.OTHER)
    try:
        row = RawPostRow(
            id=post_id,
            post_type=post_type,
            accepted_answer_id=_opt_int(attrs.get("AcceptedAnswerId")),
            parent_id=_opt_int(attrs.get("ParentId")),
            title=attrs.get("Title"),
            body_html=attrs.get("Body", ""),
            tags=parse_tags(attrs.get("Tags")),
            favorite_count=_opt_int(attrs.get("FavoriteCount")),
            score=_opt_int(attrs.get("Score")),
        )
    except ValueError:
        report.skip("bad_integer")
        return None
    if post_type is PostType.ANSWER and row.parent_id is None:
        report.skip("answer_without_parent")
        return None
    if post_type is PostType.QUESTION and row.title is None:
        report.skip("question_without_title")
        return None
    return row


def parse_posts_stream(source: BinaryIO, report: SkipReport | None = None) -> Iterator[RawPostRow]:
    """Yield one :class:`RawPostRow` per valid ``row`` element, in file order.

    Rows that lack ``Id``/``PostTypeId`` or violate the row invariants are
    counted in ``report`` and not yielded.
    """
    report = report if report is not None else SkipReport()
    for attrs in _stream_rows(source):
        report.rows_seen += 1
        row = _post_from_attrs(attrs, report)
        if row is not None:
            yield row


def parse_links_stream(source: BinaryIO, report: SkipReport | None = None) -> Iterator[RawLinkRow]:
    report = report if report is not None else SkipReport()
    for attrs in _stream_rows(source):
        report.rows_seen += 1
        try:
            post_id = int(attrs["PostId"])
            related = int(attrs["RelatedPostId"])
            type_id = int(attrs["LinkTypeId"])
        except (KeyError, ValueError):
            report.skip("missing_link_fields")
            continue
        if post_id == related:
            report.skip("self_link")
            continue
        link_type = LinkType.DUPLICATE if type_id == DUPLICATE_LINK_TYPE else LinkType.OTHER
        yield RawLinkRow(post_id, related, link_type)


def filter_python_questions(rows: Iterable[RawPostRow], tag: str = "python") -> Iterator[RawPostRow]:
    tag = tag.lower()
    return (r for r in rows if r.post_type is PostType.QUESTION and tag in r.tags)


def post_to_json(row: RawPostRow) -> dict:
    out = dataclasses.asdict(row)
    out["post_type"] = row.post_type.value
    out["tags"] = list(row.tags)
    return out


def post_from_json(obj: dict) -> RawPostRow:
    return RawPostRow(**{**obj, "post_type": PostType(obj["post_type"]), "tags": tuple(obj["tags"])})


def link_to_json(row: RawLinkRow) -> dict:
    return {"post_id": row.post_id, "related_post_id": row.related_post_id, "link_type": row.link_type.value}


def link_from_json(obj: dict) -> RawLinkRow:
    return RawLinkRow(obj["post_id"], obj["related_post_id"], LinkType(obj["link_type"]))


# -- serialization back to dump layout ------------------------------------

_POST_TYPE_IDS = {PostType.QUESTION: "1", PostType.ANSWER: "2", PostType.OTHER: "0"}


def _write_rows(out: TextIO, root: str, rows: Iterable, to_attrs: Callable) -> None:
    out.write('<?xml version="1.0" encoding="utf-8"?>\n')
    out.write(f"<{root}>\n")
    for row in rows:
        attrs = " ".join(f"{k}={quoteattr(v)}" for k, v in to_attrs(row).items())
        out.write(f"  <row {attrs} />\n")
    out.write(f"</{root}>\n")


def _post_attrs(row: RawPostRow) -> dict[str, str]:
    attrs = {"Id": str(row.id), "PostTypeId": _POST_TYPE_IDS[row.post_type]}
    optional = {
        "ParentId": row.parent_id,
        "AcceptedAnswerId": row.accepted_answer_id,
        "Score": row.score,
        "FavoriteCount": row.favorite_count,
        "Title": row.title,
    }
    attrs.update({k: str(v) for k, v in optional.items() if v is not None})
    attrs["Body"] = row.body_html
    if row.tags:
        attrs["Tags"] = "".join(f"<{t}>" for t in row.tags)
    return attrs


def write_posts_xml(rows: Iterable[RawPostRow], out: TextIO) -> None:
    """Serialize rows in ``Posts.xml`` layout (``OTHER`` rows get PostTypeId 0)."""
    _write_rows(out, "posts", rows, _post_attrs)


def write_links_xml(rows: Iterable[RawLinkRow], out: TextIO) -> None:
    def attrs(row: RawLinkRow) -> dict[str, str]:
        type_id = DUPLICATE_LINK_TYPE if row.link_type is LinkType.DUPLICATE else 1
        return {
            "PostId": str(row.post_id),
            "RelatedPostId": str(row.related_post_id),
            "LinkTypeId": str(type_id),
        }

    _write_rows(out, "postlinks", rows, attrs)
