import json
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from snipsearch.dump_ingest import PostType, RawPostRow, parse_posts_stream
from snipsearch.preprocess import (
    BlockKind,
    CutMode,
    NoSnippetError,
    ProcessedQuestion,
    assemble_question,
    build_query,
    classify_block,
    extract_code_blocks,
    extract_error_keyword,
    strip_markup,
    truncate,
    truncate_middle,
)

T = [f"t{i}" for i in range(1, 11)]


@pytest.mark.parametrize(
    "html, blocks",
    [
        ("<p>hi</p><code>x=1</code>", ["x=1"]),
        ("<code>a</code><code>b</code>", ["a", "b"]),
        ("&lt;code&gt;-free body", []),
        ("<pre><code>a &lt; b &amp;&amp; c</code></pre>", ["a < b && c"]),
        ("<p>open <code>x = 1\ny = 2", ["x = 1\ny = 2"]),
    ],
)
def test_extract_code_blocks(html, blocks):
    assert extract_code_blocks(html) == blocks


def test_strip_markup_keeps_code_inline():
    text = strip_markup("<p>Use <code>d.get(k)</code> here.</p><p>Next</p>")
    assert "Use d.get(k) here." in text
    assert "<" not in text and "Next" in text
    assert text.split() == ["Use", "d.get(k)", "here.", "Next"]


@pytest.mark.parametrize(
    "text, kind",
    [
        ("def f():\n  return 1", BlockKind.CODE),
        ("Traceback (most recent call last):\n ...\nValueError: bad literal", BlockKind.ERROR),
        ("KeyError: 'name'", BlockKind.ERROR),
        ("error_handler = make()", BlockKind.CODE),
    ],
)
def test_classify_block(text, kind):
    assert classify_block(text) is kind


def test_classify_block_fixture(fixtures_dir):
    labeled = json.loads((fixtures_dir / "labeled_blocks.json").read_text())
    assert len(labeled) == 20
    matches = sum(classify_block(b["text"]).value == b["label"] for b in labeled)
    assert matches == 20


@pytest.mark.parametrize(
    "text, keyword",
    [
        ("...\nValueError: invalid literal", "ValueError"),
        ("KeyError: x\n...\nTypeError: y", "TypeError"),
        ("no error lines here", None),
        ("requests.exceptions.ConnectionError: refused", "requests.exceptions.ConnectionError"),
    ],
)
def test_extract_error_keyword(text, keyword):
    assert extract_error_keyword(text) == keyword


def _question(body: str, acc=None) -> RawPostRow:
    return RawPostRow(1, PostType.QUESTION, accepted_answer_id=acc, title="T", body_html=body, tags=("python",))


def test_assemble_code_only():
    pq = assemble_question(_question("<pre><code>x = 1</code></pre>"), {})
    assert pq.code == "x = 1" and pq.error == "" and pq.keyword is None


def test_assemble_code_and_error():
    body = "<pre><code>int('a')</code></pre><pre><code>Traceback (most recent call last):\nValueError: x</code></pre>"
    pq = assemble_question(_question(body), {})
    assert pq.code == "int('a')"
    assert pq.error.startswith("Traceback") and pq.keyword == "ValueError"


def test_assemble_merges_with_newline():
    body = "<code>a = 1</code><code>KeyError: k</code><code>b = 2</code>"
    pq = assemble_question(_question(body), {})
    assert pq.code == "a = 1\nb = 2"
    assert pq.error == "KeyError: k"


def test_assemble_missing_answer_counted():
    report = Counter()
    pq = assemble_question(_question("<p>x</p>", acc=99), {}, report=report)
    assert pq.best_answer is None and report["missing_accepted_answer"] == 1


def test_assemble_duplicate_target():
    pq = assemble_question(_question("<p>x</p>"), {}, {1: [7, 9]})
    assert pq.duplicate_of == 7


def test_assemble_rejects_answers():
    with pytest.raises(ValueError):
        assemble_question(RawPostRow(2, PostType.ANSWER, parent_id=1), {})


def test_fixture_question_42(fixtures_dir):
    with open(fixtures_dir / "Posts.xml", "rb") as fh:
        rows = {r.id: r for r in parse_posts_stream(fh)}
    answers = {i: r for i, r in rows.items() if r.post_type is PostType.ANSWER}
    pq = assemble_question(rows[42], answers)
    assert pq.best_answer == strip_markup(rows[43].body_html)
    assert pq.best_answer.startswith("Loop over the list directly:")
    assert "for x in xs:" in pq.best_answer and "<" not in pq.best_answer
    assert pq.keyword == "IndexError"
    assert "xs = [1, 2]" in pq.code
    assert "xs = [1, 2]" in pq.body_text


def test_fixture_field_statistics(fixtures_dir):
    with open(fixtures_dir / "Posts.xml", "rb") as fh:
        rows = list(parse_posts_stream(fh))
    answers = {r.id: r for r in rows if r.post_type is PostType.ANSWER}
    qs = [assemble_question(r, answers) for r in rows if r.post_type is PostType.QUESTION]
    code = sum(bool(q.code) for q in qs)
    err = sum(bool(q.error) for q in qs)
    either = sum(bool(q.code or q.error) for q in qs)
    both = sum(bool(q.code and q.error) for q in qs)
    assert either >= max(code, err) and both <= min(code, err)
    for q in qs:
        assert (q.keyword is None) or q.error


def test_block_lands_in_one_field():
    body = "<code>x = 1</code><code>ValueError: v</code><code>x = 1</code>"
    pq = assemble_question(_question(body), {})
    assert pq.code == "x = 1\nx = 1"
    assert "x = 1" not in pq.error and "ValueError" not in pq.code


@pytest.mark.parametrize(
    "tokens, m, out",
    [
        (T, 4, ["t1", "t2", "t9", "t10"]),
        (T[:3], 4, ["t1", "t2", "t3"]),
        (T, 5, ["t1", "t2", "t3", "t9", "t10"]),
    ],
)
def test_truncate_middle_examples(tokens, m, out):
    assert truncate_middle(tokens, m) == out


def test_truncate_middle_rejects_small_limit():
    with pytest.raises(ValueError):
        truncate_middle(T, 1)


@given(st.lists(st.text(min_size=1, max_size=3), max_size=60), st.integers(2, 40))
def test_truncate_middle_properties(tokens, m):
    out = truncate_middle(tokens, m)
    assert len(out) == min(len(tokens), m)
    assert truncate_middle(out, m) == out
    if len(tokens) > m:
        h = -(-m // 2)
        assert out[:h] == tokens[:h]
        assert out[h:] == tokens[len(tokens) - m // 2 :]


def test_truncate_head():
    assert truncate(T, 3, CutMode.HEAD) == ["t1", "t2", "t3"]


def _pq(code="", error="") -> ProcessedQuestion:
    return ProcessedQuestion(id=5, title="T", body_text="", code=code, error=error)


def test_build_query_concatenates():
    q = build_query(_pq("a b", "c Error"), 512)
    # tokenization lowercases
    assert q.tokens == ("a", "b", "c", "error")
    assert q.source_question == 5


def test_build_query_middle_cut():
    code = " ".join(f"x{i}" for i in range(600))
    q = build_query(_pq(code), 512, CutMode.MIDDLE)
    expected = [f"x{i}" for i in range(256)] + [f"x{i}" for i in range(344, 600)]
    assert list(q.tokens) == expected


def test_build_query_head_cut():
    code = " ".join(f"x{i}" for i in range(600))
    assert list(build_query(_pq(code), 512, CutMode.HEAD).tokens) == [f"x{i}" for i in range(512)]


def test_build_query_without_snippet():
    with pytest.raises(NoSnippetError):
        build_query(_pq(), 512)
