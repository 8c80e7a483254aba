"""Separable synthetic corpus for smoke runs and tests.

Every query question A_i is a duplicate of an answered question B_i. The two
share three signature tokens found nowhere else; everything else is drawn
from a shared pool of common tokens. Unlinked answered questions act as
distractor documents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import ProcessedQuestion, extract_error_keyword

QUERY_ID_BASE = 1
GOLD_ID_BASE = 100_000
DISTRACTOR_ID_BASE = 200_000

_ERRORS = ("ValueError", "KeyError", "TypeError", "AttributeError", "IndexError", "ImportError")


@dataclass
class SyntheticCorpus:
    corpus: dict[int, ProcessedQuestion]
    links: list[tuple[int, int]]
    signatures: dict[int, tuple[str, ...]]  # query id -> signature tokens

    @property
    def query_ids(self) -> list[int]:
        return [a for a, _ in self.links]


def _words(rng: np.random.Generator, pool: list[str], n: int) -> list[str]:
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def _code_line(words: list[str]) -> str:
    # "a = b(c, d)" style lines, four words at a time
    lines = []
    for i in range(0, len(words), 4):
        w = words[i : i + 4] + ["x"] * (4 - len(words[i : i + 4]))
        lines.append(f"{w[0]} = {w[1]}({w[2]}, {w[3]})")
    return "\n".join(lines)


def _traceback(rng: np.random.Generator, pool: list[str]) -> str:
    frames = [f'  File "{w}.py", line {int(rng.integers(1, 400))}, in {v}'
              for w, v in zip(_words(rng, pool, 2), _words(rng, pool, 2))]
    err = _ERRORS[int(rng.integers(0, len(_ERRORS)))]
    return "\n".join(["Traceback (most recent call last):", *frames,
                      f"{err}: {' '.join(_words(rng, pool, 3))}"])


def _question(
    qid: int, title: str, prose: str, code: str, error: str, answer: str | None, duplicate_of: int | None
) -> ProcessedQuestion:
    # body_text mirrors what the preprocessing stage yields for <p>/<pre><code> markup
    parts = [prose, code] + ([error] if error else [])
    return ProcessedQuestion(
        id=qid,
        title=title,
        body_text="\n".join(p for p in parts if p),
        code=code,
        error=error,
        keyword=extract_error_keyword(error) if error else None,
        best_answer=answer,
        duplicate_of=duplicate_of,
        favorite_count=None,
    )


def make_separable_corpus(
    seed: int = 0,
    n_pairs: int = 200,
    n_distractors: int = 1000,
    vocab_size: int = 500,
    signature_size: int = 3,
) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    pool = [f"w{i:04d}" for i in range(vocab_size)]
    corpus: dict[int, ProcessedQuestion] = {}
    links, signatures = [], {}

    def answer_text(extra: list[str]) -> str:
        words = _words(rng, pool, 25) + extra
        order = rng.permutation(len(words))
        return " ".join(words[i] for i in order) + "."

    for i in range(n_pairs):
        a_id, b_id = QUERY_ID_BASE + i, GOLD_ID_BASE + i
        sig = tuple(f"sig{i:04d}{c}" for c in "abcdefgh"[:signature_size])
        signatures[a_id] = sig
        code_words = _words(rng, pool, 16) + list(sig)
        code = _code_line([code_words[j] for j in rng.permutation(len(code_words))])
        corpus[a_id] = _question(
            a_id, " ".join(_words(rng, pool, 6)), " ".join(_words(rng, pool, 12)),
            code, _traceback(rng, pool), None, b_id,
        )
        corpus[b_id] = _question(
            b_id, " ".join(_words(rng, pool, 6)), " ".join(_words(rng, pool, 12)),
            _code_line(_words(rng, pool, 12)), "", answer_text(list(sig)), None,
        )
        links.append((a_id, b_id))

    for j in range(n_distractors):
        d_id = DISTRACTOR_ID_BASE + j
        own = [f"dis{j:05d}{c}" for c in "abc"]
        error = _traceback(rng, pool) if rng.random() < 0.5 else ""
        corpus[d_id] = _question(
            d_id, " ".join(_words(rng, pool, 6)), " ".join(_words(rng, pool, 12)),
            _code_line(_words(rng, pool, 12)), error, answer_text(own), None,
        )
    return SyntheticCorpus(corpus, links, signatures)

