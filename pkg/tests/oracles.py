"""Reference implementations written straight from the formulas, with plain
Python floats and loops. Tests compare the vectorised code against these."""

import math


def bm25_idf(docs: dict, term: str) -> float:
    df = sum(1 for toks in docs.values() if term in toks)
    return math.log((len(docs) + 1) / (df + 0.5))


def bm25_score(docs: dict, query, doc_id, k1: float, b: float) -> float:
    """``docs`` maps doc id -> token list."""
    n = len(docs)
    avgdl = sum(len(t) for t in docs.values()) / n
    d = docs[doc_id]
    total = 0.0
    for q in query:
        tf = d.count(q)
        denom = tf + k1 * (1 - b + b * len(d) / avgdl)
        total += bm25_idf(docs, q) * tf * (k1 + 1) / denom if tf else 0.0
    return total


def softmax_nll(pos: float, negs) -> float:
    return -math.log(math.exp(pos) / (sum(math.exp(s) for s in negs) + math.exp(pos)))


def batch_loss(W, batch, doc_vec, query_vec) -> float:
    """Mean in-batch contrastive loss with W a list of rows, vectors as dicts bucket->value."""

    def emb(x):
        return [sum(row[j] * v for j, v in x.items()) for row in W]

    def dot(u, v):
        return sum(a * c for a, c in zip(u, v))

    positives = [ex.positive_doc_id for ex in batch]
    cands = list(dict.fromkeys(positives + [d for ex in batch for d in ex.hard_negative_doc_ids]))
    total = 0.0
    for i, ex in enumerate(batch):
        q = emb(query_vec[i])
        pos = dot(q, emb(doc_vec[ex.positive_doc_id]))
        negs = [dot(q, emb(doc_vec[c])) for c in cands if c != ex.positive_doc_id]
        total += softmax_nll(pos, negs)
    return total / len(batch)
