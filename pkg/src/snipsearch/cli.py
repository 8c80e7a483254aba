"""``snipsearch`` command line: one subcommand per pipeline stage.

    ingest -> build-corpus -> build-eval / build-pretrain / build-train
    -> index-bm25 / init-params / index-dense -> pretrain / train
    -> mine-negatives -> evaluate / search

Every output file is written to a temporary name and renamed into place.
Log verbosity comes from the ``SNIPSEARCH_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter, defaultdict
from pathlib import Path
from typing import Sequence

from . import __version__
from .corpus_store import (
    CompositionPolicy,
    build_eval_set,
    build_pretraining_pairs,
    compose_documents,
    links_from_corpus,
    load_corpus,
    load_eval_pairs,
    persist_corpus,
    read_jsonl,
    save_pairs,
)
from .dense_retrieval import (
    DEFAULT_BUCKETS,
    DEFAULT_DIM,
    DenseRetriever,
    EncoderParams,
    load_dense_index,
    load_params,
    save_dense_index,
    save_params,
)
from .dump_ingest import (
    PostType,
    SkipReport,
    filter_python_questions,
    link_from_json,
    link_to_json,
    parse_links_stream,
    parse_posts_stream,
    post_from_json,
    post_to_json,
)
from .evaluation import DEFAULT_KS, evaluate
from .io_utils import atomic_open, atomic_write_text
from .lexical_index import Bm25Retriever, build_bm25_index, load_bm25_index, save_bm25_index, tokenize
from .preprocess import CutMode, assemble_question, truncate
from .trainer import (
    TrainerConfig,
    build_training_examples,
    load_examples,
    mine_hard_negatives,
    mine_with_retriever,
    pretrain,
    save_examples,
    train,
)

log = logging.getLogger("snipsearch")


class InputMissing(Exception):
    pass


def _require(*paths: str | Path | None) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise InputMissing(f"input not found: {p}")


def _write_jsonl(path: Path, rows) -> int:
    n = 0
    with atomic_open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def _links_for(args, corpus) -> list:
    if getattr(args, "links", None):
        _require(args.links)
        return [link_from_json(row) for _, row in read_jsonl(args.links)]
    return links_from_corpus(corpus)


def _load_retriever(path: str | Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"PK":
        return load_dense_index(path)
    return Bm25Retriever(load_bm25_index(path))


def _load_config(path: str | None, overrides: dict) -> TrainerConfig:
    values = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainerConfig.from_mapping(values)


# -- subcommands ---------------------------------------------------------------

def cmd_ingest(args) -> int:
    _require(args.posts, args.links)
    out = Path(args.out)
    posts_report, links_report = SkipReport(), SkipReport()
    questions, answers = [], []
    with open(args.posts, "rb") as fh:
        with atomic_open(out / "answers.jsonl") as ans_fh:
            for row in parse_posts_stream(fh, posts_report):
                if row.post_type is PostType.ANSWER:
                    ans_fh.write(json.dumps(post_to_json(row), ensure_ascii=False) + "\n")
                    answers.append(row.id)
                elif row.post_type is PostType.QUESTION:
                    questions.append(row)
    kept = list(filter_python_questions(questions, args.tag))
    _write_jsonl(out / "questions.jsonl", (post_to_json(r) for r in kept))
    with open(args.links, "rb") as fh:
        n_links = _write_jsonl(out / "links.jsonl", (link_to_json(r) for r in parse_links_stream(fh, links_report)))
    report = {
        "posts_rows": posts_report.rows_seen,
        "posts_skipped": dict(posts_report.skipped),
        "questions": len(questions),
        "questions_kept": len(kept),
        "answers": len(answers),
        "links": n_links,
        "links_skipped": dict(links_report.skipped),
    }
    atomic_write_text(out / "ingest_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"ingested {posts_report.rows_seen} post rows ({posts_report.total_skipped} skipped), "
          f"{len(kept)} {args.tag} questions, {n_links} links")
    return 0


def cmd_build_corpus(args) -> int:
    src = Path(args.inp)
    _require(src / "questions.jsonl", src / "answers.jsonl", src / "links.jsonl")
    questions = [post_from_json(row) for _, row in read_jsonl(src / "questions.jsonl")]
    wanted = {q.accepted_answer_id for q in questions if q.accepted_answer_id is not None}
    answers = {}
    for _, row in read_jsonl(src / "answers.jsonl"):
        if row["id"] in wanted:
            a = post_from_json(row)
            answers[a.id] = a
    dup = defaultdict(list)
    for _, row in read_jsonl(src / "links.jsonl"):
        link = link_from_json(row)
        if link.link_type.value == "duplicate":
            dup[link.post_id].append(link.related_post_id)
    report: Counter = Counter()
    corpus = [assemble_question(q, answers, dup, report) for q in questions]
    persist_corpus(corpus, args.out)
    with_code = sum(1 for pq in corpus if pq.code)
    with_error = sum(1 for pq in corpus if pq.error)
    answered = sum(1 for pq in corpus if pq.best_answer is not None)
    print(f"{len(corpus)} questions: {with_code} with code, {with_error} with error, "
          f"{answered} with best_answer, {report['missing_accepted_answer']} dangling accepted answers")
    return 0


def cmd_build_eval(args) -> int:
    _require(args.inp)
    corpus = load_corpus(args.inp)
    pairs = build_eval_set(corpus, _links_for(args, corpus), args.max_query_len, CutMode(args.cut_mode))
    save_pairs(pairs, args.out)
    print(f"{len(pairs)} evaluation pairs")
    return 0


def cmd_build_pretrain(args) -> int:
    _require(args.inp)
    corpus = load_corpus(args.inp)
    links = _links_for(args, corpus)
    cut = CutMode(args.cut_mode)
    eval_pairs = build_eval_set(corpus, links, args.max_query_len, cut)
    pairs = build_pretraining_pairs(corpus, links, eval_pairs, args.max_query_len, cut)
    save_pairs(pairs, args.out)
    print(f"{len(pairs)} pretraining pairs")
    return 0


def cmd_build_train(args) -> int:
    _require(args.inp, args.exclude_eval)
    corpus = load_corpus(args.inp)
    excluded = set()
    if args.exclude_eval:
        excluded = {p.query.source_question for p in load_eval_pairs(args.exclude_eval)}
    examples = build_training_examples(corpus, excluded, args.max_query_len, CutMode(args.cut_mode))
    save_examples(examples, args.out)
    print(f"{len(examples)} training examples")
    return 0


def cmd_index_bm25(args) -> int:
    _require(args.corpus)
    docs = compose_documents(load_corpus(args.corpus), CompositionPolicy(args.policy))
    index = build_bm25_index(docs, args.k1, args.b)
    save_bm25_index(index, args.out)
    print(f"indexed {index.doc_count} documents, {len(index.postings)} terms")
    return 0


def cmd_init_params(args) -> int:
    save_params(EncoderParams.initialize(args.dim, args.buckets, args.seed), args.out)
    return 0


def cmd_index_dense(args) -> int:
    _require(args.corpus, args.params)
    params = load_params(args.params)
    docs = compose_documents(load_corpus(args.corpus), CompositionPolicy(args.policy))
    retriever = DenseRetriever.build(params, docs, args.max_doc_len)
    retriever.max_query_len = args.max_query_len
    save_dense_index(retriever, args.out)
    print(f"indexed {len(retriever.index)} documents, dim {params.dim}")
    return 0


def _train_common(args, pretraining: bool) -> int:
    _require(args.corpus, args.pairs, args.config, args.init_params)
    corpus = load_corpus(args.corpus)
    config = _load_config(args.config, {"seed": args.seed, "max_steps": args.max_steps})
    if args.init_params:
        params = load_params(args.init_params)
    else:
        params = EncoderParams.initialize(DEFAULT_DIM, config.num_buckets, config.seed)
    if pretraining:
        result = pretrain(params, load_eval_pairs(args.pairs), corpus, config)
    else:
        result = train(params, load_examples(args.pairs), corpus, config)
    save_params(result.params, args.out_params)
    if args.log:
        atomic_write_text(args.log, json.dumps(
            {"epoch_losses": result.epoch_losses, "step_losses": result.step_losses}) + "\n")
    last = result.step_losses[-1] if result.step_losses else float("nan")
    print(f"{result.steps} optimizer steps, final loss {last:.4f}")
    return 0


def cmd_train(args) -> int:
    return _train_common(args, pretraining=False)


def cmd_pretrain(args) -> int:
    return _train_common(args, pretraining=True)


def cmd_mine(args) -> int:
    _require(args.corpus, args.pairs, args.params)
    corpus = load_corpus(args.corpus)
    examples = load_examples(args.pairs)
    docs = compose_documents(corpus, CompositionPolicy(args.policy))
    if args.miner == "bm25":
        mined = mine_with_retriever(Bm25Retriever(build_bm25_index(docs)), examples, args.k)
    else:
        params = load_params(args.params)
        index = DenseRetriever.build(params, docs, args.max_doc_len).index
        mined = mine_hard_negatives(params, index, examples, args.k)
    save_examples(mined, args.out)
    print(f"mined hard negatives for {len(mined)} queries")
    return 0


def cmd_evaluate(args) -> int:
    _require(args.index, args.eval_pairs)
    retriever = _load_retriever(args.index)
    ks = [int(k) for k in args.ks.split(",") if k.strip()]
    report = evaluate(retriever, load_eval_pairs(args.eval_pairs), ks, label=args.label, workers=args.workers)
    if args.report:
        atomic_write_text(args.report, report.to_json() + "\n")
    print(report.to_table())
    if report.excluded:
        print(f"excluded {report.excluded} queries whose gold document is not indexed")
    return 0


def cmd_search(args) -> int:
    _require(args.index, args.query_file)
    retriever = _load_retriever(args.index)
    text = Path(args.query_file).read_text(encoding="utf-8")
    max_len = args.max_query_len or getattr(retriever, "max_query_len", None) or 512
    tokens = truncate(tokenize(text), max_len, CutMode(args.cut_mode))
    for rank, (doc_id, score) in enumerate(retriever.search(tokens, args.k), start=1):
        print(f"{rank} {doc_id} {score:.6f}")
    return 0


def cmd_demo(args) -> int:
    from .demo import demo_pipeline

    result = demo_pipeline(args.seed, workers=args.workers)
    if args.report:
        atomic_write_text(args.report, result.to_text())
    if args.json:
        atomic_write_text(args.json, result.to_json())
    print(result.to_text(), end="")
    return 0


# -- parser ------------------------------------------------------------------

def _add_query_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-query-len", type=int, default=512)
    p.add_argument("--cut-mode", choices=[m.value for m in CutMode], default=CutMode.MIDDLE.value)


def _add_policy(p: argparse.ArgumentParser, default: CompositionPolicy) -> None:
    p.add_argument("--policy", choices=[c.value for c in CompositionPolicy], default=default.value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snipsearch", description="Search forum answers by code snippet.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("ingest", help="parse Posts.xml / PostLinks.xml into JSON lines")
    p.add_argument("--posts", required=True)
    p.add_argument("--links", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tag", default="python")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-corpus", help="assemble processed questions from ingested rows")
    p.add_argument("--in", dest="inp", required=True, help="ingest output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("build-eval", help="evaluation pairs from duplicate links")
    p.add_argument("--in", dest="inp", required=True, help="corpus file")
    p.add_argument("--links", help="links.jsonl from ingest; defaults to duplicate_of fields")
    p.add_argument("--out", required=True)
    _add_query_opts(p)
    p.set_defaults(func=cmd_build_eval)

    p = sub.add_parser("build-pretrain", help="pretraining pairs disjoint from the evaluation set")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--links")
    p.add_argument("--out", required=True)
    _add_query_opts(p)
    p.set_defaults(func=cmd_build_pretrain)

    p = sub.add_parser("build-train", help="self-paired training examples (question -> own answer)")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--exclude-eval", help="evaluation pairs whose queries must not be trained on")
    p.add_argument("--out", required=True)
    _add_query_opts(p)
    p.set_defaults(func=cmd_build_train)

    p = sub.add_parser("index-bm25", help="build a BM25 index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.add_argument("--out", required=True)
    _add_policy(p, CompositionPolicy.INFERENCE_FULL)
    p.set_defaults(func=cmd_index_bm25)

    p = sub.add_parser("init-params", help="write freshly initialised encoder params")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--buckets", type=int, default=DEFAULT_BUCKETS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_params)

    p = sub.add_parser("index-dense", help="encode the corpus into a dense index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-doc-len", type=int, default=512)
    p.add_argument("--max-query-len", type=int, default=512)
    _add_policy(p, CompositionPolicy.INFERENCE_FULL)
    p.set_defaults(func=cmd_index_dense)

    for name, func, help_ in (
        ("train", cmd_train, "contrastive training on training examples"),
        ("pretrain", cmd_pretrain, "training on duplicate pairs with bodies in documents"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--corpus", required=True)
        p.add_argument("--pairs", required=True)
        p.add_argument("--config", help="flat JSON object of trainer settings")
        p.add_argument("--init-params")
        p.add_argument("--out-params", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--log", help="write per-step and per-epoch losses here")
        p.set_defaults(func=func)

    p = sub.add_parser("mine-negatives", help="attach top-k hard negatives to training examples")
    p.add_argument("--params", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--max-doc-len", type=int, default=512)
    p.add_argument("--miner", choices=["dense", "bm25"], default="dense")
    _add_policy(p, CompositionPolicy.TRAIN_NO_BODY)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("evaluate", help="Recall@k of an index over evaluation pairs")
    p.add_argument("--index", required=True)
    p.add_argument("--eval-pairs", required=True)
    p.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))
    p.add_argument("--report")
    p.add_argument("--label")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("search", help="rank documents for a snippet/traceback in a file")
    p.add_argument("--index", required=True)
    p.add_argument("--query-file", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--max-query-len", type=int)
    p.add_argument("--cut-mode", choices=[m.value for m in CutMode], default=CutMode.MIDDLE.value)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("demo", help="synthetic end-to-end run (BM25, train, mine, retrain)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--json")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_demo)
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("SNIPSEARCH_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputMissing as exc:
        print(f"snipsearch {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"snipsearch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
