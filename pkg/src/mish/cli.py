"""Command-line pipeline: synth, train, export-codes, build-index, query, eval, bench, gso, stats."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from mish.corpus import CorpusError, ingest, relevance, write_tsv
from mish.gso import gso
from mish.hamming import SubstringLayout, read_codes, write_codes
from mish.metrics import (
    ResultMismatch,
    compare_engines,
    prec_at_k_average,
    prec_at_k_worst,
    ranked_groups,
    write_per_query_csv,
    write_summary_csv,
)
from mish.mih import build, candidate_stats, knn_search
from mish.model import ModelParams, TrainingConfig, encode_codes
from mish.synthetic import SyntheticSpec, synth
from mish.training import train

log = logging.getLogger("mish")


class UsageError(Exception):
    pass


def ids_path(code_path) -> Path:
    return Path(str(code_path) + ".ids")


def read_ids(code_path, count: int) -> list[str]:
    path = ids_path(code_path)
    if not path.exists():
        return [str(i) for i in range(count)]
    names = path.read_text().splitlines()
    if len(names) != count:
        raise UsageError(f"{path}: {len(names)} ids for {count} codes")
    return names


def index_files(prefix) -> tuple[Path, Path]:
    return Path(f"{prefix}.codes"), Path(f"{prefix}.layout")


def load_index(prefix):
    code_path, layout_path = index_files(prefix)
    for p in (code_path, layout_path):
        if not p.exists():
            raise UsageError(f"missing index file {p}")
    words, n = read_codes(code_path)
    layout = SubstringLayout.load(layout_path)
    if layout.n != n:
        raise UsageError(f"{layout_path}: layout has n={layout.n}, codes have n={n}")
    return build(words, layout), read_ids(code_path, len(words))


def resolve_seed(args) -> int:
    env = os.environ.get("MISH_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MISH_SEED must be an integer, got {env!r}") from None
    return args.seed


def load_corpus(args):
    if not Path(args.corpus).exists():
        raise UsageError(f"corpus file {args.corpus} not found")
    return ingest(args.corpus, seed=resolve_seed(args))


def default_m(bits: int, m):
    return m if m is not None else max(1, bits // 16)


def load_queries(args, index):
    if args.queries:
        words, n = read_codes(args.queries)
        if n != index.n:
            raise UsageError(f"{args.queries}: queries have n={n}, index has n={index.n}")
        return words, read_ids(args.queries, len(words))
    rng = np.random.default_rng(resolve_seed(args))
    count = min(args.n_queries, len(index))
    rows = np.sort(rng.choice(len(index), size=count, replace=False))
    return index.codes[rows], [str(r) for r in rows]


def check_k(k: int, index) -> None:
    if not 1 <= k <= len(index):
        raise UsageError(f"k must be in 1..{len(index)}, got {k}")


# -- commands ------------------------------------------------------------------


def cmd_synth(args):
    spec = SyntheticSpec(
        clusters=args.clusters,
        docs_per_cluster=args.docs_per_cluster,
        vocab_size=args.vocab,
        concentration=args.concentration,
        topic_weight=args.topic_weight,
        seed=resolve_seed(args),
    )
    bundle = synth(spec)
    write_tsv(bundle, args.out)
    print(f"wrote {len(bundle.docs)} documents, |V|={bundle.vocab_size} to {args.out}")


def training_config(args) -> TrainingConfig:
    return TrainingConfig(
        alpha1=args.alpha1,
        alpha2=args.alpha2,
        beta=args.beta,
        k=args.k,
        p=args.p,
        lr=args.lr,
        seed=resolve_seed(args),
        batch_size=args.batch_size,
        n_bits=args.bits,
        m=default_m(args.bits, args.m),
        hidden=args.hidden,
        epochs=args.epochs,
        patience=args.patience,
    )


def cmd_train(args):
    bundle = load_corpus(args)
    config = training_config(args)
    result = train(bundle, config)
    result.params.save(args.model)
    if args.history:
        with open(args.history, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(result.history[0]))
            writer.writeheader()
            writer.writerows(result.history)
    print(f"best epoch {result.best_epoch}; model written to {args.model}")


def cmd_export_codes(args):
    bundle = load_corpus(args)
    params = ModelParams.load(args.model)
    if params.vocab_size != bundle.vocab_size:
        raise UsageError(f"model vocabulary {params.vocab_size} does not match corpus {bundle.vocab_size}")
    ids = list(range(len(bundle.docs))) if args.split == "all" else bundle.splits[args.split]
    words = encode_codes([bundle.docs[i] for i in ids], params)
    write_codes(args.out, words, params.n_bits)
    names = [bundle.names[i] for i in ids] if bundle.names else [str(i) for i in ids]
    ids_path(args.out).write_text("".join(f"{name}\n" for name in names))
    print(f"wrote {len(ids)} {params.n_bits}-bit codes to {args.out}")


def cmd_build_index(args):
    words, n = read_codes(args.codes)
    if args.layout:
        layout = SubstringLayout.load(args.layout)
        if layout.n != n:
            raise UsageError(f"{args.layout}: layout has n={layout.n}, codes have n={n}")
    else:
        layout = SubstringLayout.contiguous(n, default_m(n, args.m))
    t0 = time.perf_counter()
    index = build(words, layout)
    elapsed = time.perf_counter() - t0
    code_path, layout_path = index_files(args.out)
    index.save(code_path, layout_path)
    ids_path(code_path).write_text("".join(f"{x}\n" for x in read_ids(args.codes, len(words))))
    print(f"indexed {len(index)} codes, n={n}, m={layout.m}, build {elapsed:.3f}s")


def cmd_query(args):
    index, names = load_index(args.index)
    check_k(args.k, index)
    if args.row is not None:
        if not 0 <= args.row < len(index):
            raise UsageError(f"row must be in 0..{len(index) - 1}")
        queries, qnames = index.codes[[args.row]], [names[args.row]]
    elif args.queries:
        queries, qnames = load_queries(args, index)
    else:
        raise UsageError("give --row or --queries")
    out = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    out.writerow(["query", "rank", "id", "distance"])
    for qname, q in zip(qnames, queries):
        res = knn_search(index, q, args.k)
        for rank, (row, dist) in enumerate(res.neighbors.entries, start=1):
            out.writerow([qname, rank, names[row], dist])


def cmd_eval(args):
    bundle = load_corpus(args)
    params = ModelParams.load(args.model)
    database = bundle.split_docs("train")
    queries = bundle.split_docs(args.split)
    layout = SubstringLayout.load(args.layout) if args.layout else SubstringLayout.contiguous(
        params.n_bits, default_m(params.n_bits, args.m)
    )
    index = build(encode_codes(database, params), layout)
    check_k(args.k, index)
    qcodes = encode_codes(queries, params)
    rows = []
    for doc, q in zip(queries, qcodes):
        groups = ranked_groups(index, q, args.k, lambda ids: relevance(doc, [database[i] for i in ids]))
        rows.append((doc.id, prec_at_k_average(groups, args.k), prec_at_k_worst(groups, args.k)))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "prec_avg", "prec_worst"])
        writer.writerows(rows)
    avg = float(np.mean([r[1] for r in rows]))
    worst = float(np.mean([r[2] for r in rows]))
    if args.summary:
        write_summary_csv(
            args.summary,
            [dict(method=args.method, bits=params.n_bits, m=layout.m, k=args.k, prec_avg=avg, prec_worst=worst)],
        )
    print(f"prec@{args.k} average {avg:.4f} worst {worst:.4f} over {len(rows)} queries")


def cmd_bench(args):
    index, _ = load_index(args.index)
    check_k(args.k, index)
    queries, qnames = load_queries(args, index)
    try:
        cmp = compare_engines(index, queries, args.k, repetitions=args.repetitions, pin=not args.no_pin)
    except ResultMismatch as exc:
        raise UsageError(f"engines disagree, timing not reported: {exc}") from None
    if args.out:
        write_per_query_csv(args.out, cmp.mih, range(len(queries)))
    if args.summary:
        common = dict(bits=index.n, m=index.m, k=args.k)
        write_summary_csv(
            args.summary,
            [
                dict(method="linear", median_time=cmp.linear.median_per_query, speedup=1.0, **common),
                dict(method="mih", median_time=cmp.mih.median_per_query, speedup=cmp.speedup, **common),
            ],
        )
    print(
        f"linear {cmp.linear.median_per_query * 1e3:.3f} ms/query, "
        f"mih {cmp.mih.median_per_query * 1e3:.3f} ms/query, speedup {cmp.speedup:.2f}x"
    )


def cmd_gso(args):
    words, n = read_codes(args.codes)
    layout = gso(words, default_m(n, args.m), n=n)
    layout.save(args.out)
    print(f"wrote GSO layout (n={n}, m={layout.m}) to {args.out}")


def cmd_stats(args):
    index, _ = load_index(args.index)
    check_k(args.k, index)
    queries, _ = load_queries(args, index)
    stats = candidate_stats(index, queries, args.k)
    counts, edges = stats.histogram(args.bins)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "queries"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])
    print(
        f"candidates min {stats.min} median {stats.median:g} max {stats.max} mean {stats.mean:.1f} "
        f"over {len(stats.counts)} queries"
    )


# -- parser ---------------------------------------------------------------------


def add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="RNG seed (MISH_SEED overrides)")


def add_query_source(p):
    p.add_argument("--queries", help="code file of queries (default: sample rows of the index)")
    p.add_argument("--n-queries", type=int, default=100)
    add_seed(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mish", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded topic-clustered TSV corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--docs-per-cluster", type=int, default=500)
    p.add_argument("--vocab", type=int, default=500)
    p.add_argument("--concentration", type=float, default=0.05)
    p.add_argument("--topic-weight", type=float, default=0.2)
    add_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on the corpus train split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="checkpoint output path")
    p.add_argument("--bits", type=int, default=32)
    p.add_argument("--m", type=int, help="substring count (default bits/16)")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--alpha1", type=float, default=3.0)
    p.add_argument("--alpha2", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--hidden", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--history", help="per-epoch loss CSV")
    add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export-codes", help="encode a split to a binary code file plus an .ids sidecar")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["train", "validation", "test", "all"], default="train")
    p.add_argument("--out", required=True)
    add_seed(p)
    p.set_defaults(func=cmd_export_codes)

    p = sub.add_parser("build-index", help="index a code file; writes PREFIX.codes and PREFIX.layout")
    p.add_argument("--codes", required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--layout", help="layout file, e.g. from the gso command")
    p.add_argument("--out", required=True, help="index prefix")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="exact k nearest neighbours, TSV on stdout")
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--row", type=int, help="use the indexed code at this row as the query")
    add_query_source(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="tie-aware prec@k of a split against the train split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["validation", "test"], default="test")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--m", type=int)
    p.add_argument("--layout")
    p.add_argument("--out", required=True, help="per-query precision CSV")
    p.add_argument("--summary", help="summary CSV")
    p.add_argument("--method", default="mish")
    add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="verify then time linear scan against multi-index search")
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--no-pin", action="store_true", help="do not pin to one CPU")
    p.add_argument("--out", help="per-query CSV")
    p.add_argument("--summary", help="summary CSV")
    add_query_source(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gso", help="greedy low-correlation substring layout")
    p.add_argument("--codes", required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gso)

    p = sub.add_parser("stats", help="candidate-set size histogram CSV")
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", required=True)
    add_query_source(p)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, CorpusError, ValueError, KeyError, OSError) as exc:
        print(f"mish {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
