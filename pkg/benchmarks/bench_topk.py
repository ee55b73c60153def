#!/usr/bin/env python3
"""Benchmark the top-k scan kernels: compiled extension vs numpy fallback.

Builds a synthetic float32 corpus matrix and times repeated top-k queries
through both kernels, verifying they return identical rankings.

    python benchmarks/bench_topk.py --docs 100000 --dim 256 --k 3 --queries 20
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from patmatch.index import VectorIndex, available_kernels, top_k


def run(args: argparse.Namespace) -> None:
    rng = np.random.default_rng(args.seed)
    print(f"building synthetic index: {args.docs} docs x {args.dim} dims (float32)")
    matrix = rng.uniform(-1, 1, size=(args.docs, args.dim)).astype(np.float32)
    ids = [f"doc-{i:07d}" for i in range(args.docs)]
    index = VectorIndex(ids, matrix, "bench")
    queries = rng.uniform(-1, 1, size=(args.queries, args.dim))

    kernels = available_kernels()
    if len(kernels) == 1:
        print("note: compiled extension not built; only the numpy kernel will run")

    timings: dict[str, float] = {}
    results: dict[str, list] = {}
    for kernel in kernels:
        top_k(index, queries[0], args.k, kernel=kernel)  # warm-up
        started = time.perf_counter()
        out = [top_k(index, q, args.k, kernel=kernel) for q in queries]
        timings[kernel] = time.perf_counter() - started
        results[kernel] = [[s.doc_id for s in r] for r in out]

    if len(kernels) == 2:
        assert results["ext"] == results["numpy"], "kernels disagree on rankings"
        print("kernels agree on all rankings")

    print(f"\n{'kernel':<8} {'total s':>10} {'ms/query':>10} {'Mdocs/s':>10}")
    for kernel, total in timings.items():
        per_query = total / args.queries
        print(
            f"{kernel:<8} {total:>10.3f} {per_query * 1000:>10.2f} "
            f"{args.docs / per_query / 1e6:>10.1f}"
        )
    if len(timings) == 2:
        print(f"\nspeedup (numpy/ext): {timings['numpy'] / timings['ext']:.2f}x")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--docs", type=int, default=100_000)
    parser.add_argument("--dim", type=int, default=256)
    parser.add_argument("--k", type=int, default=3)
    parser.add_argument("--queries", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    run(parser.parse_args())


if __name__ == "__main__":
    main()
