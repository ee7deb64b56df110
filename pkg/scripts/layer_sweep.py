"""Consecutive-window sweep on a memorized checkpoint, then a markdown report.

Without --checkpoint the desk corpus is generated and memorized first.
"""

import argparse
import json
import logging
from pathlib import Path

from rmulab import harness as hz


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/sweep"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--checkpoint", type=Path)
    ap.add_argument("--corpus-dir", type=Path, help="directory with corpus.jsonl and probe.jsonl")
    ap.add_argument("--unlearn", type=json.loads, default={})
    ap.add_argument("--parallelism", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    corpus_dir = args.corpus_dir
    if corpus_dir is None:
        corpus_dir = args.out / "corpus"
        hz.run_generate(corpus_dir, args.seed, "desk")
    ckpt = args.checkpoint
    if ckpt is None:
        hz.run_memorize(args.out / "memorized", args.seed, corpus_dir / "corpus.jsonl", corpus_dir / "probe.jsonl")
        ckpt = args.out / "memorized" / "model.ckpt"
    rows, code = hz.run_sweep(hz.SweepConfig(str(ckpt), str(corpus_dir / "corpus.jsonl"),
                                             str(corpus_dir / "probe.jsonl"), str(args.out / "rows"),
                                             unlearn=args.unlearn, parallelism=args.parallelism, seed=args.seed))
    print(hz.run_report(args.out / "rows" / "sweep.json", "markdown", args.out / "report.md"))
    return code


if __name__ == "__main__":
    raise SystemExit(main())
