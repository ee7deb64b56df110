"""Desk-scale end-to-end run: generate, memorize, adaptive RMU at one window, evaluate.

Writes every stage's artifacts under --out and prints the numbers the
acceptance suite checks (forget/retain regurgitation, probe drop, steering
statistics, wall time per stage).
"""

import argparse
import json
import logging
import time
from pathlib import Path

from rmulab import harness as hz
from rmulab.model import clone_frozen, load_checkpoint
from rmulab.corpus import Tokenizer
from rmulab.unlearn import make_control_vector, steering_stats


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--layer", type=int, default=5)
    ap.add_argument("--unlearn", type=json.loads, default={}, help='JSON overrides, e.g. \'{"alpha": 30}\'')
    ap.add_argument("--checkpoint", type=Path, help="reuse a memorized checkpoint instead of training one")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    out = args.out
    times = {}
    t0 = time.perf_counter()
    hz.run_generate(out / "corpus", args.seed, "desk")
    corpus_path, probe_path = out / "corpus" / "corpus.jsonl", out / "corpus" / "probe.jsonl"
    ckpt = args.checkpoint
    if ckpt is None:
        hz.run_memorize(out / "memorized", args.seed, corpus_path, probe_path)
        ckpt = out / "memorized" / "model.ckpt"
    times["memorize"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    before = hz.run_evaluate(out / "pre-eval", ckpt, corpus_path, probe_path)
    times["pre-eval"] = time.perf_counter() - t1
    t1 = time.perf_counter()
    unlearn = {"method": "adaptive-rmu", **args.unlearn, "layer": args.layer}
    hz.run_unlearn(out / "unlearned", args.seed, ckpt, corpus_path, unlearn)
    times["unlearn"] = time.perf_counter() - t1
    t1 = time.perf_counter()
    after = hz.run_evaluate(out / "eval", out / "unlearned" / "unlearned.ckpt", corpus_path, probe_path)
    times["eval"] = time.perf_counter() - t1

    corpus = hz.read_corpus(corpus_path)
    cfg = hz._unlearn_config(unlearn, args.seed)
    frozen = clone_frozen(load_checkpoint(ckpt))
    net = load_checkpoint(out / "unlearned" / "unlearned.ckpt")
    u = make_control_vector(net.config.d_model, cfg.seed, cfg.normalize_u)
    docs = corpus.select(split="forget")
    tok = Tokenizer.default()
    s0 = steering_stats(frozen, frozen, tok, docs, cfg.layer, u, cfg.completion_only)
    s1 = steering_stats(net, frozen, tok, docs, cfg.layer, u, cfg.completion_only)

    print(f"window {cfg.window}  alpha {cfg.alpha}  beta {cfg.beta}  lr {cfg.lr}  steps {cfg.steps}")
    print(f"before: forget {before.raw_mean('forget'):.3f}  retain {before.raw_mean('retain'):.3f}  "
          f"probe {before.probe_accuracy:.3f}  final {before.final_score:.3f}")
    print(f"after:  forget {after.raw_mean('forget'):.3f}  retain {after.raw_mean('retain'):.3f}  "
          f"probe {after.probe_accuracy:.3f}  final {after.final_score:.3f}  mia {after.mia_score:.3f}")
    print(f"steering: cos {s0['cosine']:.3f} -> {s1['cosine']:.3f}  "
          f"norm ratio {s0['norm_ratio']:.3f} -> {s1['norm_ratio']:.3f}")
    print("seconds: " + "  ".join(f"{k} {v:.0f}" for k, v in times.items())
          + f"  total {time.perf_counter() - t0:.0f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
