"""Re-score a saved evaluation from its transcripts and compare with report.json.

Uses a separate LCS implementation, so a mismatch points at a scoring bug
rather than a decoding difference.
"""

import argparse
import json
import re
import sys
from pathlib import Path

from rmulab.metrics import exact_match, final_score, harmonic_mean


def lcs(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_f(cand: str, ref: str) -> float:
    c, r = (re.sub(r"[^a-z0-9]+", " ", x.lower()).split() for x in (cand, ref))
    if not c or not r:
        return float(c == r)
    return 2 * lcs(c, r) / (len(c) + len(r))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("eval_dir", type=Path, help="directory holding report.json and transcripts.jsonl")
    ap.add_argument("--tol", type=float, default=1e-9)
    args = ap.parse_args()
    report = json.loads((args.eval_dir / "report.json").read_text())
    cells: dict[tuple, list[float]] = {}
    for line in (args.eval_dir / "transcripts.jsonl").read_text().splitlines():
        t = json.loads(line)
        if t["split"] not in ("retain", "forget"):
            continue
        score = rouge_f(t["candidate"], t["reference"]) if t["kind"] == "sentence-completion" \
            else exact_match(t["candidate"], t["reference"])
        cells.setdefault((t["subtask"], t["kind"], t["split"]), []).append(score)
    worst = 0.0
    agg_inputs = []
    for cell in report["cells"]:
        key = (cell["subtask"], cell["kind"], cell["split"])
        mean = sum(cells[key]) / len(cells[key])
        worst = max(worst, abs(mean - cell["raw_score"]))
        agg_inputs.append(1 - mean if cell["split"] == "forget" else mean)
    agg = harmonic_mean(agg_inputs)
    final = final_score(agg, report["mia_score"], report["probe_accuracy"])
    print(f"cells re-scored: {len(cells)}, max |raw diff| {worst:.2e}")
    print(f"task aggregate {agg:.6f} vs {report['task_aggregate']:.6f}; final {final:.6f} vs {report['final_score']:.6f}")
    ok = worst <= args.tol and abs(final - report["final_score"]) <= args.tol
    print("consistent" if ok else "MISMATCH")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
