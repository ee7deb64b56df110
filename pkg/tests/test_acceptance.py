"""Acceptance suite: one PASS/FAIL line per criterion (run with ``pytest -s`` to see them).

Criteria 5 to 7 share one desk-scale run (generate, memorize, adaptive-RMU at
the late window, evaluate) built by the ``desk`` fixture.
"""

import time

import numpy as np
import pytest

from oracles import adaptive_forget_oracle, aggregate_oracle, auc_oracle, retain_oracle, rmu_forget_oracle, \
    rouge_l_oracle
from rmulab import harness as hz
from rmulab.corpus import CorpusSpec, Tokenizer, generate_corpus, probe_training_records, save_corpus, save_probe
from rmulab.gradcases import check_adaptive_rmu, check_ops
from rmulab.metrics import (RegurgitationCell, evaluate_model, final_score, grid_positions, mia_auc, rouge_l,
                            task_aggregate)
from rmulab.model import ModelConfig, build_model, clone_frozen, save_checkpoint
from rmulab.unlearn import (MemorizeConfig, UnlearnConfig, Unlearner, adaptive_forget_loss, make_control_vector,
                            memorize, retain_loss, rmu_forget_loss, steering_stats)

SEED = 0
TOK = Tokenizer.default()

TABLE_2 = [  # window, task aggregate, mia score, mmlu, final (as printed)
    ("0,1,2", .547, .062, .244, .284), ("1,2,3", .542, .081, .249, .291), ("2,3,4", .355, .401, .250, .336),
    ("3,4,5", .433, .490, .254, .392), ("4,5,6", .508, .355, .229, .364), ("5,6,7", .637, .357, .262, .419),
    ("6,7,8", .597, .416, .250, .421), ("7,8,9", .616, .332, .245, .398), ("8,9,10", .631, .362, .265, .419),
    ("9,10,11", .574, .471, .264, .437), ("10,11,12", .282, .279, .243, .268),
    ("11,12,13", .582, .489, .254, .442), ("12,13,14", .565, .835, .261, .554),
    ("13,14,15", .538, .747, .258, .515),
]


def verdict(label, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {label}{': ' + detail if detail else ''}")
    return ok


# -- 1. score arithmetic ------------------------------------------------------


def test_c1_table2_final_scores():
    t0 = time.perf_counter()
    misses = []
    for window, agg, mia, mmlu, printed in TABLE_2:
        mean = final_score(agg, mia, mmlu)
        if round(mean, 3) != printed:
            misses.append(f"{window}: mean {mean:.5f} -> {round(mean, 3):.3f}, printed {printed:.3f}")
        # components are printed to 3 places, so the true mean is within 0.0005 of ours
        assert abs(mean - printed) <= 5e-4 + 5e-4
    elapsed = time.perf_counter() - t0
    detail = f"{14 - len(misses)}/14 rows exact at 3 decimals, {elapsed * 1e3:.1f} ms"
    if misses:
        detail += "; mismatched rows (printed finals come from unrounded components): " + "; ".join(misses)
    assert verdict("C1 Table 2 final-score arithmetic", not misses and elapsed < 1, detail)


# -- 2. gradient correctness --------------------------------------------------


def test_c2_finite_difference_checks():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    failed = []
    for seed in range(20):
        for rep in check_ops(seed) + [check_adaptive_rmu(seed)]:
            worst[rep.op_name] = max(worst.get(rep.op_name, 0.0), rep.max_relative_error)
            if not rep.passed:
                failed.append(f"{rep.op_name}@{seed}")
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 30
    assert verdict("C2 finite-difference gradients", ok,
                   f"{len(worst)} checks x 20 seeds, worst rel err {max(worst.values()):.2e} "
                   f"(loss {worst['adaptive_rmu_loss']:.2e}), {elapsed:.1f} s"
                   + (f", failed {failed}" if failed else ""))


# -- 3. metric oracles --------------------------------------------------------


def _random_text(rng):
    vocab = ["the", "The", "city", "of", "Aldmoor", "4904", "meters", "a", "red", "map", "555-123-4567", "and",
             "map.", "City,", "x"]
    return " ".join(rng.choice(vocab, size=int(rng.integers(0, 14))).tolist())


def test_c3_metric_oracles():
    rng = np.random.default_rng(SEED)
    rouge_bad = sum(rouge_l(a, b) != rouge_l_oracle(a, b)
                    for a, b in ((_random_text(rng), _random_text(rng)) for _ in range(1000)))
    auc_bad = 0
    for _ in range(200):
        m = np.round(rng.normal(1.0, 0.5, size=int(rng.integers(1, 40))), 1).tolist()
        n = np.round(rng.normal(1.2, 0.5, size=int(rng.integers(1, 40))), 1).tolist()
        auc_bad += mia_auc(m, n) != auc_oracle(m, n)
    worst = 0.0
    for _ in range(500):
        raw = rng.uniform(0, 1, size=12)
        if rng.random() < 0.1:
            raw[int(rng.integers(12))] = rng.choice([0.0, 1.0])
        cells = [RegurgitationCell(s, k, sp, float(v)) for (s, k, sp), v in zip(grid_positions(), raw)]
        worst = max(worst, abs(task_aggregate(cells) - aggregate_oracle(dict(zip(grid_positions(), raw)))))
    ok = rouge_bad == 0 and auc_bad == 0 and worst <= 1e-12
    assert verdict("C3 metric oracles", ok, f"rouge mismatches {rouge_bad}/1000, auc mismatches {auc_bad}/200, "
                                            f"aggregate max err {worst:.1e} over 500")


# -- 4. loss-formula oracles --------------------------------------------------


def test_c4_loss_oracles():
    rng = np.random.default_rng(SEED)
    worst = {"rmu": 0.0, "retain": 0.0, "adaptive": 0.0}
    for i in range(100):
        T, d = int(rng.integers(1, 20)), int(rng.integers(1, 65))
        hu, hf = rng.normal(0, 3, size=(T, d)), rng.normal(0, 3, size=(T, d))
        u = make_control_vector(d, i)
        c, beta = float(rng.uniform(1, 30)), float(rng.uniform(0.5, 8))
        worst["rmu"] = max(worst["rmu"], abs(rmu_forget_loss(hu, u, c).item()
                                             - rmu_forget_oracle(hu.tolist(), u.u.tolist(), c)))
        worst["retain"] = max(worst["retain"], abs(retain_loss(hu, hf).item() - retain_oracle(hu.tolist(),
                                                                                               hf.tolist())))
        worst["adaptive"] = max(worst["adaptive"], abs(adaptive_forget_loss(hu, hf, u, beta).item()
                                                       - adaptive_forget_oracle(hu.tolist(), hf.tolist(),
                                                                                u.u.tolist(), beta)))
    ok = all(v <= 1e-10 for v in worst.values())
    assert verdict("C4 loss-formula oracles", ok, ", ".join(f"{k} max err {v:.1e}" for k, v in worst.items()))


# -- 5 to 7. desk-scale end-to-end run ------------------------------------------


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """generate -> memorize -> adaptive RMU at window (3,4,5) -> evaluate, timed."""
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    corpus, probe = generate_corpus(CorpusSpec.preset("desk"), SEED)
    net = build_model(ModelConfig(vocab_size=TOK.vocab_size, seed=SEED))
    mem = memorize(net, corpus, TOK, MemorizeConfig(seed=SEED), probe_training_records(probe), probe)
    t_mem = time.perf_counter() - t0
    before, _ = evaluate_model(net, corpus, probe, TOK)
    save_checkpoint(net, root / "memorized.ckpt")
    cfg = UnlearnConfig(method="adaptive-rmu", layer=5, seed=SEED)
    frozen = clone_frozen(net)
    un = Unlearner(net, frozen, cfg, TOK)
    docs = corpus.select(split="forget")
    stats0 = steering_stats(net, frozen, TOK, docs, cfg.layer, un.u, cfg.completion_only)
    un.run(corpus)
    stats1 = steering_stats(net, frozen, TOK, docs, cfg.layer, un.u, cfg.completion_only)
    after, _ = evaluate_model(net, corpus, probe, TOK)
    elapsed = time.perf_counter() - t0
    return {"root": root, "corpus": corpus, "probe": probe, "mem": mem, "before": before, "after": after,
            "stats": (stats0, stats1), "elapsed": elapsed, "t_mem": t_mem, "cfg": cfg}


def test_c5_desk_unlearning(desk):
    mem, before, after = desk["mem"], desk["before"], desk["after"]
    sc_forget = np.mean([c.raw_score for c in before.cells
                         if c.split == "forget" and c.kind == "sentence-completion"])
    forget, retain = after.raw_mean("forget"), after.raw_mean("retain")
    drop = before.probe_accuracy - after.probe_accuracy
    checks = {"memorized": sc_forget >= 0.95, "forget": forget <= 0.30, "retain": retain >= 0.70,
              "probe": drop <= 0.10, "runtime": desk["elapsed"] <= 600}
    detail = (f"pre forget SC ROUGE-L {sc_forget:.3f} ({mem.stop_reason}, {mem.epochs} epochs); "
              f"post forget raw {forget:.3f}, retain raw {retain:.3f}; probe {before.probe_accuracy:.3f} -> "
              f"{after.probe_accuracy:.3f}; runtime {desk['elapsed']:.0f} s (memorization {desk['t_mem']:.0f} s)")
    failed = [k for k, v in checks.items() if not v]
    assert verdict("C5 desk end-to-end adaptive RMU", not failed,
                   detail + (f"; failed {failed}" if failed else ""))


def test_c6_later_windows_resist_mia(desk, tmp_path):
    root = desk["root"]
    save_corpus(desk["corpus"], root / "corpus.jsonl")
    save_probe(desk["probe"], root / "probe.jsonl")
    rows, code = hz.run_sweep(hz.SweepConfig(str(root / "memorized.ckpt"), str(root / "corpus.jsonl"),
                                             str(root / "probe.jsonl"), str(tmp_path / "sweep"), seed=SEED))
    mia = [r.mia for r in rows]
    k = max(1, len(rows) // 3)
    early, late = float(np.mean(mia[:k])), float(np.mean(mia[-k:]))
    ok = code == 0 and late > early
    table = ", ".join(f"({r.window}) mia {r.mia:.3f} final {r.final:.3f}" for r in rows)
    assert verdict("C6 layerwise MIA trend", ok, f"latest-third mean {late:.3f} vs earliest-third {early:.3f}; "
                                                 f"{table}")


def test_c7_steering_dynamics(desk):
    s0, s1 = desk["stats"]
    beta = desk["cfg"].beta
    rising = s1["cosine"] > s0["cosine"]
    near_beta = abs(s1["norm_ratio"] - beta) <= 0.2 * beta
    assert verdict("C7 steering dynamics", rising and near_beta,
                   f"cos(M_u, u) {s0['cosine']:.3f} -> {s1['cosine']:.3f} ({'rises' if rising else 'does not rise'}); "
                   f"||M_u||/||M_f|| {s0['norm_ratio']:.3f} -> {s1['norm_ratio']:.3f}, band "
                   f"[{0.8 * beta:.2f}, {1.2 * beta:.2f}] ({'inside' if near_beta else 'outside'})")


# -- 8. determinism -----------------------------------------------------------


def test_c8_pipeline_determinism(tmp_path):
    """Two full generate -> memorize -> unlearn -> evaluate runs at reduced scale."""
    sizes = {s: {"retain": 6, "forget": 4, "holdout": 4} for s in (1, 2, 3)}
    model = {"n_layers": 4, "d_model": 32, "n_heads": 4}
    mem = {"max_epochs": 4, "eval_every": 2, "target_rouge": 0.0, "target_qa": 0.0, "target_probe": 0.0}
    blobs = []
    for run in ("a", "b"):
        out = hz.run_pipeline(tmp_path / run, SEED, sizes=sizes, model=model, memorize_cfg=mem,
                              unlearn={"layer": 3, "steps": 60})
        blobs.append(out["report"].read_bytes())
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0
    assert verdict("C8 end-to-end determinism", ok, f"MetricReport JSON {len(blobs[0])} bytes, "
                                                    f"identical={blobs[0] == blobs[1]}")
