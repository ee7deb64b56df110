import csv
import io
import json

import pytest

from rmulab import harness as hz
from rmulab.cli import main
from rmulab.metrics import final_score

SIZES = {str(s): {"retain": 3, "forget": 2, "holdout": 2} for s in (1, 2, 3)}
MODEL = {"n_layers": 4, "d_model": 16, "n_heads": 2}
QUICK = {"max_epochs": 1, "eval_every": 1, "target_rouge": 0, "target_qa": 0, "target_probe": 0}

TABLE_2 = [  # window, task aggregate, mia score, mmlu, final as printed
    ("0,1,2", .547, .062, .244, .284), ("1,2,3", .542, .081, .249, .291), ("2,3,4", .355, .401, .250, .336),
    ("3,4,5", .433, .490, .254, .392), ("4,5,6", .508, .355, .229, .364), ("5,6,7", .637, .357, .262, .419),
    ("6,7,8", .597, .416, .250, .421), ("7,8,9", .616, .332, .245, .398), ("8,9,10", .631, .362, .265, .419),
    ("9,10,11", .574, .471, .264, .437), ("10,11,12", .282, .279, .243, .268),
    ("11,12,13", .582, .489, .254, .442), ("12,13,14", .565, .835, .261, .554),
    ("13,14,15", .538, .747, .258, .515),
]


def cfg_file(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def stage(tmp_path_factory):
    """A tiny generated corpus and a one-epoch checkpoint shared by the tests."""
    root = tmp_path_factory.mktemp("stage")
    hz.run_generate(root / "c", 5, sizes=SIZES, probe_items=6)
    hz.run_memorize(root / "m", 5, root / "c" / "corpus.jsonl", root / "c" / "probe.jsonl", MODEL, QUICK)
    return root


def test_generate_presets_and_seed_policy(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "a")]) == hz.EXIT_VALIDATION
    m = hz.run_generate(tmp_path / "p", 0, "paper-sizes", probe_items=5)
    sizes = m["config"]["sizes"]
    assert [(sizes[s]["forget"], sizes[s]["retain"]) for s in "123"] == [(214, 260), (780, 762), (372, 392)]
    bad = cfg_file(tmp_path, "bad.json", {"sizes": {"1": {"retain": 0}}})
    assert main(["generate", "--config", bad, "--seed", "1", "--out", str(tmp_path / "b")]) == 1
    assert main(["generate", "--preset", "desk", "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["seeds"] == {"corpus": 1} and len(manifest["corpus_checksum"]) == 64


def test_memorize_rerun_same_checksum_and_corrupt_corpus(tmp_path, stage):
    hz.run_memorize(tmp_path / "m2", 5, stage / "c" / "corpus.jsonl", stage / "c" / "probe.jsonl", MODEL, QUICK)
    a = json.loads((stage / "m" / "manifest.json").read_text())
    b = json.loads((tmp_path / "m2" / "manifest.json").read_text())
    assert a["checkpoint_checksum"] == b["checkpoint_checksum"]
    assert {"config", "seeds", "corpus_checksum", "loss_log", "checkpoint"} <= set(a)
    broken = tmp_path / "broken.jsonl"
    broken.write_text((stage / "c" / "corpus.jsonl").read_text().replace('"split"', '"splat"', 1))
    with pytest.raises(hz.ValidationError, match="split"):
        hz.run_memorize(tmp_path / "m3", 5, broken, stage / "c" / "probe.jsonl", MODEL, QUICK)
    assert not (tmp_path / "m3" / "model.ckpt").exists()


def test_memorize_unmet_targets_exit_code_2(tmp_path, stage):
    cfg = cfg_file(tmp_path, "m.json", {"corpus": str(stage / "c" / "corpus.jsonl"),
                                        "probe": str(stage / "c" / "probe.jsonl"), "model": MODEL,
                                        "memorize": {"max_epochs": 1, "eval_every": 1}})
    assert main(["memorize", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "m")]) == hz.EXIT_RUNTIME
    assert json.loads((tmp_path / "m" / "pre_report.json").read_text())["stop_reason"] == "max-epochs"


def test_unlearn_zero_steps_and_bad_window(tmp_path, stage):
    ckpt, corpus = stage / "m" / "model.ckpt", stage / "c" / "corpus.jsonl"
    m = hz.run_unlearn(tmp_path / "u", 1, ckpt, corpus, {"layer": 3, "steps": 0})
    assert m["checkpoint_checksum"] == m["input_checkpoint_checksum"]
    assert (tmp_path / "u" / "steps.csv").read_text().startswith("step,forget_loss")
    with pytest.raises(hz.ValidationError, match="window"):
        hz.run_unlearn(tmp_path / "u2", 1, ckpt, corpus, {"layer": 6})
    with pytest.raises(hz.ValidationError, match="unknown keys"):
        hz.run_unlearn(tmp_path / "u3", 1, ckpt, corpus, {"lyer": 3})


def test_unlearn_divergence_recorded_in_manifest(tmp_path, stage):
    cfg = {"layer": 3, "steps": 40, "lr": 1e30, "optimizer": "sgd"}
    with pytest.raises(hz.RunFailure):
        hz.run_unlearn(tmp_path / "u", 1, stage / "m" / "model.ckpt", stage / "c" / "corpus.jsonl", cfg)
    manifest = json.loads((tmp_path / "u" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "non-finite" in manifest["error"]


def test_evaluate_report_transcripts_and_missing_holdout(tmp_path, stage):
    c, p = stage / "c" / "corpus.jsonl", stage / "c" / "probe.jsonl"
    rep = hz.run_evaluate(tmp_path / "e", stage / "m" / "model.ckpt", c, p, max_new_tokens=6)
    data = json.loads((tmp_path / "e" / "report.json").read_text())
    assert len(data["cells"]) == 12 and all("aggregated_score" in x for x in data["cells"])
    assert data["final_score"] == pytest.approx(final_score(rep.task_aggregate, rep.mia_score, rep.probe_accuracy))
    rows = list(csv.DictReader(io.StringIO((tmp_path / "e" / "report.csv").read_text())))
    assert len(rows) == 1 and float(rows[0]["final"]) == rep.final_score
    lines = (tmp_path / "e" / "transcripts.jsonl").read_text().splitlines()
    assert len(lines) == 3 * 5 * 2
    no_holdout = tmp_path / "nh.jsonl"
    no_holdout.write_text("".join(l + "\n" for l in c.read_text().splitlines() if '"split": "holdout"' not in l))
    with pytest.raises(hz.ValidationError, match="holdout"):
        hz.run_evaluate(tmp_path / "e2", stage / "m" / "model.ckpt", no_holdout, p)


def test_sweep_rows_isolated_and_partial_failure(tmp_path, stage):
    base = {"checkpoint": str(stage / "m" / "model.ckpt"), "corpus": str(stage / "c" / "corpus.jsonl"),
            "probe": str(stage / "c" / "probe.jsonl"), "unlearn": {"steps": 2}, "max_new_tokens": 4}
    cfg = cfg_file(tmp_path, "s.json", base)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s0")]) == hz.EXIT_VALIDATION
    assert main(["sweep", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "s")]) == hz.EXIT_OK
    out = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert [r["window"] for r in out["rows"]] == ["0,1,2", "1,2,3"]
    assert out["columns"] == ["window", "task-aggregate", "mia", "probe", "final"]
    assert out["best"]["final"] == max(r["final"] for r in out["rows"])
    starts = {json.loads((tmp_path / "s" / "rows" / w / "manifest.json").read_text())["start_checksum"]
              for w in ("0-1-2", "1-2-3")}
    assert len(starts) == 1
    for r in out["rows"]:
        assert abs(r["final"] - (r["task-aggregate"] + r["mia"] + r["probe"]) / 3) <= 1e-9
    header = (tmp_path / "s" / "sweep.csv").read_text().splitlines()[0]
    assert header == "window,task-aggregate,mia,probe,final"
    diverge = cfg_file(tmp_path, "d.json", {**base, "unlearn": {"steps": 30, "lr": 1e30, "optimizer": "sgd"},
                                            "windows": [[0, 1, 2]]})
    assert main(["sweep", "--config", diverge, "--seed", "3", "--out", str(tmp_path / "f")]) == hz.EXIT_PARTIAL
    failed = json.loads((tmp_path / "f" / "sweep.json").read_text())
    assert failed["best"] is None and failed["failed"][0]["window"] == "0,1,2"
    bad = cfg_file(tmp_path, "b.json", {**base, "windows": [[2, 3, 4]]})
    assert main(["sweep", "--config", bad, "--seed", "3", "--out", str(tmp_path / "b")]) == hz.EXIT_VALIDATION


def test_sweep_parallel_matches_sequential(tmp_path, stage):
    rows = {}
    for par in (1, 2):
        cfg = hz.SweepConfig(str(stage / "m" / "model.ckpt"), str(stage / "c" / "corpus.jsonl"),
                             str(stage / "c" / "probe.jsonl"), str(tmp_path / f"p{par}"), {"steps": 2},
                             parallelism=par, max_new_tokens=4, seed=9)
        rows[par], code = hz.run_sweep(cfg)
        assert code == 0
    assert rows[1] == rows[2]
    assert (tmp_path / "p1" / "sweep.csv").read_bytes() == (tmp_path / "p2" / "sweep.csv").read_bytes()


def test_sixteen_layer_windows_match_table_2_rows():
    assert [hz.window_label(w) for w in hz.all_windows(16)] == [r[0] for r in TABLE_2]
    assert len(hz.all_windows(6)) == 4


def _table_rows():
    return [{"window": w, "task-aggregate": a, "mia": m, "probe": p, "final": final_score(a, m, p)}
            for w, a, m, p, _ in TABLE_2]


def test_markdown_report_reproduces_table_2_final_column():
    md = hz.render_report(_table_rows(), "markdown")
    table = md.split("\n\n")[0].splitlines()[2:]
    finals = [line.strip("|").split("|")[-1].strip().strip("*") for line in table]
    assert finals == [f"{final_score(a, m, p):.3f}" for _, a, m, p, _ in TABLE_2]
    # 11 of 14 printed finals follow from the printed (rounded) components
    assert sum(float(f) == r[4] for f, r in zip(finals, TABLE_2)) == 11
    assert "**12,13,14**" in md
    assert "window start" in md


def test_csv_json_round_trip_is_lossless(tmp_path):
    rows = _table_rows()
    (tmp_path / "r.json").write_text(hz.render_report(rows, "json"))
    from_json = hz.load_results(tmp_path / "r.json")
    (tmp_path / "r.csv").write_text(hz.render_report(from_json, "csv"))
    from_csv = hz.load_results(tmp_path / "r.csv")
    key = lambda r: int(r["window"].split(",")[0])  # noqa: E731
    assert sorted(from_csv, key=key) == sorted(rows, key=key) == sorted(from_json, key=key)
    curves = json.loads((tmp_path / "r.json").read_text())["curves"]
    assert curves["mia"][12] == [12, .835]


def test_empty_report_header_only_and_unknown_format(tmp_path):
    with pytest.warns(UserWarning, match="no sweep results"):
        text = hz.render_report([], "csv")
    assert text == "window,task-aggregate,mia,probe,final,window_start\n"
    with pytest.raises(hz.ValidationError):
        hz.render_report([], "xml")
    (tmp_path / "empty.json").write_text(json.dumps({"rows": []}))
    with pytest.warns(UserWarning):
        assert main(["report", str(tmp_path / "empty.json"), "--format", "markdown"]) == 0


def test_cli_rejects_bad_config(tmp_path):
    (tmp_path / "x.json").write_text("{not json")
    assert main(["evaluate", "--config", str(tmp_path / "x.json"), "--out", str(tmp_path)]) == 1
    assert main(["evaluate", "--config", str(tmp_path / "missing.json")]) == 1
    extra = cfg_file(tmp_path, "e.json", {"checkpoint": "a", "bogus": 1})
    assert main(["evaluate", "--config", extra, "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit):
        main(["report", "--format", "xml"])
