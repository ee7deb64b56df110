"""Experiment orchestration: corpus generation, memorization, unlearning,
evaluation, the consecutive-window sweep and report rendering.

Every stage writes a ``manifest.json`` next to its artifacts that records the
config, seeds and input checksums needed to reproduce it.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from .corpus import (Corpus, CorpusFormatError, CorpusSpec, Tokenizer, generate_corpus, load_corpus,
                     load_probe, probe_training_records, save_corpus, save_probe)
from .metrics import MetricReport, evaluate_model, transcript_dicts
from .model import (CheckpointError, ModelConfig, build_model, checksum, clone_frozen, load_checkpoint,
                    save_checkpoint, validate_window)
from .unlearn import DivergenceError, MemorizeConfig, StepReport, UnlearnConfig, Unlearner, memorize

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
SWEEP_COLUMNS = ("window", "task-aggregate", "mia", "probe", "final")
REPORT_FORMATS = ("csv", "json", "markdown")
_ROW_KEYS = {"task-aggregate": "task_aggregate", "mia": "mia", "probe": "probe", "final": "final"}


class ValidationError(ValueError):
    """Bad config or input; maps to exit code 1."""


class RunFailure(RuntimeError):
    """A stage ran but failed (divergence, unmet targets); maps to exit code 2."""


# -- small helpers -----------------------------------------------------------


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path: Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj))


def fingerprint(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def require_seed(seed) -> int:
    if seed is None:
        raise ValidationError("a seed is required (--seed or \"seed\" in the config); "
                              "no ambient randomness is used")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ValidationError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    return seed


def build_config(cls, values: dict | None, where: str, **fixed):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}; allowed {sorted(known)}")
    try:
        return cls(**{**values, **fixed})
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{where}: {e}") from e


def _out_dir(out) -> Path:
    if out is None:
        raise ValidationError("an output directory is required (--out)")
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValidationError(f"cannot create output directory {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise ValidationError(f"output directory {path} is not writable")
    return path


def _need(path, what: str) -> Path:
    if path is None:
        raise ValidationError(f"config is missing the {what} path")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} file not found: {p}")
    return p


def read_corpus(path) -> Corpus:
    try:
        return load_corpus(_need(path, "corpus"))
    except CorpusFormatError as e:
        raise ValidationError(str(e)) from e


def read_probe(path):
    try:
        return load_probe(_need(path, "probe"))
    except CorpusFormatError as e:
        raise ValidationError(str(e)) from e


def read_checkpoint(path):
    try:
        return load_checkpoint(_need(path, "checkpoint"))
    except CheckpointError as e:
        raise ValidationError(str(e)) from e


def _write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})


# -- stages ------------------------------------------------------------------


def run_generate(out, seed, preset: str = "desk", sizes: dict | None = None,
                 probe_items: int | None = None) -> dict:
    seed = require_seed(seed)
    try:
        spec = CorpusSpec.preset(preset)
        if sizes is not None or probe_items is not None:
            spec = CorpusSpec(sizes if sizes is not None else spec.sizes,
                              probe_items if probe_items is not None else spec.probe_items)
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e)) from e
    out = _out_dir(out)
    corpus, probe = generate_corpus(spec, seed)
    save_corpus(corpus, out / "corpus.jsonl")
    save_probe(probe, out / "probe.jsonl")
    manifest = {"command": "generate", "seeds": {"corpus": seed}, "config": {
        "preset": preset, "sizes": {str(k): v for k, v in spec.sizes.items()}, "probe_items": spec.probe_items},
        "corpus_path": str(out / "corpus.jsonl"), "probe_path": str(out / "probe.jsonl"),
        "corpus_checksum": corpus.checksum(), "probe_checksum": file_sha256(out / "probe.jsonl"),
        "status": "ok"}
    write_json(out / "manifest.json", manifest)
    return manifest


def run_memorize(out, seed, corpus_path, probe_path, model: dict | None = None,
                 memorize_cfg: dict | None = None) -> dict:
    """Fine-tune a fresh model until it regurgitates the retain and forget sets.

    Raises RunFailure (after writing the pre-report) when targets are unmet.
    """
    seed = require_seed(seed)
    corpus, probe = read_corpus(corpus_path), read_probe(probe_path)
    tok = Tokenizer.default()
    mcfg = build_config(ModelConfig, model, "model", vocab_size=tok.vocab_size, seed=seed)
    kcfg = build_config(MemorizeConfig, memorize_cfg, "memorize", seed=seed)
    out = _out_dir(out)
    net = build_model(mcfg)
    log.info("memorizing %d-layer d=%d model (%d params)", mcfg.n_layers, mcfg.d_model, net.n_params())
    result = memorize(net, corpus, tok, kcfg, probe_training_records(probe), probe)
    ckpt = out / "model.ckpt"
    digest = save_checkpoint(net, ckpt)
    cols = ["epoch", "loss", "forget_rouge", "forget_qa", "retain_rouge", "retain_qa", "probe"]
    _write_csv(out / "memorize_log.csv", result.history, cols)
    write_json(out / "pre_report.json", {"stop_reason": result.stop_reason, "epochs": result.epochs,
                                         "scores": result.final})
    manifest = {"command": "memorize", "seeds": {"model": seed, "memorize": seed},
                "config": {"model": asdict(mcfg), "memorize": asdict(kcfg)},
                "corpus_path": str(corpus_path), "corpus_checksum": corpus.checksum(),
                "probe_checksum": file_sha256(probe_path), "loss_log": str(out / "memorize_log.csv"),
                "checkpoint": str(ckpt), "checkpoint_checksum": digest,
                "status": "ok" if result.stop_reason == "targets-met" else "targets-unmet",
                "pre_report": {"stop_reason": result.stop_reason, "epochs": result.epochs, **result.final}}
    write_json(out / "manifest.json", manifest)
    if result.stop_reason != "targets-met":
        raise RunFailure(f"memorization targets unmet after {result.epochs} epochs: {result.final}")
    return manifest


def _unlearn_config(values: dict | None, seed: int, **fixed) -> UnlearnConfig:
    values = {k: v for k, v in (values or {}).items() if k != "seed"}
    return build_config(UnlearnConfig, values, "unlearn", seed=seed, **fixed)


def unlearn_model(net, corpus: Corpus, cfg: UnlearnConfig, tok: Tokenizer | None = None):
    """Run ``cfg.steps`` unlearning steps in place; returns the step reports."""
    tok = tok or Tokenizer.default()
    try:
        validate_window(net, cfg.window)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    frozen = clone_frozen(net) if cfg.method in ("rmu", "adaptive-rmu") else None
    return Unlearner(net, frozen, cfg, tok).run(corpus)


def run_unlearn(out, seed, checkpoint_path, corpus_path, unlearn: dict | None = None) -> dict:
    seed = require_seed(seed)
    cfg = _unlearn_config(unlearn, seed)
    corpus, net = read_corpus(corpus_path), read_checkpoint(checkpoint_path)
    try:
        validate_window(net, cfg.window)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    out = _out_dir(out)
    start = checksum(net)
    manifest = {"command": "unlearn", "seeds": {"unlearn": seed}, "config": {"unlearn": asdict(cfg)},
                "input_checkpoint": str(checkpoint_path), "input_checkpoint_checksum": start,
                "corpus_path": str(corpus_path), "corpus_checksum": corpus.checksum(),
                "loss_log": str(out / "steps.csv"), "checkpoint": str(out / "unlearned.ckpt")}
    reports: list[StepReport] = []
    try:
        frozen = clone_frozen(net) if cfg.method in ("rmu", "adaptive-rmu") else None
        Unlearner(net, frozen, cfg, Tokenizer.default()).run(corpus, callback=reports.append)
    except DivergenceError as e:
        _write_csv(out / "steps.csv", [asdict(r) for r in reports], [f.name for f in fields(StepReport)])
        write_json(out / "manifest.json", {**manifest, "status": "failed", "error": str(e), "checkpoint": None})
        raise RunFailure(str(e)) from e
    _write_csv(out / "steps.csv", [asdict(r) for r in reports], [f.name for f in fields(StepReport)])
    manifest["checkpoint_checksum"] = save_checkpoint(net, out / "unlearned.ckpt")
    manifest["status"] = "ok"
    write_json(out / "manifest.json", manifest)
    return manifest


def evaluate_checkpoint(net, corpus: Corpus, probe, max_new_tokens: int = 48, rouge_variant: str = "f",
                        probe_checksum: str = ""):
    fp = fingerprint({"checkpoint": checksum(net), "corpus": corpus.checksum(), "probe": probe_checksum,
                      "max_new_tokens": max_new_tokens, "rouge_variant": rouge_variant})
    try:
        return evaluate_model(net, corpus, probe, Tokenizer.default(), max_new_tokens, rouge_variant, fp)
    except ValueError as e:
        raise ValidationError(str(e)) from e


def run_evaluate(out, checkpoint_path, corpus_path, probe_path, max_new_tokens: int = 48,
                 rouge_variant: str = "f") -> MetricReport:
    corpus, probe, net = read_corpus(corpus_path), read_probe(probe_path), read_checkpoint(checkpoint_path)
    if not corpus.select(split="holdout"):
        raise ValidationError("corpus has no holdout split; membership inference is impossible")
    if rouge_variant not in ("f", "recall"):
        raise ValidationError(f"rouge_variant must be 'f' or 'recall', got {rouge_variant!r}")
    out = _out_dir(out)
    report, transcripts = evaluate_checkpoint(net, corpus, probe, max_new_tokens, rouge_variant,
                                              file_sha256(probe_path))
    (out / "report.json").write_text(dumps(report.to_dict()))
    _write_csv(out / "report.csv", [report.csv_row()], list(report.csv_row()))
    with open(out / "transcripts.jsonl", "w") as fh:
        for t in transcript_dicts(transcripts):
            fh.write(json.dumps(t, sort_keys=True) + "\n")
    write_json(out / "manifest.json", {
        "command": "evaluate", "seeds": {}, "config": {"max_new_tokens": max_new_tokens,
                                                        "rouge_variant": rouge_variant},
        "checkpoint": str(checkpoint_path), "checkpoint_checksum": checksum(net),
        "corpus_path": str(corpus_path), "corpus_checksum": corpus.checksum(),
        "probe_checksum": file_sha256(probe_path), "report": str(out / "report.json"),
        "transcripts": str(out / "transcripts.jsonl"), "status": "ok"})
    return report


# -- sweep -------------------------------------------------------------------


@dataclass
class SweepConfig:
    checkpoint: str
    corpus: str
    probe: str
    out: str
    unlearn: dict = field(default_factory=dict)
    windows: list | None = None
    parallelism: int = 1
    max_new_tokens: int = 48
    seed: int | None = None

    def __post_init__(self):
        if "layer" in self.unlearn:
            raise ValidationError("sweep unlearn config must not set 'layer'; windows choose it")
        if not isinstance(self.parallelism, int) or self.parallelism < 1:
            raise ValidationError(f"parallelism must be an integer >= 1, got {self.parallelism!r}")


@dataclass
class SweepRow:
    window: str
    task_aggregate: float | None
    mia: float | None
    probe: float | None
    final: float | None
    status: str = "ok"
    error: str = ""

    def table_row(self) -> dict:
        if self.status != "ok":
            return {"window": self.window, **{c: "failed" for c in SWEEP_COLUMNS[1:]}}
        return {"window": self.window, "task-aggregate": self.task_aggregate, "mia": self.mia,
                "probe": self.probe, "final": self.final}


def all_windows(n_layers: int) -> list[tuple[int, int, int]]:
    return [(a, a + 1, a + 2) for a in range(n_layers - 2)]


def window_label(w) -> str:
    return ",".join(str(i) for i in w)


def _sweep_row(args: tuple) -> dict:
    """One isolated sweep row: reload the checkpoint, unlearn, evaluate."""
    window, ckpt, corpus_path, probe_path, unlearn_values, seed, max_new_tokens, row_dir = args
    label = window_label(window)
    row_dir = Path(row_dir)
    row_dir.mkdir(parents=True, exist_ok=True)
    try:
        net = load_checkpoint(ckpt)
        start = checksum(net)
        corpus, probe = load_corpus(corpus_path), load_probe(probe_path)
        cfg = _unlearn_config(unlearn_values, seed, layer=window[2])
        reports = unlearn_model(net, corpus, cfg)
        _write_csv(row_dir / "steps.csv", [asdict(r) for r in reports], [f.name for f in fields(StepReport)])
        report, _ = evaluate_checkpoint(net, corpus, probe, max_new_tokens, "f", file_sha256(probe_path))
        (row_dir / "report.json").write_text(dumps(report.to_dict()))
        write_json(row_dir / "manifest.json", {
            "command": "sweep-row", "window": label, "seeds": {"unlearn": seed},
            "config": {"unlearn": asdict(cfg)}, "start_checkpoint": str(ckpt), "start_checksum": start,
            "end_checksum": checksum(net), "corpus_checksum": corpus.checksum(),
            "loss_log": str(row_dir / "steps.csv"), "status": "ok"})
        row = SweepRow(label, report.task_aggregate, report.mia_score, report.probe_accuracy,
                       report.final_score)
    except Exception as e:  # a failed row must not stop the sweep
        log.exception("sweep row %s failed", label)
        write_json(row_dir / "manifest.json", {"command": "sweep-row", "window": label, "status": "failed",
                                               "error": f"{type(e).__name__}: {e}"})
        row = SweepRow(label, None, None, None, None, "failed", f"{type(e).__name__}: {e}")
    return asdict(row)


def run_sweep(cfg: SweepConfig) -> tuple[list[SweepRow], int]:
    """Returns the rows (sorted by window) and the exit code (0 or 3)."""
    seed = require_seed(cfg.seed)
    net = read_checkpoint(cfg.checkpoint)
    read_corpus(cfg.corpus)
    read_probe(cfg.probe)
    _unlearn_config(cfg.unlearn, seed)  # validate before any row runs
    n_layers = net.config.n_layers
    windows = [tuple(w) for w in cfg.windows] if cfg.windows is not None else all_windows(n_layers)
    if not windows:
        raise ValidationError("sweep has no windows")
    for w in windows:
        try:
            validate_window(net, w)
        except ValueError as e:
            raise ValidationError(str(e)) from e
    out = _out_dir(cfg.out)
    start = checksum(net)
    jobs = [(w, cfg.checkpoint, cfg.corpus, cfg.probe, cfg.unlearn, seed, cfg.max_new_tokens,
             str(out / "rows" / window_label(w).replace(",", "-"))) for w in sorted(set(windows))]
    if cfg.parallelism > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallelism) as pool:
            dicts = list(pool.map(_sweep_row, jobs))
    else:
        dicts = [_sweep_row(j) for j in jobs]
    rows = [SweepRow(**d) for d in dicts]
    ok = [r for r in rows if r.status == "ok"]
    best = max(ok, key=lambda r: r.final) if ok else None
    _write_csv(out / "sweep.csv", [r.table_row() for r in rows], SWEEP_COLUMNS)
    write_json(out / "sweep.json", {
        "columns": list(SWEEP_COLUMNS), "rows": [r.table_row() for r in rows],
        "best": best.table_row() if best else None,
        "failed": [{"window": r.window, "error": r.error} for r in rows if r.status != "ok"]})
    write_json(out / "manifest.json", {
        "command": "sweep", "seeds": {"unlearn": seed}, "config": asdict(cfg),
        "start_checksum": start, "windows": [window_label(w) for w in sorted(set(windows))],
        "status": "ok" if len(ok) == len(rows) else "partial"})
    return rows, EXIT_OK if len(ok) == len(rows) else EXIT_PARTIAL


# -- report ------------------------------------------------------------------


def _num(v):
    if v in ("", None, "failed"):
        return "failed" if v == "failed" else None
    return float(v)


def load_results(path) -> list[dict]:
    """Sweep rows from a sweep/report JSON or CSV file, keyed by SWEEP_COLUMNS."""
    p = _need(path, "results")
    try:
        if p.suffix == ".json":
            data = json.loads(p.read_text())
            raw = data["rows"] if isinstance(data, dict) else data
        else:
            raw = list(csv.DictReader(io.StringIO(p.read_text())))
        rows = []
        for r in raw:
            rows.append({"window": str(r["window"]), **{c: _num(r[c]) for c in SWEEP_COLUMNS[1:]}})
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise ValidationError(f"{p}: malformed results ({e})") from e
    return rows


def _start(window: str) -> int:
    return int(window.split(",")[0])


def _best(rows: list[dict]) -> dict | None:
    ok = [r for r in rows if isinstance(r["final"], float)]
    return max(ok, key=lambda r: r["final"]) if ok else None


def render_report(rows: list[dict], fmt: str) -> str:
    """Sweep table plus per-metric layer curves (x = window start)."""
    if fmt not in REPORT_FORMATS:
        raise ValidationError(f"unknown format {fmt!r}; expected one of {REPORT_FORMATS}")
    if not rows:
        warnings.warn("no sweep results; emitting header only", stacklevel=2)
    rows = sorted(rows, key=lambda r: _start(r["window"]))
    if fmt == "json":
        curves = {c: [[_start(r["window"]), r[c]] for r in rows if isinstance(r[c], float)]
                  for c in SWEEP_COLUMNS[1:]}
        best = _best(rows)
        return dumps({"columns": list(SWEEP_COLUMNS), "rows": rows, "best": best, "curves": curves})
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(SWEEP_COLUMNS) + ["window_start"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**{c: ("" if r[c] is None else r[c]) for c in SWEEP_COLUMNS},
                        "window_start": _start(r["window"])})
        return buf.getvalue()
    best = _best(rows)
    fmt3 = lambda v: f"{v:.3f}" if isinstance(v, float) else str(v)  # noqa: E731
    lines = ["| " + " | ".join(SWEEP_COLUMNS) + " |", "|" + "---|" * len(SWEEP_COLUMNS)]
    for r in rows:
        cells = [r["window"]] + [fmt3(r[c]) for c in SWEEP_COLUMNS[1:]]
        if r is best:
            cells = [f"**{c}**" for c in cells]
        lines.append("| " + " | ".join(cells) + " |")
    lines += ["", "Layer curves (x = window start):", "",
              "| window start | " + " | ".join(SWEEP_COLUMNS[1:]) + " |", "|" + "---|" * len(SWEEP_COLUMNS)]
    for r in rows:
        lines.append(f"| {_start(r['window'])} | " + " | ".join(fmt3(r[c]) for c in SWEEP_COLUMNS[1:]) + " |")
    return "\n".join(lines) + "\n"


def run_report(results_path, fmt: str, out=None) -> str:
    text = render_report(load_results(results_path), fmt)
    if out is not None:
        ext = {"csv": "csv", "json": "json", "markdown": "md"}[fmt]
        (_out_dir(out) / f"report.{ext}").write_text(text)
    return text


# -- full pipeline -----------------------------------------------------------


def run_pipeline(root, seed: int, preset: str = "desk", sizes: dict | None = None, model: dict | None = None,
                 memorize_cfg: dict | None = None, unlearn: dict | None = None,
                 require_memorization: bool = True) -> dict:
    """generate -> memorize -> unlearn -> evaluate under ``root``; returns artifact paths."""
    root = Path(root)
    run_generate(root / "corpus", seed, preset, sizes)
    try:
        run_memorize(root / "memorized", seed, root / "corpus" / "corpus.jsonl", root / "corpus" / "probe.jsonl",
                     model, memorize_cfg)
    except RunFailure:
        if require_memorization:
            raise
    run_unlearn(root / "unlearned", seed, root / "memorized" / "model.ckpt", root / "corpus" / "corpus.jsonl",
                unlearn)
    report = run_evaluate(root / "eval", root / "unlearned" / "unlearned.ckpt", root / "corpus" / "corpus.jsonl",
                          root / "corpus" / "probe.jsonl")
    return {"report": root / "eval" / "report.json", "metrics": report}


def is_finite_row(row: dict) -> bool:
    return all(isinstance(row[c], float) and math.isfinite(row[c]) for c in SWEEP_COLUMNS[1:])
