"""Command-line entry point: ``python3 -m rmulab <command> [flags]``.

Every command takes its settings from a JSON ``--config`` file; ``--seed``,
``--out``, ``--preset`` and ``--format`` override the matching config keys.
Exit codes: 0 ok, 1 validation error, 2 runtime failure, 3 partial sweep failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as hz

COMMANDS = ("generate", "memorize", "unlearn", "evaluate", "sweep", "report")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmulab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON config file")
        s.add_argument("--seed", type=int, help="RNG seed (required for generate/memorize/unlearn/sweep)")
        s.add_argument("--out", type=Path, help="output directory")
        if name == "generate":
            s.add_argument("--preset", choices=("desk", "paper-sizes"))
        if name == "report":
            s.add_argument("--format", choices=hz.REPORT_FORMATS)
            s.add_argument("results", nargs="?", help="sweep.json or sweep.csv (or 'results' in config)")
    return p


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise hz.ValidationError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise hz.ValidationError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise hz.ValidationError(f"config {path} must hold a JSON object")
    return data


def _pick(args, cfg: dict, key: str):
    v = getattr(args, key, None)
    return v if v is not None else cfg.get(key)


def _allowed(cfg: dict, keys: set[str], command: str) -> None:
    extra = sorted(set(cfg) - keys)
    if extra:
        raise hz.ValidationError(f"{command} config: unknown keys {extra}; allowed {sorted(keys)}")


def dispatch(args) -> int:
    cfg = _load_config(args.config)
    seed, out = _pick(args, cfg, "seed"), _pick(args, cfg, "out")
    cmd = args.command
    if cmd == "generate":
        _allowed(cfg, {"seed", "out", "preset", "sizes", "probe_items"}, cmd)
        m = hz.run_generate(out, seed, _pick(args, cfg, "preset") or "desk", cfg.get("sizes"),
                            cfg.get("probe_items"))
        print(f"corpus {m['corpus_checksum'][:12]} -> {m['corpus_path']}")
    elif cmd == "memorize":
        _allowed(cfg, {"seed", "out", "corpus", "probe", "model", "memorize"}, cmd)
        m = hz.run_memorize(out, seed, cfg.get("corpus"), cfg.get("probe"), cfg.get("model"), cfg.get("memorize"))
        print(f"memorized ({m['pre_report']['epochs']} epochs) -> {m['checkpoint']}")
    elif cmd == "unlearn":
        _allowed(cfg, {"seed", "out", "checkpoint", "corpus", "unlearn"}, cmd)
        m = hz.run_unlearn(out, seed, cfg.get("checkpoint"), cfg.get("corpus"), cfg.get("unlearn"))
        print(f"unlearned -> {m['checkpoint']}")
    elif cmd == "evaluate":
        _allowed(cfg, {"seed", "out", "checkpoint", "corpus", "probe", "max_new_tokens", "rouge_variant"}, cmd)
        rep = hz.run_evaluate(out, cfg.get("checkpoint"), cfg.get("corpus"), cfg.get("probe"),
                              cfg.get("max_new_tokens", 48), cfg.get("rouge_variant", "f"))
        print(json.dumps(rep.csv_row()))
    elif cmd == "sweep":
        keys = {"seed", "out", "checkpoint", "corpus", "probe", "unlearn", "windows", "parallelism",
                "max_new_tokens"}
        _allowed(cfg, keys, cmd)
        if out is None:
            raise hz.ValidationError("an output directory is required (--out)")
        sc = hz.build_config(hz.SweepConfig, {**cfg, "seed": seed, "out": str(out)}, "sweep")
        rows, code = hz.run_sweep(sc)
        for r in rows:
            print(r.window, r.status, "" if r.final is None else f"final={r.final:.3f}")
        return code
    elif cmd == "report":
        _allowed(cfg, {"out", "results", "format"}, cmd)
        fmt = _pick(args, cfg, "format") or "markdown"
        text = hz.run_report(args.results or cfg.get("results"), fmt, out)
        sys.stdout.write(text)
    return hz.EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return dispatch(args)
    except hz.ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return hz.EXIT_VALIDATION
    except hz.RunFailure as e:
        print(f"failed: {e}", file=sys.stderr)
        return hz.EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - any other runtime fault is exit 2
        logging.getLogger("rmulab").exception("unexpected failure")
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return hz.EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
