"""Command-line interface.

    insightsr generate SPEC.json [--out DATA.csv]
    insightsr run CONFIG.json
    insightsr replay CONFIG.json --script SCRIPT.json
    insightsr report RUN_DIR_OR_HISTORY [--out DIR]
    insightsr sweep CONFIG.json [--p 0 0.5 1]

Exit codes: 0 success, 2 configuration error, 3 backend error, 4 dataset error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional


from . import __version__
from .data import Dataset, DatasetError, GeneratorSpec, generate, meta_path_for
from .engine import EngineConfig, RunLog, run
from .expr import EvalError, evaluate, render
from .fit import FitConfig
from .ideas import IdeaLibrary
from .llmio import HttpChatBackend, LLMError, ReplayBackend, ReplayScript
from .metrics import SPLITS, DegenerateTargetsError, report
from .templating import TemplateSet


EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_DATASET = 0, 2, 3, 4

TOGGLE_SETS = {
    "all_ideas": (True, True, True),
    "no_valid_ideas": (False, False, True),
    "no_invalid_ideas": (True, True, False),
    "no_ideas": (False, False, False),
}


class ConfigError(Exception):
    pass


class ReportError(Exception):
    pass


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _resolve(base: Path, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _sha256(*paths: Path) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def dataset_fingerprint(csv_path: Path) -> str:
    return _sha256(csv_path, meta_path_for(csv_path))


# ---------------------------------------------------------------------------
# generate


def cmd_generate(spec_path, out: Optional[str] = None) -> tuple[Path, Path]:
    spec_path = Path(spec_path)
    raw = _read_json(spec_path)
    target = raw.pop("output", None)
    try:
        spec = GeneratorSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{spec_path}: {exc}") from None
    if spec.csv_path:
        spec = GeneratorSpec.from_dict({**raw, "csv_path": str(_resolve(spec_path.parent, spec.csv_path))})
    csv_path = Path(out) if out else _resolve(spec_path.parent, target or f"{spec.benchmark}.csv")
    ds = generate(spec)
    return ds.save(csv_path)


# ---------------------------------------------------------------------------
# run


def _load_dataset(cfg: dict, base: Path, out_dir: Path) -> tuple[Dataset, Path]:
    section = cfg.get("dataset")
    if not isinstance(section, dict):
        raise ConfigError("config needs a 'dataset' object")
    if "path" in section:
        path = _resolve(base, section["path"])
        if not path.exists():
            raise DatasetError(f"dataset file not found: {path}")
        return Dataset.load(path), path
    if "generate" in section:
        try:
            spec = GeneratorSpec.from_dict(section["generate"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dataset.generate: {exc}") from None
        csv_path, _ = generate(spec).save(out_dir / "dataset.csv")
        return Dataset.load(csv_path), csv_path
    raise ConfigError("dataset needs 'path' or 'generate'")


def _make_backend(section: dict, base: Path, script_override: Optional[Path] = None):
    kind = "replay" if script_override else section.get("type", "replay")
    if kind == "replay":
        script_path = script_override or _resolve(base, section.get("script"))
        if script_path is None:
            raise ConfigError("replay backend needs 'script'")
        try:
            return ReplayBackend(ReplayScript.load(script_path))
        except FileNotFoundError:
            raise ConfigError(f"replay script not found: {script_path}") from None
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad replay script {script_path}: {exc}") from None
    if kind == "http":
        options = {k: v for k, v in section.items() if k != "type"}
        return HttpChatBackend.from_env(**options)
    raise ConfigError(f"unknown backend type {kind!r}")


def _engine_config(cfg: dict) -> EngineConfig:
    try:
        engine = dict(cfg.get("engine", {}))
        if "fit" in cfg:
            engine["fit"] = FitConfig.from_dict(cfg["fit"])
        return EngineConfig.from_dict(engine)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"engine config: {exc}") from None


def final_metrics(best, data: Dataset, tau: float) -> dict:
    out = {}
    for split in SPLITS:
        X, y = data.split(split)
        if best is None or y.size == 0:
            out[split] = None
            continue
        try:
            pred = evaluate(best.expression, best.fit.params, X, data.variable_names)
            out[split] = report(pred, y, tau, split).to_dict()
        except (EvalError, DegenerateTargetsError, ValueError) as exc:
            out[split] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def cmd_run(config_path, *, script: Optional[Path] = None, overrides: Optional[dict] = None,
            out_dir: Optional[Path] = None) -> dict:
    """Execute one search; returns the manifest (also written to disk)."""
    config_path = Path(config_path)
    cfg = _read_json(config_path)
    base = config_path.parent
    if overrides:
        cfg = {**cfg, "engine": {**cfg.get("engine", {}), **overrides}}
    out_dir = out_dir or _resolve(base, cfg.get("output_dir", "run"))
    engine_cfg = _engine_config(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    data, csv_path = _load_dataset(cfg, base, out_dir)
    backend = _make_backend(cfg.get("backend", {}), base, script)
    tau = float(cfg.get("tau", data.tau))
    templates = TemplateSet(_resolve(base, cfg.get("prompts_dir")))
    library_path = _resolve(base, cfg.get("idea_library")) or out_dir / "ideas.json"

    started = datetime.now(timezone.utc).isoformat()
    runlog = RunLog(out_dir)
    try:
        result = run(engine_cfg, data, backend, library=IdeaLibrary.open(library_path), runlog=runlog,
                     templates=templates)
    finally:
        runlog.close()
    best = result.best
    manifest = {
        "code_version": __version__,
        "config": cfg,
        "engine_config": engine_cfg.to_dict(),
        "dataset": {"csv": str(csv_path), "fingerprint": dataset_fingerprint(csv_path), "name": data.name},
        "backend_id": backend.backend_id,
        "ablation": "llm-sr-equivalent" if engine_cfg.is_llmsr_equivalent else None,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "status": "aborted" if result.aborted else "completed",
        "error": result.error,
        "iterations_completed": result.iterations_completed,
        "candidates": len(result.history),
        "insight_refinements": result.refinements,
        "best": None if best is None else {
            "expression": render(best.expression),
            "params": [float(p) for p in best.fit.params],
            "score": best.fit.score,
        },
        "s_star": result.s_star if math.isfinite(result.s_star) else None,
        "tau": tau,
        "metrics": final_metrics(best, data, tau),
        "valid_rate": result.history[-1]["valid_rate"] if result.history else None,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if result.aborted:
        raise LLMError(result.error or "run aborted")
    return manifest


# ---------------------------------------------------------------------------
# report


def read_history(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("not an object")
                for key in ("iteration", "category", "valid_rate"):
                    if key not in rec:
                        raise ValueError(f"missing {key!r}")
            except ValueError as exc:
                raise ReportError(f"{path}:{lineno}: malformed history line ({exc})") from None
            rows.append(rec)
    return rows


def _cell(value) -> str:
    return "" if value is None else repr(float(value))


def cmd_report(history_path, out: Optional[str] = None) -> dict[str, Path]:
    history_path = Path(history_path)
    if history_path.is_dir():
        history_path = history_path / "history.jsonl"
    if not history_path.exists():
        raise ConfigError(f"no such history: {history_path}")
    rows = read_history(history_path)
    out_dir = Path(out) if out else history_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)

    by_iter: dict[int, list[dict]] = {}
    for r in rows:
        by_iter.setdefault(int(r["iteration"]), []).append(r)
    convergence, validity = [], []
    best_score = best_nmse = None
    for it in sorted(by_iter):
        group = by_iter[it]
        for r in group:
            if r.get("score") is not None and (best_score is None or r["score"] > best_score):
                best_score = r["score"]
            if r.get("nmse_train") is not None and (best_nmse is None or r["nmse_train"] < best_nmse):
                best_nmse = r["nmse_train"]
        convergence.append([it, _cell(best_score), _cell(best_nmse)])
        valid = sum(r["category"] != "invalid" for r in group) / len(group)
        validity.append([it, _cell(valid), _cell(group[-1]["valid_rate"])])
    counts = {c: sum(r["category"] == c for r in rows) for c in ("positive", "negative", "invalid")}

    files = {
        "convergence": (out_dir / "convergence.csv", ["iteration", "best_score", "best_nmse_train"], convergence),
        "valid_rate": (out_dir / "valid_rate.csv", ["iteration", "valid_rate", "window_valid_rate"], validity),
        "categories": (out_dir / "categories.csv", ["category", "count"], [[k, v] for k, v in counts.items()]),
    }
    for path, header, table in files.values():
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(table)
    return {k: v[0] for k, v in files.items()}


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(config_path, p_values=(0.0, 0.5, 1.0), toggle_sets=tuple(TOGGLE_SETS)) -> Path:
    config_path = Path(config_path)
    cfg = _read_json(config_path)
    root = _resolve(config_path.parent, cfg.get("output_dir", "run")) / "sweep"
    summary = []
    for p, name in itertools.product(p_values, toggle_sets):
        pos, neg, inv = TOGGLE_SETS[name]
        tag = f"p{p:g}_{name}"
        manifest = cmd_run(
            config_path,
            overrides={"insight_probability": p, "use_positive": pos, "use_negative": neg, "use_invalid": inv},
            out_dir=root / tag,
        )
        id_metrics = manifest["metrics"].get("id_test") or {}
        summary.append([
            tag, p, name, manifest["s_star"],
            manifest["best"]["expression"] if manifest["best"] else "",
            id_metrics.get("nmse", ""), manifest["valid_rate"], manifest["ablation"] or "",
        ])
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "p", "ideas", "s_star", "best_expression", "id_nmse", "valid_rate", "ablation"])
        writer.writerows(summary)
    return root / "summary.csv"


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="insightsr", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a benchmark dataset")
    g.add_argument("spec")
    g.add_argument("--out", help="CSV path (sidecar written next to it)")

    r = sub.add_parser("run", help="run a search from a config file")
    r.add_argument("config")

    rp = sub.add_parser("replay", help="run with a replay script instead of a live backend")
    rp.add_argument("config")
    rp.add_argument("--script", help="replay script (defaults to the config's backend.script)")

    rep = sub.add_parser("report", help="write convergence / valid-rate / category CSVs")
    rep.add_argument("history", help="run directory or history.jsonl")
    rep.add_argument("--out")

    sw = sub.add_parser("sweep", help="ablation sweep over insight probability and idea toggles")
    sw.add_argument("config")
    sw.add_argument("--p", nargs="+", type=float, default=[0.0, 0.5, 1.0])
    sw.add_argument("--ideas", nargs="+", choices=sorted(TOGGLE_SETS), default=list(TOGGLE_SETS))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            csv_path, meta_path = cmd_generate(args.spec, args.out)
            print(f"wrote {csv_path} and {meta_path}")
        elif args.command == "run":
            manifest = cmd_run(args.config)
            print(json.dumps({"best": manifest["best"], "metrics": manifest["metrics"]}, indent=2))
        elif args.command == "replay":
            script = Path(args.script) if args.script else None
            if script is None:
                cfg = _read_json(Path(args.config))
                script = _resolve(Path(args.config).parent, cfg.get("backend", {}).get("script"))
                if script is None:
                    raise ConfigError("replay needs --script or backend.script in the config")
            manifest = cmd_run(args.config, script=script)
            print(json.dumps({"best": manifest["best"], "metrics": manifest["metrics"]}, indent=2))
        elif args.command == "report":
            for name, path in cmd_report(args.history, args.out).items():
                print(f"{name}: {path}")
        elif args.command == "sweep":
            print(cmd_sweep(args.config, args.p, args.ideas))
    except (ConfigError, ReportError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except LLMError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
