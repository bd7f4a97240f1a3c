"""Command-line runner: ``charguide <experiment> [--config FILE] [--out DIR] ...``.

Exit codes: 0 on success, 2 for configuration errors, 3 when the run fails.
A failed run leaves a ``FAILED`` marker in the output directory.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import traceback
from pathlib import Path

import numpy as np

from .config import EXPERIMENTS, ConfigError, ExperimentConfig, load_config, parse_config
from .experiments import RunResult, run_experiment

__all__ = ["main", "emit_outputs", "read_samples_csv", "write_atomic"]

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
FAILED_MARKER = "FAILED"


def write_atomic(path, data) -> Path:
    """Write text or bytes via a temp file in the same directory, then rename."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        # strict JSON has no nan/inf literals
        return v if math.isfinite(v) else str(v)
    return obj


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_text(rows, header: str | None) -> str:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[:, None]
    lines = [] if header is None else [header]
    lines.extend(",".join(repr(float(v)) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def samples_header(dim: int, seed, rows: int, **meta) -> str:
    parts = [f"dim={dim}", f"seed={seed}", f"rows={rows}"]
    parts += [f"{k}={v}" for k, v in meta.items()]
    return ",".join(parts)


def read_samples_csv(path) -> tuple[dict, np.ndarray]:
    """Parse a ``samples.csv``: ``key=value`` header line, then one row per sample."""
    with open(path) as fh:
        header = fh.readline().strip()
        meta = dict(item.split("=", 1) for item in header.split(","))
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    dim = int(meta["dim"])
    if data.size == 0:
        data = data.reshape(0, dim)
    return meta, data


def emit_outputs(batch, metrics: dict, traces: list, out_dir, config: ExperimentConfig | None = None,
                 name: str = "samples.csv") -> dict:
    """Write ``samples.csv``, ``metrics.json``, ``traces.json`` and the config echo."""
    out = Path(out_dir)
    written = {}
    if batch is not None:
        samples = np.asarray(batch.samples).reshape(batch.samples.shape[0], -1)
        guidance = batch.guidance or {}
        header = samples_header(
            samples.shape[1], batch.seed, samples.shape[0],
            sampler=batch.sampler.label, method=guidance.get("method", "custom"),
            omega=f"{guidance.get('omega') or 0.0:g}",
        )
        written["samples"] = write_atomic(out / name, _csv_text(samples, header))
    written["metrics"] = write_atomic(out / "metrics.json", _dumps(metrics))
    written["traces"] = write_atomic(out / "traces.json", _dumps(list(traces)))
    if config is not None:
        written["config"] = write_atomic(out / "config_echo.ini", config.to_ini())
    return written


def _write_result(result: RunResult, cfg: ExperimentConfig, out: Path) -> None:
    primary = result.batches.get(result.primary) if result.primary else None
    emit_outputs(primary, result.metrics, result.traces, out, cfg)
    for key, batch in result.batches.items():
        if key != result.primary and key.count("/") == 2:
            method = key.split("/")[1]
            emit_outputs(batch, result.metrics, result.traces, out, cfg, name=f"samples_{method}.csv")
    for fname, (header, rows) in result.tables.items():
        if fname == "samples.csv":
            header = samples_header(rows.shape[1], cfg["run"]["seed"], rows.shape[0])
        write_atomic(out / fname, _csv_text(rows, header))
    for fname, ds in result.datasets.items():
        ds.save(out / fname)


def _parse_sets(items) -> dict:
    overrides: dict = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides.setdefault(section.strip(), {})[name.strip()] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="charguide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    helps = {
        "gaussian": "2-D Gaussian guidance run against the analytic tilted target",
        "mixture": "three-component mixture run scored by Monte Carlo KL",
        "magnet": "lattice magnet generation scored by NLL and magnetization peaks",
        "diagnose": "finite-difference mixing-error report on the Gaussian family",
        "iterstudy": "per-step solver iterations over a tolerance sweep",
        "mh": "generate Metropolis-Hastings magnet datasets",
    }
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", metavar="FILE", help="INI file with experiment settings")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, metavar="N", help="top-level seed (overrides [run] seed)")
        p.add_argument("--paired", action="store_true",
                       help="also run the other guidance method with the same schedule, seed and sampler")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")
    return parser


def _resolve(args) -> ExperimentConfig:
    overrides = _parse_sets(args.set)
    run = overrides.setdefault("run", {})
    if args.out is not None:
        run["out"] = args.out
    if args.seed is not None:
        run["seed"] = str(args.seed)
    if args.paired:
        run["paired"] = "true"
    if args.config:
        return load_config(args.config, args.experiment, overrides)
    return parse_config("", args.experiment, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg["run"]["out"])
    marker = out / FAILED_MARKER
    try:
        out.mkdir(parents=True, exist_ok=True)
        if marker.exists():
            marker.unlink()
        result = run_experiment(cfg)
        _write_result(result, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure gets the marker
        msg = f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}"
        try:
            write_atomic(marker, msg)
        except OSError:
            pass
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {cfg.experiment} outputs to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
