"""Experiment runner: config ingestion, presets, trace and snapshot files.

Exit status: 0 on success, 2 for config errors, 3 for runtime divergence,
4 for I/O failures. Failures print a single ``error: <category>: <message>``
line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import METHODS, DivergenceError, InvalidArgumentError, MWGradError, RunConfig, substream
from .objectives import (
    EnergyObjective,
    GaussianMixture,
    SampleObjective,
    draw_target_samples,
    sample_targets_from_paper,
)
from .optimizer import RunResult, run

log = logging.getLogger("mwgrad")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

PAPER_OBJECTIVES = "paper-4-targets"

PRESETS = {
    "paper-energy": {
        "method": "mwgrad-svgd",
        "objectives": {"preset": PAPER_OBJECTIVES, "kind": "energy"},
    },
    "paper-samples-kl": {
        "method": "mwgrad-nn",
        "objectives": {"preset": PAPER_OBJECTIVES, "kind": "samples", "divergence": "kl", "num_samples": 30},
    },
    "paper-samples-js": {
        "method": "mwgrad-nn",
        "objectives": {"preset": PAPER_OBJECTIVES, "kind": "samples", "divergence": "js", "num_samples": 30},
    },
}

_RUN_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_META_ONLY = {"version"}


class ConfigError(MWGradError):
    pass


@dataclass
class ExperimentConfig:
    run: RunConfig
    objectives: dict
    out_dir: str = "out"
    base_dir: Path = Path(".")

    def to_dict(self) -> dict:
        out = self.run.to_dict()
        objectives = json.loads(json.dumps(self.objectives))
        # absolute sample paths keep the resolved config loadable from any directory
        for entry in objectives.get("sample_files", []):
            entry["path"] = str((self.base_dir / entry["path"]).resolve())
        out["objectives"] = objectives
        out["out_dir"] = self.out_dir
        return out


def _validate_objectives(spec) -> dict:
    if not isinstance(spec, dict):
        raise ConfigError("'objectives' must be an object")
    sources = [key for key in ("mixtures", "preset", "sample_files") if key in spec]
    if len(sources) != 1:
        raise ConfigError(f"objectives need exactly one of mixtures / preset / sample_files, got {sources}")
    source = sources[0]
    if source == "preset":
        if spec["preset"] != PAPER_OBJECTIVES:
            raise ConfigError(f"unknown objective preset {spec['preset']!r}")
        kind = spec.get("kind", "energy")
        if kind not in ("energy", "samples"):
            raise ConfigError(f"objective preset kind must be 'energy' or 'samples', got {kind!r}")
        if kind == "samples":
            if spec.get("divergence", "kl") not in ("kl", "js"):
                raise ConfigError(f"unknown divergence {spec.get('divergence')!r}")
            n = spec.get("num_samples", 30)
            if not isinstance(n, int) or n < 2:
                raise ConfigError(f"num_samples must be an integer >= 2, got {n!r}")
    elif source == "mixtures":
        if not isinstance(spec["mixtures"], list) or not spec["mixtures"]:
            raise ConfigError("'mixtures' must be a non-empty list")
    else:
        files = spec["sample_files"]
        if not isinstance(files, list) or not files:
            raise ConfigError("'sample_files' must be a non-empty list")
        for entry in files:
            if not isinstance(entry, dict) or "path" not in entry:
                raise ConfigError("every sample file entry needs a 'path'")
            if entry.get("divergence", "kl") not in ("kl", "js"):
                raise ConfigError(f"unknown divergence {entry.get('divergence')!r}")
    return spec


def build_objectives(spec: dict, seed: int, base_dir: Path = Path(".")) -> list:
    """Instantiate objectives from a validated objective spec."""
    if "preset" in spec:
        targets = sample_targets_from_paper()
        if spec.get("kind", "energy") == "energy":
            return [EnergyObjective(gm) for gm in targets]
        n = spec.get("num_samples", 30)
        div = spec.get("divergence", "kl")
        return [
            SampleObjective(draw_target_samples(gm, n, substream(seed, "target-samples", k)), div)
            for k, gm in enumerate(targets)
        ]
    if "mixtures" in spec:
        return [EnergyObjective(GaussianMixture.from_dict(m)) for m in spec["mixtures"]]
    objectives = []
    for entry in spec["sample_files"]:
        path = Path(entry["path"])
        if not path.is_absolute():
            path = base_dir / path
        samples = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        objectives.append(SampleObjective(samples, entry.get("divergence", "kl")))
    return objectives


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` overrides; dotted keys reach into nested objects."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        target = out
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot set {key!r}: {part!r} is not an object")
        target[parts[-1]] = _parse_value(value)
    return out


def parse_config(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a raw config mapping; nothing is computed or written here."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _RUN_FIELDS - {"objectives", "out_dir"} - _META_ONLY
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "objectives" not in raw:
        raise ConfigError("config needs an 'objectives' entry")
    objectives = _validate_objectives(raw["objectives"])
    run_fields = {k: v for k, v in raw.items() if k in _RUN_FIELDS}
    try:
        probe = build_objectives(objectives, int(run_fields.get("seed", 0)), base_dir)
    except KeyError as exc:
        raise ConfigError(f"cannot build objectives: missing key {exc}") from exc
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot build objectives: {exc}") from exc
    run_fields.setdefault("num_objectives", len(probe))
    run_fields.setdefault("dim", probe[0].dim)
    if run_fields["num_objectives"] != len(probe):
        raise ConfigError(f"num_objectives={run_fields['num_objectives']} but {len(probe)} objectives given")
    try:
        config = RunConfig(**run_fields)
    except (InvalidArgumentError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if config.method != "mwgrad-nn" and not all(isinstance(o, EnergyObjective) for o in probe):
        raise ConfigError(f"method {config.method} needs energy objectives; use mwgrad-nn for sample targets")
    return ExperimentConfig(config, objectives, str(raw.get("out_dir", "out")), base_dir)


def load_config(config_path: Optional[str], preset: Optional[str], overrides: Sequence[str] = ()) -> ExperimentConfig:
    if (config_path is None) == (preset is None):
        raise ConfigError("give exactly one of --config or --preset")
    base_dir = Path(".")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw = json.loads(json.dumps(PRESETS[preset]))
    else:
        path = Path(config_path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base_dir = path.parent
    return parse_config(apply_overrides(raw, overrides), base_dir)


def version_string() -> str:
    """``git describe``-style version, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_particles(path: Path, x: np.ndarray) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(x.shape[1])])
        for row in x:
            writer.writerow([repr(float(v)) for v in row])


def run_experiment(exp: ExperimentConfig, out_dir: Optional[Path] = None) -> RunResult:
    """Run one experiment and write ``trace.jsonl``, ``particles_<iter>.csv`` and ``meta.json``."""
    out_dir = Path(out_dir if out_dir is not None else exp.out_dir)
    objectives = build_objectives(exp.objectives, exp.run.seed, exp.base_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = exp.to_dict()
    meta["out_dir"] = str(out_dir)
    meta["version"] = version_string()
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    with (out_dir / "trace.jsonl").open("w") as trace_fh:
        def on_step(state, record):
            trace_fh.write(json.dumps(record.to_dict()) + "\n")

        result = run(exp.run, objectives, on_step=on_step)
    for it, x in sorted(result.snapshots.items()):
        _write_particles(out_dir / f"particles_{it}.csv", x)
    return result


def mean_dist_to_origin(x: np.ndarray) -> float:
    return float(np.linalg.norm(x, axis=1).mean())


SUMMARY_COLUMNS = ["method", "status", "final_mean_dist_to_origin", "final_stationarity", "wallclock_seconds"]


def compare_methods(exp: ExperimentConfig, methods: Sequence[str], out_dir: Optional[Path] = None) -> list:
    """Run every method under the same seed; writes ``summary.csv`` and one subdirectory per method."""
    out_dir = Path(out_dir if out_dir is not None else exp.out_dir)
    for method in methods:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    rows = []
    for method in methods:
        start = time.perf_counter()
        try:
            sub = parse_config({**exp.to_dict(), "method": method}, exp.base_dir)
            result = run_experiment(sub, out_dir / method)
            rows.append({
                "method": method,
                "status": "ok",
                "final_mean_dist_to_origin": mean_dist_to_origin(result.final.particles.data),
                "final_stationarity": result.trace[-1].stationarity,
                "wallclock_seconds": time.perf_counter() - start,
            })
        except MWGradError as exc:
            log.warning("method %s failed: %s", method, exc)
            rows.append({"method": method, "status": f"failed: {exc}",
                         "final_mean_dist_to_origin": "", "final_stationarity": "",
                         "wallclock_seconds": time.perf_counter() - start})
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return rows


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (meta.json files work too)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="built-in experiment preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--snapshot-every", type=int)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; values are parsed as JSON when possible")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mwgrad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)
    p_run.add_argument("--method", choices=METHODS)
    p_cmp = sub.add_parser("compare", help="run several methods under one seed")
    _add_common(p_cmp)
    p_cmp.add_argument("--methods", default=",".join(METHODS),
                       help="comma-separated method list (default: all)")
    return parser


def _fail(category: str, message: str, code: int) -> int:
    print(f"error: {category}: {message}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    for flag, key in (("seed", "seed"), ("snapshot_every", "snapshot_every"), ("out_dir", "out_dir")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    if getattr(args, "method", None) is not None:
        overrides.append(f"method={json.dumps(args.method)}")
    try:
        exp = load_config(args.config, args.preset, overrides)
        if args.command == "run":
            run_experiment(exp)
        else:
            compare_methods(exp, [m.strip() for m in args.methods.split(",") if m.strip()])
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except DivergenceError as exc:
        return _fail("divergence", str(exc), EXIT_DIVERGED)
    except MWGradError as exc:
        return _fail("runtime", str(exc), EXIT_DIVERGED)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_IO)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
