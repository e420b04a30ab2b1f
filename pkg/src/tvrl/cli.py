"""Command-line interface: synthetic data, pretraining, probing, benchmarking and trajectories.

Every command writes ``resolved_config.yaml`` into its output directory before
doing any work and a ``MANIFEST`` (relative path + sha256 per file) after all
artifacts are written. Re-running a command with ``--config`` pointing at a
resolved snapshot replays it.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config.

Seeds: ``--seed`` is the only source of randomness. Probe seeds are derived as
``derive_seed(seed, PROBE, i)``; pretraining derives per-epoch and per-step
streams from the same seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional

import yaml

from .checkpoint import load_checkpoint, read_manifest
from .data.records import DatasetManifest
from .data.synthetic import (
    CardiacConfig,
    LongitudinalConfig,
    generate_cardiac_synthetic,
    generate_longitudinal_synthetic,
)
from .errors import CheckpointMismatchError, ConfigError
from .evaluation.benchmark import run_benchmark
from .evaluation.probe import ProbeConfig, probe_seeds
from .evaluation.trajectory import closure_ratio, export_trajectory
from .seeding import PROBE, derive_seed
from .training import PretrainConfig, pretrain, resolve_policy

log = logging.getLogger("tvrl")

OUTPUT_ROOT_ENV = "TVRL_OUTPUT_ROOT"
SNAPSHOT = "resolved_config.yaml"
EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def parse_overrides(items) -> dict:
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_dotted(out, key.strip(), yaml.safe_load(raw))
    return out


def deep_merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_snapshot(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / SNAPSHOT).write_text(yaml.safe_dump(_jsonable(resolved), sort_keys=True))


def write_manifest(out_dir: Path) -> Path:
    lines = []
    for path in sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != "MANIFEST"):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{digest}  {path.relative_to(out_dir).as_posix()}")
    target = out_dir / "MANIFEST"
    target.write_text("\n".join(lines) + "\n")
    return target


def output_dir(arg: Optional[str], command: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def _require(value, name: str):
    if value is None:
        raise ConfigError(f"{name} must be given on the command line or in the config")
    return value


# --- commands -------------------------------------------------------------------


def cmd_generate(args, cfg: dict) -> Path:
    section = cfg.get("data", {})
    kind = _require(args.kind or section.get("kind"), "--kind")
    n = int(_require(args.n if args.n is not None else section.get("n"), "--n"))
    seed = int(args.seed if args.seed is not None else section.get("seed", 0))
    params = dict(section.get("generator", {}))
    if args.image_size is not None:
        params["image_size"] = args.image_size
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
    try:
        gen_cfg = {"cardiac": CardiacConfig, "longitudinal": LongitudinalConfig}[kind](**params)
    except KeyError:
        raise ConfigError(f"unknown data kind {kind!r}") from None
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    out = output_dir(args.out, "generate-data")
    write_snapshot(out, {"command": "generate-data",
                         "data": {"kind": kind, "n": n, "seed": seed, "generator": gen_cfg.to_dict()}})
    gen = generate_cardiac_synthetic if kind == "cardiac" else generate_longitudinal_synthetic
    gen(n, gen_cfg, seed=seed).write(out)
    return out


def cmd_pretrain(args, cfg: dict) -> Path:
    section = dict(cfg.get("pretrain", {}))
    if args.strategy:
        section["strategy"] = args.strategy
    if args.seed is not None:
        section["seed"] = args.seed
    if args.epochs is not None:
        section["epochs"] = args.epochs
    pcfg = PretrainConfig.from_dict(section)
    data = _require(args.data or cfg.get("paths", {}).get("data"), "--data")
    manifest = DatasetManifest.read(data)
    out = output_dir(args.out, "pretrain")
    write_snapshot(out, {"command": "pretrain", "paths": {"data": str(data)}, "pretrain": pcfg.to_dict()})
    resolve_policy(pcfg, manifest)
    pretrain(pcfg, manifest, out, extra_manifest={"data_dir": str(Path(data).resolve())})
    return out


def _probe_config(args, cfg: dict, n_seeds: int) -> ProbeConfig:
    section = dict(cfg.get("probe", {}))
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    if args.task:
        section["task"] = args.task
    if getattr(args, "fraction", None) is not None:
        section["fraction"] = args.fraction
    if args.epochs is not None:
        section["epochs"] = args.epochs
    if "seeds" not in section or args.seeds is not None:
        section["seeds"] = [derive_seed(seed, PROBE, i) for i in range(n_seeds)]
    section["seeds"] = tuple(section["seeds"])
    section.setdefault("task", "")
    try:
        return ProbeConfig(**section)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _data_for_checkpoint(args, cfg: dict, ckpt: Path) -> str:
    data = args.data or cfg.get("paths", {}).get("data") or read_manifest(ckpt).get("data_dir")
    return _require(data, "--data")


def cmd_probe(args, cfg: dict) -> Path:
    ckpt = Path(_require(args.checkpoint or cfg.get("paths", {}).get("checkpoint"), "--checkpoint"))
    pcfg = _probe_config(args, cfg, args.seeds or 5)
    if not pcfg.task:
        raise ConfigError("--task is required")
    data = _data_for_checkpoint(args, cfg, ckpt)
    manifest = DatasetManifest.read(data)
    manifest.task(pcfg.task)
    model, _ = load_checkpoint(ckpt)
    out = output_dir(args.out, "probe")
    write_snapshot(out, {"command": "probe", "paths": {"checkpoint": str(ckpt), "data": str(data)},
                         "probe": pcfg.to_dict()})
    results, summary = probe_seeds(model, manifest, pcfg)
    report = {"per_seed": [r.summary() for r in results], "summary": summary}
    (out / "probe_report.json").write_text(json.dumps(report, indent=2) + "\n")
    std = "n/a" if summary["std"] is None else f"{summary['std']:.4f}"
    print(f"{pcfg.task} ({summary['metric']}, fraction {pcfg.fraction:g}): {summary['mean']:.4f}±{std}")
    return out


def cmd_evaluate(args, cfg: dict) -> Path:
    section = cfg.get("evaluate", {})
    pairs = args.checkpoint or [f"{k}={v}" for k, v in section.get("checkpoints", {}).items()]
    if not pairs:
        raise ConfigError("at least one --checkpoint name=path is required")
    checkpoints = {}
    for item in pairs:
        name, _, path = item.partition("=")
        if not path:
            name, path = Path(item).parent.name or item, item
        checkpoints[name] = Path(path)
    tasks = args.tasks or section.get("tasks")
    fractions = args.fractions or section.get("fractions", [0.01, 1.0])
    base = _probe_config(args, cfg, args.seeds or 5)
    data = _data_for_checkpoint(args, cfg, next(iter(checkpoints.values())))
    manifest = DatasetManifest.read(data)
    tasks = tasks or [t.name for t in manifest.tasks]
    for t in tasks:
        manifest.task(t)
    out = output_dir(args.out, "evaluate")
    write_snapshot(out, {"command": "evaluate", "paths": {"data": str(data)},
                         "evaluate": {"checkpoints": {k: str(v) for k, v in checkpoints.items()},
                                      "tasks": list(tasks), "fractions": list(fractions)},
                         "probe": base.to_dict()})
    report = run_benchmark(checkpoints, manifest, tasks, fractions, base)
    report.write(out)
    print(report.table())
    return out


def cmd_viz(args, cfg: dict) -> Path:
    ckpt = Path(_require(args.checkpoint or cfg.get("paths", {}).get("checkpoint"), "--checkpoint"))
    data = _data_for_checkpoint(args, cfg, ckpt)
    manifest = DatasetManifest.read(data)
    model, meta = load_checkpoint(ckpt)
    ids = args.sequence_id or [r.sequence_id for r in manifest.split("test")[:4]]
    out = output_dir(args.out, "viz-trajectory")
    write_snapshot(out, {"command": "viz-trajectory", "paths": {"checkpoint": str(ckpt), "data": str(data)},
                         "sequence_ids": list(ids)})
    policy = meta.get("policy") or resolve_policy(PretrainConfig(), manifest)
    summary = []
    for sid in ids:
        try:
            record = manifest.record(sid)
        except KeyError:
            raise ConfigError(f"sequence {sid!r} not in dataset") from None
        traj = export_trajectory(model, record, policy, out)
        summary.append({"sequence_id": sid, "explained_ratio": traj.explained_ratio,
                        "closure_ratio": closure_ratio(traj), "degenerate": traj.degenerate})
        print(f"{sid}: top-2 variance share {traj.explained_ratio:.3f}, closure {closure_ratio(traj):.2f}")
    (out / "trajectories.json").write_text(json.dumps(summary, indent=2) + "\n")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvrl", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML config file (or a resolved_config.yaml snapshot)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key; wins over the file")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--kind", choices=["cardiac", "longitudinal"])
    p.add_argument("--n", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pretrain an encoder")
    common(p)
    p.add_argument("--strategy", choices=["csimclr", "csimclr-te", "tvrl", "multiclip"])
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe a checkpoint over several seeds")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--task")
    p.add_argument("--fraction", type=float)
    p.add_argument("--seeds", type=int, help="number of probe seeds (default 5)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("evaluate", help="benchmark several checkpoints")
    common(p)
    p.add_argument("--checkpoint", action="append", metavar="NAME=PATH")
    p.add_argument("--data")
    p.add_argument("--tasks", nargs="+")
    p.add_argument("--fractions", nargs="+", type=float)
    p.add_argument("--seeds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--task", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("viz-trajectory", help="export PCA trajectories of temporal tokens")
    common(p, seed=False)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--sequence-id", action="append")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = deep_merge(load_config(args.config), parse_overrides(args.overrides))
        out = args.func(args, cfg)
        write_manifest(out)
    except (ConfigError, CheckpointMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - categorised exit status
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
