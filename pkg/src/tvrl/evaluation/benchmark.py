"""Multi-strategy, multi-seed probing benchmark and its report formats."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..checkpoint import load_checkpoint
from ..data.records import DatasetManifest
from .probe import ProbeConfig, probe_seeds


@dataclass
class BenchmarkReport:
    entries: list[dict] = field(default_factory=list)  # one per (strategy, task, fraction, seed)

    def cells(self) -> list[dict]:
        keys = sorted({(e["strategy"], e["task"], e["fraction"]) for e in self.entries}, key=str)
        out = []
        for strategy, task, fraction in keys:
            rows = [e for e in self.entries
                    if (e["strategy"], e["task"], e["fraction"]) == (strategy, task, fraction)]
            vals = np.array([e["value"] for e in sorted(rows, key=lambda e: e["seed"])])
            out.append({
                "strategy": strategy,
                "task": task,
                "fraction": fraction,
                "metric": rows[0]["metric"],
                "mean": float(vals.mean()),
                "std": float(vals.std(ddof=1)) if len(vals) >= 2 else None,
                "n_seeds": len(vals),
            })
        return out

    def to_json(self) -> dict:
        return {"entries": self.entries, "summary": self.cells()}

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, tpath = out_dir / "report.json", out_dir / "report.txt"
        jpath.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        tpath.write_text(self.table() + "\n")
        return jpath, tpath

    def table(self) -> str:
        cells = self.cells()
        strategies = list(dict.fromkeys(c["strategy"] for c in cells))
        columns = list(dict.fromkeys((c["task"], c["fraction"], c["metric"]) for c in cells))
        lookup = {(c["strategy"], c["task"], c["fraction"]): c for c in cells}
        header = ["strategy"] + [f"{t} {f * 100:g}% ({m.upper()})" for t, f, m in columns]
        rows = [header]
        for s in strategies:
            row = [s]
            for t, f, m in columns:
                c = lookup.get((s, t, f))
                if c is None:
                    row.append("-")
                else:
                    std = "n/a" if c["std"] is None else f"{c['std']:.2f}"
                    row.append(f"{c['mean']:.2f}±{std}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def run_benchmark(
    checkpoints: Mapping[str, object],
    manifest: DatasetManifest,
    tasks: Sequence[str],
    fractions: Sequence[float],
    base: ProbeConfig,
) -> BenchmarkReport:
    """Probe every (strategy, task, fraction) over ``base.seeds``.

    ``checkpoints`` maps strategy name to a checkpoint path or loaded model.
    Entries are ordered by (strategy, task, fraction, seed).
    """
    report = BenchmarkReport()
    for strategy in checkpoints:
        for task in tasks:
            for fraction in fractions:
                model = checkpoints[strategy]
                if isinstance(model, (str, Path)):
                    model, _ = load_checkpoint(model)
                cfg = replace(base, task=task, fraction=fraction)
                results, _ = probe_seeds(model, manifest, cfg)
                for r in results:
                    report.entries.append({
                        "strategy": strategy,
                        "task": task,
                        "fraction": fraction,
                        "seed": r.seed,
                        "metric": r.metric_name,
                        "value": r.test_metric,
                        "best_epoch": r.best_epoch,
                    })
    return report
