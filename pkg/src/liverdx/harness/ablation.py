"""Train and evaluate a grid of ablation flag settings under one shared seed."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from liverdx.harness.config import AblationFlags, RunConfig
from liverdx.harness.evaluate import run_eval
from liverdx.harness.train import run_train
from liverdx.labels import CLASS_NAMES


def expand_grid(grid):
    """Accept a list of flag dicts, or a dict of flag -> list of values (cartesian product)."""
    if isinstance(grid, dict):
        keys = list(grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    return [dict(g) for g in grid]


def row_name(flags: dict):
    if not flags:
        return "default"
    return ",".join(f"{k}={v}" for k, v in flags.items())


@dataclass
class AblationTable:
    rows: list = field(default_factory=list)  # (name, {class: auc or None}, mean or None)

    def add(self, name, per_class):
        vals = [v for v in per_class.values() if v is not None]
        self.rows.append((name, dict(per_class), float(np.mean(vals)) if vals else None))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Method", *CLASS_NAMES, "Mean"])
        for name, per_class, mean in self.rows:
            w.writerow([name, *("" if per_class.get(c) is None else repr(per_class[c]) for c in CLASS_NAMES),
                        "" if mean is None else repr(mean)])
        return buf.getvalue()

    def to_text(self):
        width = max([len("Method")] + [len(r[0]) for r in self.rows])
        cols = [*CLASS_NAMES, "Mean"]
        lines = [f"{'Method':<{width}} | " + " | ".join(f"{c:>6}" for c in cols)]
        lines.append("-" * len(lines[0]))
        for name, per_class, mean in self.rows:
            cells = [per_class.get(c) for c in CLASS_NAMES] + [mean]
            lines.append(f"{name:<{width}} | " + " | ".join("   n/a" if v is None else f"{v:6.3f}" for v in cells))
        return "\n".join(lines) + "\n"


def run_ablation(config: RunConfig, grid, split=None, out_dir=None) -> AblationTable:
    table = AblationTable()
    base_dir = Path(out_dir) if out_dir else config.run_path()
    split = split or config.eval_split
    for i, flags in enumerate(expand_grid(grid)):
        unknown = set(flags) - set(AblationFlags.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown ablation flags {sorted(unknown)}")
        cfg = replace(config.with_flags(**flags), run_dir=str(base_dir / f"row_{i:02d}"))
        trained = run_train(cfg)
        result = run_eval(trained.checkpoint, split, cfg, name=row_name(flags))
        table.add(row_name(flags), result.report.per_class_auc)
    base_dir.mkdir(parents=True, exist_ok=True)
    (base_dir / "ablation.csv").write_text(table.to_csv())
    (base_dir / "ablation.txt").write_text(table.to_text())
    return table
