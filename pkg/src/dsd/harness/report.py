"""Canonical JSON and run reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import FormatError


def _canon(obj: Any) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise FormatError(f"non-finite number {x!r} cannot be written as JSON")
        text = format(x, ".17g")
        # Keep floats recognisable as floats on reload.
        if all(c not in text for c in ".eE"):
            text += ".0"
        return text
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ",".join(f"{json.dumps(k, ensure_ascii=False)}:{_canon(v)}" for k, v in items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_canon(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist())
    raise FormatError(f"cannot serialise {type(obj).__name__} to canonical JSON")


def canonical_json(obj: Any) -> str:
    """Sorted keys, no whitespace, floats with 17 significant digits."""
    return _canon(obj)


@dataclass
class RunReport:
    command: str
    config: dict
    seed: int | None = None
    metrics: dict = field(default_factory=dict)
    ablations: dict[str, list[dict]] = field(default_factory=dict)
    loss_traces: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "metrics": self.metrics,
            "ablations": self.ablations,
            "loss_traces": self.loss_traces,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict()) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    def to_text(self) -> str:
        lines = [f"{self.command} (seed {self.seed})"]
        if self.metrics:
            lines.append(format_table(_metric_rows(self.metrics), ["metric", "value"]))
        for axis, rows in sorted(self.ablations.items()):
            lines.append(f"ablation: {axis}")
            cols = list(rows[0].keys()) if rows else []
            lines.append(format_table(rows, cols))
        for name, trace in sorted(self.loss_traces.items()):
            if trace:
                lines.append(f"{name}: {len(trace)} steps, first {trace[0]:.4f}, last {trace[-1]:.4f}")
        return "\n".join(lines) + "\n"


def _metric_rows(metrics: dict, prefix: str = "") -> list[dict]:
    rows = []
    for k, v in sorted(metrics.items()):
        if isinstance(v, dict):
            rows.extend(_metric_rows(v, f"{prefix}{k}."))
        else:
            rows.append({"metric": prefix + k, "value": v})
    return rows


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Plain-text table: text left-aligned, numbers right-aligned."""
    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    numeric = [all(isinstance(r.get(c), (int, float)) for r in rows) and rows for c in columns]

    def fmt(row):
        return "  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(row, widths, numeric)).rstrip()

    out = [fmt(columns), "  ".join("-" * w for w in widths)]
    out.extend(fmt(r) for r in cells)
    return "\n".join(out)
