"""Base / Novel / HM result tables as aligned text and JSON."""

from __future__ import annotations

import json
from pathlib import Path

from .evaluator import EvalReport, average_hm

HEADER = ("Dataset", "Base", "Novel", "HM")


def format_table(reports) -> str:
    rows = [HEADER] + [(r.dataset or "-", f"{r.base_acc:.2f}", f"{r.novel_acc:.2f}", f"{r.hm:.2f}")
                       for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(HEADER))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in rows]
    return "\n".join(lines) + "\n"


def emit_results_table(reports, out_path) -> tuple[Path, Path]:
    """Write ``<out>.txt`` (aligned) and ``<out>.json`` (reports plus both average-HM readings)."""
    reports = list(reports)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    txt, js = out.with_suffix(".txt"), out.with_suffix(".json")
    txt.write_text(format_table(reports), encoding="utf-8")
    js.write_text(json.dumps({"reports": [r.to_dict() for r in reports], "average": average_hm(reports)},
                             indent=2, sort_keys=True), encoding="utf-8")
    return txt, js


def load_results(path) -> list[EvalReport]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [EvalReport.from_dict(d) for d in data["reports"]]
