"""Published-style result tables and CPU-vs-accelerator comparisons from run records."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

from .bench import RunKey, RunRecord, format_duration, speedup

COLUMNS = ("Models", "Accuracy", "precision", "Recall", "F1 Score", "Execution Time")
ROW_ORDER = ("vgg16", "resnet50", "densenet121", "inceptionv3", "xception", "mobilenet", "xgb-vgg16", "stacked")
DISPLAY_NAMES = {
    "vgg16": "VGG16",
    "resnet50": "Resnet50",
    "densenet121": "Densenet",
    "inceptionv3": "Inceptionv3",
    "xception": "Xception",
    "mobilenet": "Mobilenet",
    "xgb-vgg16": "XGBOOST-VGG16",
    "stacked": "Proposed Model",
}
MISSING = "—"
FORMATS = ("markdown", "csv", "json")


class ReportError(Exception):
    pass


class MixedRunKeys(ReportError):
    pass


class DuplicateModel(ReportError):
    pass


class NoComparablePairs(ReportError):
    def __init__(self, text: str):
        super().__init__("no model has records under both D_i and D_i'")
        self.text = text


@dataclass(frozen=True)
class TableSpec:
    run_key: RunKey
    format: str = "markdown"
    columns: tuple[str, ...] = COLUMNS
    row_order: tuple[str, ...] = ROW_ORDER

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")


def caption(run_key: RunKey, records: Sequence[RunRecord] = ()) -> str:
    state = "With" if run_key.accelerator_enabled else "Without"
    text = f"{run_key.render()}: {state} GPU support for Device{run_key.device_index}"
    if records:
        dev = records[0].device
        text += f" (cpu: {dev.cpu_model}; gpu: {dev.gpu_model or 'none'})"
    return text


def _cells(rec: RunRecord | None) -> list[str]:
    if rec is None:
        return [MISSING] * 5
    if rec.metrics is None or rec.status != "ok":
        metrics = [MISSING] * 4
    else:
        m = rec.metrics
        metrics = [f"{v:.2f}" for v in (m.accuracy, m.precision, m.recall, m.f1)]
    time_cell = format_duration(rec.timing.wall_seconds)
    if rec.status != "ok":
        time_cell += f" ({rec.status})"
    return [*metrics, time_cell]


def _by_model(records: Sequence[RunRecord], spec: TableSpec) -> dict[str, RunRecord]:
    found: dict[str, RunRecord] = {}
    for rec in records:
        if rec.run_key != spec.run_key:
            raise MixedRunKeys(f"record {rec.run_id} is {rec.run_key}, table is {spec.run_key}")
        if rec.model_name in found:
            raise DuplicateModel(
                f"two records for {rec.model_name} under {spec.run_key} "
                f"({found[rec.model_name].run_id}, {rec.run_id}); select one explicitly"
            )
        found[rec.model_name] = rec
    return found


def table_rows(records: Sequence[RunRecord], spec: TableSpec) -> list[list[str]]:
    found = _by_model(records, spec)
    return [[DISPLAY_NAMES[name], *_cells(found.get(name))] for name in spec.row_order]


def render_table(records: Sequence[RunRecord], spec: TableSpec) -> str:
    """One row per model in the published row order; missing models render as placeholders.

    Markdown carries a caption line, CSV is a bare 6-column table and JSON keeps
    full-precision metrics next to the rendered cells.
    """
    records = list(records)
    found = _by_model(records, spec)
    rows = [[DISPLAY_NAMES[name], *_cells(found.get(name))] for name in spec.row_order] if records else []
    cap = caption(spec.run_key, records)
    if spec.format == "markdown":
        lines = [cap, "", "| " + " | ".join(spec.columns) + " |", "|" + "---|" * len(spec.columns)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    if spec.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(spec.columns)
        writer.writerows(rows)
        return buf.getvalue()
    payload = {"caption": cap, "run_key": spec.run_key.render(), "columns": list(spec.columns), "rows": []}
    for row in rows:
        name = next(k for k, v in DISPLAY_NAMES.items() if v == row[0])
        rec = found.get(name)
        payload["rows"].append({
            "cells": dict(zip(spec.columns, row)),
            "model_name": name,
            "run_id": rec.run_id if rec else None,
            "metrics": rec.metrics.to_dict() if rec and rec.metrics else None,
            "wall_seconds": rec.timing.wall_seconds if rec else None,
        })
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _latest(records: Sequence[RunRecord]) -> dict[tuple[str, RunKey], RunRecord]:
    cells: dict[tuple[str, RunKey], RunRecord] = {}
    for rec in records:
        if rec.status != "ok":
            continue
        key = (rec.model_name, rec.run_key)
        if key not in cells or rec.created_at >= cells[key].created_at:
            cells[key] = rec
    return cells


def time_delta_text(cpu_seconds: float, acc_seconds: float) -> str:
    diff = cpu_seconds - acc_seconds
    if diff == 0:
        return "Δ = 0min 0s"
    return f"Δ = {format_duration(abs(diff))} {'less' if diff > 0 else 'more'}"


def render_comparison(records: Sequence[RunRecord]) -> str:
    """Pair each model's D_i' (CPU) and D_i (accelerated) runs per device.

    The latest successful record per (model, run key) is used. Raises
    :class:`NoComparablePairs` (carrying the rendered unpaired listing) when
    nothing pairs up.
    """
    cells = _latest(records)
    devices = sorted({key.device_index for _, key in cells})
    lines, unpaired = [], []
    faster = pairs = 0
    for dev in devices:
        cpu_key, acc_key = RunKey(dev, False), RunKey(dev, True)
        block = []
        for name in ROW_ORDER:
            cpu, acc = cells.get((name, cpu_key)), cells.get((name, acc_key))
            if cpu is None and acc is None:
                continue
            if cpu is None or acc is None:
                present = cpu or acc
                unpaired.append(f"- {DISPLAY_NAMES[name]} only under {present.run_key.render()}")
                continue
            pairs += 1
            ratio = speedup(cpu.timing, acc.timing)
            faster += acc.timing.wall_seconds < cpu.timing.wall_seconds
            d_acc = ""
            if cpu.metrics is not None and acc.metrics is not None:
                d_acc = f", Δaccuracy = {acc.metrics.accuracy - cpu.metrics.accuracy:+.2f}"
            block.append(
                f"| {DISPLAY_NAMES[name]} | {format_duration(cpu.timing.wall_seconds)} | "
                f"{format_duration(acc.timing.wall_seconds)} | "
                f"{time_delta_text(cpu.timing.wall_seconds, acc.timing.wall_seconds)}, {ratio:.2f}×{d_acc} |"
            )
        if block:
            lines += [
                f"Device{dev}: {cpu_key.render()} vs {acc_key.render()}",
                "",
                f"| Models | {cpu_key.render()} | {acc_key.render()} | Comparison |",
                "|---|---|---|---|",
                *block,
                "",
            ]
    lines.append(f"Accelerated run faster for {faster} of {pairs} paired models.")
    if unpaired:
        lines += ["", "unpaired:", *unpaired]
    text = "\n".join(lines) + "\n"
    if pairs == 0:
        raise NoComparablePairs(text)
    return text
