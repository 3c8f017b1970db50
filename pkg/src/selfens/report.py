"""Report files: summary.json, curves.csv, filter.csv (atomic, idempotent)."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path

from selfens.experiment import SCHEMA_VERSION, RunReport

CURVE_COLUMNS = ("epoch", "iteration", "train_loss", "student_val_acc", "teacher_val_acc",
                 "test_acc")
FILTER_COLUMNS = ("iteration", "active_count", "precision", "recall", "best_val_acc",
                  "epochs_run", "filtered_active_count", "filtered_precision",
                  "filtered_recall")
VOLATILE_KEYS = ("wall_time",)


class ReportError(OSError):
    pass


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def curves_csv(report: RunReport) -> str:
    return _csv(CURVE_COLUMNS, report.curves)


def filter_csv(report: RunReport) -> str:
    rows = []
    for it in report.iterations:
        rows.append({"iteration": it["iteration"], "active_count": it["active_count_before"],
                     "precision": it["train_precision"], "recall": it["train_recall"],
                     "best_val_acc": it["best_val_acc"], "epochs_run": it["epochs_run"],
                     "filtered_active_count": it["active_count_after"],
                     "filtered_precision": it["filter_precision"],
                     "filtered_recall": it["filter_recall"]})
    return _csv(FILTER_COLUMNS, rows)


def summary_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=1, allow_nan=True) + "\n"


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise ReportError(f"{path}: {exc.strerror or exc}") from exc


def emit_report(report: RunReport, out_dir) -> dict[str, Path]:
    """Write the three report files into ``out_dir``; returns their paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"{out}: {exc.strerror or exc}") from exc
    files = {"summary.json": summary_json(report), "curves.csv": curves_csv(report),
             "filter.csv": filter_csv(report)}
    paths = {}
    for name, text in files.items():
        _write_atomic(out / name, text)
        paths[name] = out / name
    return paths


def load_summary(in_dir) -> dict:
    path = Path(in_dir) / "summary.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ReportError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: not valid JSON ({exc})") from exc
    major = str(data.get("schema_version", "0")).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise ReportError(f"{path}: schema {data.get('schema_version')!r} not supported")
    return data


def stable_summary(data: dict) -> dict:
    """Summary without run-to-run volatile fields (for determinism checks)."""
    return {k: v for k, v in data.items() if k not in VOLATILE_KEYS}


def describe(data: dict) -> str:
    """Human-readable digest of a loaded summary."""
    lines = [f"variant {data['variant']}  status {data['status']}  "
             f"schema {data['schema_version']}"]
    if data.get("error"):
        lines.append(f"error: {data['error']}")
    lines.append(f"train noise fraction {data['noisy_fraction']:.3f}")
    lines.append("iter  active  precision  recall  best_val  epochs")
    for it in data["iterations"]:
        lines.append(f"{it['iteration']:>4}  {it['active_count_before']:>6}  "
                     f"{it['train_precision']:>9.4f}  {it['train_recall']:>6.4f}  "
                     f"{it['best_val_acc']:>8.4f}  {it['epochs_run']:>6}")
    if data["final_test_acc"] is not None:
        lines.append(f"best iteration {data['best_iteration']}  "
                     f"test acc {data['final_test_acc']:.4f}  "
                     f"final precision {data['final_precision']:.4f}  "
                     f"recall {data['final_recall']:.4f}")
    curves = data["curves"]
    if curves:
        ahead = sum(c["teacher_val_acc"] >= c["student_val_acc"] for c in curves)
        lines.append(f"teacher >= student on {ahead}/{len(curves)} epochs")
    lines.append(f"counters {json.dumps(data['counters'], sort_keys=True)}  "
                 f"wall {data['wall_time']:.1f}s")
    return "\n".join(lines)
