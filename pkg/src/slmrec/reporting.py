"""run.json records and the consolidated report tables.

Every training/evaluation command drops a run.json in its output directory
with enough information (config hash, seed, timings, parameter counts) to
re-execute the run and to build the efficiency comparison. The report
command stitches those records into two CSVs and appends a
student/teacher ratio row when both roles are present.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

log = logging.getLogger(__name__)

METRIC_KEYS = ("HR@1", "HR@5", "HR@10", "NDCG@5", "NDCG@10", "MRR")

METRICS_COLUMNS = ("run", "role", "view") + METRIC_KEYS
EFFICIENCY_COLUMNS = (
    "run", "role", "params_total", "params_trainable",
    "avg_step_s", "train_hours", "infer_hours",
)


def write_run_record(out_dir: str | Path, record: dict) -> Path:
    path = Path(out_dir) / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_run_record(run_dir: str | Path) -> dict | None:
    path = Path(run_dir) / "run.json"
    if not path.exists():
        log.warning("skipping %s: no run.json", run_dir)
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        log.warning("skipping %s: unreadable run.json (%s)", run_dir, exc)
        return None


def write_csv(path: str | Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def build_report(run_dirs: list[str | Path]) -> tuple[list[dict], list[dict]]:
    """Metric rows and efficiency rows (with the ratio row) for the report CSVs."""
    metric_rows: list[dict] = []
    efficiency_rows: list[dict] = []
    by_role: dict[str, dict] = {}

    for run_dir in run_dirs:
        record = load_run_record(run_dir)
        if record is None:
            continue
        name = Path(run_dir).name
        role = record.get("role", "unknown")
        for view in ("valid", "test"):
            metrics = record.get(f"metrics_{view}")
            if metrics:
                metric_rows.append({
                    "run": name, "role": role, "view": view,
                    **{k: metrics.get(k, "") for k in METRIC_KEYS},
                })
        efficiency_rows.append({
            "run": name,
            "role": role,
            "params_total": record.get("params_total", ""),
            "params_trainable": record.get("params_trainable", ""),
            "avg_step_s": record.get("avg_step_s", ""),
            "train_hours": _hours(record.get("train_s")),
            "infer_hours": _hours(record.get("infer_s")),
        })
        by_role.setdefault(role, record)

    teacher = by_role.get("teacher")
    student = by_role.get("student")
    if teacher and student:
        ratio = {
            "run": "student/teacher",
            "role": "ratio",
            "params_total": _ratio(student.get("params_total"), teacher.get("params_total")),
            "params_trainable": _ratio(
                student.get("params_trainable"), teacher.get("params_trainable")
            ),
            "avg_step_s": _ratio(student.get("avg_step_s"), teacher.get("avg_step_s")),
            "train_hours": _ratio(student.get("train_s"), teacher.get("train_s")),
            "infer_hours": _ratio(student.get("infer_s"), teacher.get("infer_s")),
        }
        efficiency_rows.append(ratio)
    return metric_rows, efficiency_rows


def _hours(seconds) -> str:
    if seconds is None:
        return ""
    return f"{float(seconds) / 3600.0:.6f}"


def _ratio(num, den) -> str:
    try:
        num = float(num)
        den = float(den)
    except (TypeError, ValueError):
        return ""
    if den == 0:
        return ""
    return f"{num / den:.4f}"
