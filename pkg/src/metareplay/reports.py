"""Plain-text (key=value) and CSV report writers."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .engine import CLRunReport, MemoryReport

TIMING_KEYS = ("wall_time_s",)


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(round(value, 6))
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value, sort_keys=True)
    return str(value)


def kv_lines(pairs) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in pairs)


def cl_report_text(report: CLRunReport, resolved: dict | None = None) -> str:
    pairs = [
        ("final_train_acc", report.final_train_acc),
        ("final_test_acc", report.final_test_acc),
        ("buffer_bytes", report.buffer_bytes),
        ("buffer_samples", report.buffer_samples),
        ("peak_memory_bytes", report.peak_memory_bytes),
        ("wall_time_s", report.wall_time_s),
    ]
    for c in sorted(report.per_class_test_acc):
        pairs.append((f"class.{c}.train_acc", report.per_class_train_acc[c]))
        pairs.append((f"class.{c}.test_acc", report.per_class_test_acc[c]))
    pairs += [(f"run.{k}", v) for k, v in sorted(report.config.items())]
    if resolved:
        pairs += [(f"config.{k}", v) for k, v in sorted(resolved.items())]
    return kv_lines(pairs)


CSV_HEADER = ("class_id", "train_acc", "test_acc_all_seen", "buffer_bytes")


def write_cl_csv(report: CLRunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in report.steps:
            w.writerow((s.class_id, f"{s.train_acc:.6f}", f"{s.test_acc_all_seen:.6f}", s.buffer_bytes))


def write_cl_report(report: CLRunReport, out_dir, resolved: dict | None = None, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt, table = out / f"{stem}.txt", out / f"{stem}.csv"
    txt.write_text(cl_report_text(report, resolved))
    write_cl_csv(report, table)
    return txt, table


def memory_report_text(mem: MemoryReport, resolved: dict | None = None) -> str:
    pairs = sorted(mem.as_dict().items())
    if resolved:
        pairs += [(f"config.{k}", v) for k, v in sorted(resolved.items())]
    return kv_lines(pairs)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def write_rows_csv(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
