"""CSV and summary artifacts for a MetricsReport."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .metrics import MetricsReport, cdf_points, convergence_step, five_number, jain_index

CSV_COLUMNS = ("interval", "start_step", "time_s", "flow_id", "app_id", "cc", "objective",
               "throughput_bps", "srtt_s", "jitter_s", "losses", "cwnd_bytes", "capacity_bps")


class IoFailure(OSError):
    pass


def _fmt(x) -> str:
    # repr round-trips floats exactly and is stable across runs
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    ok = np.isfinite(x)
    return float(x[ok].mean()) if ok.any() else math.nan


def interval_rows(report: MetricsReport, interval: int):
    """Per-flow means over consecutive blocks of ``interval`` steps."""
    if interval < 1:
        raise ValueError("interval must be >= 1")
    rows = []
    for k, start in enumerate(range(0, report.steps, interval)):
        sl = slice(start, min(start + interval, report.steps))
        cap = float(report.capacity[sl].mean())
        for j, fid in enumerate(report.flow_ids):
            rows.append((k, start, start * report.step_seconds, fid, report.app_ids[j], report.cc[j],
                         report.objectives[j], float(report.throughput[sl, j].mean()),
                         _nanmean(report.srtt[sl, j]), _nanmean(report.jitter[sl, j]),
                         int(report.losses[sl, j].sum()), float(report.cwnd[sl, j].mean()), cap))
    return rows


def csv_text(report: MetricsReport, interval: int = 20) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in interval_rows(report, interval):
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    """Parse an emitted CSV back into typed rows."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if k in ("cc", "objective"):
                    row[k] = v
                elif k in ("interval", "start_step", "flow_id", "app_id", "losses"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
    return out


def _objective_series(report: MetricsReport, j: int) -> np.ndarray:
    obj = report.objectives[j]
    if "throughput" in obj:
        return report.throughput[:, j]
    x = report.jitter[:, j] if "jitter" in obj else report.srtt[:, j]
    return np.nan_to_num(x, nan=0.0)


def summary(report: MetricsReport, last: int = 10_000) -> dict:
    sl = report.window(last=last)
    flows = []
    for j, fid in enumerate(report.flow_ids):
        per = {}
        for name, arr in (("throughput_bps", report.throughput), ("srtt_s", report.srtt),
                          ("jitter_s", report.jitter)):
            x = arr[sl, j]
            fin = x[np.isfinite(x)]
            per[name] = {"mean": float(fin.mean()) if fin.size else math.nan,
                         "var": float(fin.var()) if fin.size else math.nan,
                         "five_number": five_number(x), "cdf": cdf_points(x)}
        per["losses"] = int(report.losses[sl, j].sum())
        per["convergence_step"] = convergence_step(_objective_series(report, j))
        flows.append({"flow_id": fid, "app_id": report.app_ids[j], "cc": report.cc[j],
                      "objective": report.objectives[j], **per})
    means = report.flow_means(sl)
    try:
        jain = jain_index(means)
    except ValueError:
        jain = math.nan
    agg = report.aggregate_throughput()[sl]
    return {"seed": report.seed, "steps": report.steps, "window_steps": sl.stop - sl.start,
            "utilization": report.utilization(sl) if report.flow_ids else math.nan,
            "aggregate_throughput": {"mean": float(agg.mean()) if agg.size else math.nan,
                                     "five_number": five_number(agg), "cdf": cdf_points(agg)},
            "jain": jain, "flows": flows,
            "extra": {k: v for k, v in report.extra.items() if k in ("reports", "drops", "phases",
                                                                     "transitions", "apps")}}


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def emit(report: MetricsReport, out_dir, name: str = "run", formats=("csv", "summary"),
         interval: int = 20) -> list[Path]:
    """Write ``<name>.csv`` and/or ``<name>.summary.json``; returns the paths."""
    out_dir = Path(out_dir)
    paths = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            p = out_dir / f"{name}.csv"
            p.write_text(csv_text(report, interval))
            paths.append(p)
        if "summary" in formats:
            p = out_dir / f"{name}.summary.json"
            p.write_text(json.dumps(_clean(summary(report)), indent=2, sort_keys=True) + "\n")
            paths.append(p)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return paths
