"""Centralized-vs-federated comparison: percent differences, tables, curves."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .experiments import CURVE_METRICS, FINAL_METRICS, fmt


class DegenerateMean(ZeroDivisionError):
    pass


class MetricKeyMismatch(KeyError):
    pass


def percent_diff(central: float, federated: float) -> float:
    """Absolute difference over the pair's mean, in percent."""
    mean = (central + federated) / 2
    if mean == 0:
        raise DegenerateMean("central + federated is zero")
    return abs(central - federated) / abs(mean) * 100


@dataclass(frozen=True)
class MetricRow:
    central: float
    federated: float
    pct_diff: float


@dataclass(frozen=True)
class ComparisonReport:
    rows: dict[str, MetricRow]

    @classmethod
    def from_values(cls, central: Mapping[str, float], federated: Mapping[str, float],
                    metrics=FINAL_METRICS) -> "ComparisonReport":
        rows = {}
        for m in metrics:
            if m not in central or m not in federated:
                if m in central or m in federated:
                    raise MetricKeyMismatch(m)
                continue
            c, f = float(central[m]), float(federated[m])
            rows[m] = MetricRow(c, f, percent_diff(c, f))
        return cls(rows)

    def to_dict(self) -> dict:
        return {m: {"central": r.central, "federated": r.federated, "pct_diff": r.pct_diff}
                for m, r in self.rows.items()}

    def format_table(self) -> str:
        lines = [f"{'Method':<28}" + "".join(f"{m:>12}" for m in self.rows)]
        lines.append(f"{'Centralized Learning (CL)':<28}" + "".join(f"{r.central:>12.4f}" for r in self.rows.values()))
        lines.append(f"{'Federated Learning (FL)':<28}" + "".join(f"{r.federated:>12.4f}" for r in self.rows.values()))
        lines.append(f"{'Absolute %-Difference':<28}" + "".join(f"{r.pct_diff:>12.2f}" for r in self.rows.values()))
        return "\n".join(lines)


def write_report(report: ComparisonReport, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with (out / "table.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "central", "federated", "pct_diff"])
        for m, r in report.rows.items():
            w.writerow([m, fmt(r.central), fmt(r.federated), fmt(r.pct_diff)])
    return out


def write_curves(central_history: list[dict], federated_history: list[dict], out: str | Path) -> None:
    """One CSV per metric with (round, CL, FL); blank cells where a run has no value."""
    curves = Path(out) / "curves"
    curves.mkdir(parents=True, exist_ok=True)
    n = min(len(central_history), len(federated_history))
    for metric in CURVE_METRICS:
        with (curves / f"{metric}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "CL", "FL"])
            for i in range(n):
                w.writerow([i, fmt(central_history[i].get(metric)), fmt(federated_history[i].get(metric))])


def compare(central_dir: str | Path, federated_dir: str | Path, out: str | Path) -> ComparisonReport:
    central_dir, federated_dir = Path(central_dir), Path(federated_dir)
    c_final = json.loads((central_dir / "final.json").read_text(encoding="utf-8"))
    f_final = json.loads((federated_dir / "final.json").read_text(encoding="utf-8"))
    if set(c_final) != set(f_final):
        raise MetricKeyMismatch(f"final metrics differ: {sorted(c_final)} vs {sorted(f_final)}")
    report = ComparisonReport.from_values(c_final, f_final)
    write_report(report, out)
    c_hist = json.loads((central_dir / "history.json").read_text(encoding="utf-8"))
    f_hist = json.loads((federated_dir / "history.json").read_text(encoding="utf-8"))
    write_curves(c_hist, f_hist, out)
    return report
