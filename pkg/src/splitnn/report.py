"""Post-run analysis: accuracy-vs-client-FLOPs curves and method tables.

Every run directory holds ``metrics.csv`` and ``meta.json`` (written by the
CLI). The metrics schema is fixed::

    row_type,epoch,step,method,topology,client,batch,loss,task_losses,correct,
    accuracy,task_accuracy,client_flops,role_flops,role_bytes_sent,role_bytes_received

``row_type`` is ``step`` or ``eval``. ``client_flops`` is the exact cumulative
per-client FLOP count (an integer or a ``p/q`` fraction). The ``role_*``
columns hold ``role=value`` pairs joined by ``;``, cumulative since the start
of the run.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .errors import IncompatibleRuns
from .metering import RunSummary, comparison_table, format_comparison, format_reference_block

METRICS_HEADER = ("row_type", "epoch", "step", "method", "topology", "client", "batch", "loss", "task_losses",
                  "correct", "accuracy", "task_accuracy", "client_flops", "role_flops", "role_bytes_sent",
                  "role_bytes_received")
CURVES_HEADER = ("run", "method", "topology", "epoch", "step", "client_flops", "accuracy")


def _pairs(d):
    return ";".join(f"{k}={v}" for k, v in d.items())


def _unpairs(text):
    out = {}
    for item in filter(None, text.split(";")):
        k, v = item.split("=", 1)
        out[k] = int(v)
    return out


def _floats(values):
    return ";".join(repr(float(v)) for v in values)


def _unfloats(text):
    return [float(v) for v in filter(None, text.split(";"))]


@dataclass
class MetricsRow:
    row_type: str
    epoch: int
    step: int
    method: str
    topology: str
    client: str
    batch: int
    loss: Optional[float]
    task_losses: list
    correct: Optional[int]
    accuracy: Optional[float]
    task_accuracy: list
    client_flops: Fraction
    role_flops: dict
    role_bytes_sent: dict
    role_bytes_received: dict

    def to_record(self):
        return {
            "row_type": self.row_type,
            "epoch": str(self.epoch),
            "step": str(self.step),
            "method": self.method,
            "topology": self.topology,
            "client": self.client or "",
            "batch": str(self.batch),
            "loss": "" if self.loss is None else repr(float(self.loss)),
            "task_losses": _floats(self.task_losses),
            "correct": "" if self.correct is None else str(self.correct),
            "accuracy": "" if self.accuracy is None else repr(float(self.accuracy)),
            "task_accuracy": _floats(self.task_accuracy),
            "client_flops": str(self.client_flops),
            "role_flops": _pairs(self.role_flops),
            "role_bytes_sent": _pairs(self.role_bytes_sent),
            "role_bytes_received": _pairs(self.role_bytes_received),
        }

    @classmethod
    def from_record(cls, rec):
        opt = lambda text, conv: None if text == "" else conv(text)
        return cls(
            rec["row_type"], int(rec["epoch"]), int(rec["step"]), rec["method"], rec["topology"], rec["client"],
            int(rec["batch"]), opt(rec["loss"], float), _unfloats(rec["task_losses"]), opt(rec["correct"], int),
            opt(rec["accuracy"], float), _unfloats(rec["task_accuracy"]), Fraction(rec["client_flops"]),
            _unpairs(rec["role_flops"]), _unpairs(rec["role_bytes_sent"]), _unpairs(rec["role_bytes_received"]),
        )


def write_metrics(rows, path=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRICS_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.to_record())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise IncompatibleRuns(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRow.from_record(r) for r in reader]


@dataclass
class RunRecord:
    path: Path
    meta: dict
    rows: list

    @property
    def run_id(self):
        return self.meta["run_id"]

    def summary(self) -> RunSummary:
        last = self.rows[-1]
        clients = self.meta["client_roles"]
        return RunSummary(
            self.run_id, self.meta["method"], self.meta.get("topology") or "-", self.meta["dataset"],
            self.meta["epochs"],
            {r: last.role_flops.get(r, 0) for r in clients},
            {r: last.role_bytes_sent.get(r, 0) for r in clients},
            {r: last.role_bytes_received.get(r, 0) for r in clients},
        )


def load_run(path) -> RunRecord:
    path = Path(path)
    if path.is_file():
        path = path.parent
    meta = json.loads((path / "meta.json").read_text())
    return RunRecord(path, meta, read_metrics(path / "metrics.csv"))


def find_runs(directory):
    directory = Path(directory)
    return sorted(p.parent for p in directory.glob("*/metrics.csv") if (p.parent / "meta.json").exists())


@dataclass(frozen=True)
class CurvePoint:
    client_flops: Fraction
    accuracy: float
    method: str
    run_id: str
    topology: str = "-"
    epoch: int = 0
    step: int = 0


def _same_dataset(records):
    datasets = {r.meta["dataset"] for r in records}
    if len(datasets) > 1:
        raise IncompatibleRuns("runs were trained on different datasets: "
                               + ", ".join(f"{r.run_id}={r.meta['dataset'][:12]}" for r in records))


def curves(records):
    """One ordered curve per run, one point per eval row. Returns {run_id: [CurvePoint]}."""
    records = [r if isinstance(r, RunRecord) else load_run(r) for r in records]
    _same_dataset(records)
    out = {}
    for rec in records:
        pts = [CurvePoint(row.client_flops, row.accuracy, rec.meta["method"], rec.run_id,
                          rec.meta.get("topology") or "-", row.epoch, row.step)
               for row in rec.rows if row.row_type == "eval"]
        if any(b.client_flops <= a.client_flops for a, b in zip(pts, pts[1:])):
            raise IncompatibleRuns(f"{rec.run_id}: client FLOPs are not increasing across eval points")
        out[rec.run_id] = pts
    return out


def write_curves(curve_map, path=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVES_HEADER)
    for run_id, pts in curve_map.items():
        for p in pts:
            writer.writerow([run_id, p.method, p.topology, p.epoch, p.step, str(p.client_flops), repr(p.accuracy)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_curves(path):
    out = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.setdefault(rec["run"], []).append(CurvePoint(
                Fraction(rec["client_flops"]), float(rec["accuracy"]), rec["method"], rec["run"],
                rec["topology"], int(rec["epoch"]), int(rec["step"])))
    return out


def summary_table(records) -> str:
    """Desk-scale per-client totals for every run, then the published reference block."""
    records = [r if isinstance(r, RunRecord) else load_run(r) for r in records]
    rows = comparison_table([r.summary() for r in records])
    return format_comparison(rows) + "\n\n" + format_reference_block() + "\n"


def compare(directory):
    """Write curves.csv and summary.txt for every run under ``directory``."""
    directory = Path(directory)
    records = [load_run(p) for p in find_runs(directory)]
    if not records:
        raise IncompatibleRuns(f"{directory}: no runs found (expected */metrics.csv with meta.json)")
    write_curves(curves(records), directory / "curves.csv")
    text = summary_table(records)
    (directory / "summary.txt").write_text(text)
    return text
