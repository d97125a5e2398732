"""Trial records and JSON/CSV persistence of run artifacts.

A run directory holds ``report.json`` (schema v1), CSV series, and
``timing.json``. Everything time-dependent lives in ``timing.json`` so the
other files are byte-identical across reruns with the same seeds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .archspace import parse_genotype
from .gramkernel import MgmScore
from .stats import CorrelationReport
from .trainer import EvalCurve

SCHEMA_VERSION = 1


@dataclass
class TrialRecord:
    genotype: str
    genotype_id: int
    seed: int
    mgm: MgmScore | None = None
    mgm_rank: int | None = None
    curve: EvalCurve | None = None

    def __post_init__(self):
        if parse_genotype(self.genotype).index != self.genotype_id:
            raise ValueError(f"genotype {self.genotype!r} does not have id {self.genotype_id}")

    @property
    def val_acc(self) -> float | None:
        if self.curve is None or self.curve.diverged or not self.curve.val_acc:
            return None
        return self.curve.final_val_acc

    @property
    def train_loss(self) -> float | None:
        if self.curve is None or self.curve.diverged or not self.curve.train_loss:
            return None
        return self.curve.final_train_loss


def _num(v: float | None):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None
    return v


def _nan(v):
    return float("nan") if v is None else v


def score_to_dict(s: MgmScore, timings: bool = True) -> dict:
    d = {"value": _num(s.value), "estimator": s.estimator, "numeric_ok": s.numeric_ok}
    if timings:
        d["wall_time"] = s.wall_time
    return d


def score_from_dict(d: dict) -> MgmScore:
    return MgmScore(d["value"], d["estimator"], d.get("wall_time"), d["numeric_ok"])


def curve_to_dict(c: EvalCurve, timings: bool = True) -> dict:
    d = {
        "train_loss": [_num(v) for v in c.train_loss],
        "val_acc": [_num(v) for v in c.val_acc],
        "val_loss": [_num(v) for v in c.val_loss],
        "diverged": c.diverged,
    }
    if timings:
        d["wall_time"] = c.wall_time
    return d


def curve_from_dict(d: dict) -> EvalCurve:
    return EvalCurve(
        [_nan(v) for v in d["train_loss"]],
        [_nan(v) for v in d["val_acc"]],
        [_nan(v) for v in d["val_loss"]],
        d.get("wall_time"),
        d["diverged"],
    )


def trial_to_dict(t: TrialRecord, timings: bool = True) -> dict:
    return {
        "genotype": t.genotype,
        "genotype_id": t.genotype_id,
        "seed": t.seed,
        "mgm": None if t.mgm is None else score_to_dict(t.mgm, timings),
        "mgm_rank": t.mgm_rank,
        "val_acc": _num(t.val_acc),
        "train_loss": _num(t.train_loss),
        "curve": None if t.curve is None else curve_to_dict(t.curve, timings),
    }


def trial_from_dict(d: dict) -> TrialRecord:
    return TrialRecord(
        d["genotype"],
        d["genotype_id"],
        d["seed"],
        None if d["mgm"] is None else score_from_dict(d["mgm"]),
        d["mgm_rank"],
        None if d["curve"] is None else curve_from_dict(d["curve"]),
    )


def correlation_to_dict(c: CorrelationReport) -> dict:
    return {
        "spearman_rho": c.spearman_rho,
        "p_value": c.p_value,
        "n": c.n,
        "permutations": c.permutations,
        "exact": c.exact,
        "xs": c.xs,
        "ys": c.ys,
    }


def correlation_from_dict(d: dict) -> CorrelationReport:
    return CorrelationReport(d["spearman_rho"], d["p_value"], d["n"], d["permutations"], d["exact"], d["xs"], d["ys"])


@dataclass
class RunReport:
    """Schema v1 run document. ``extra`` carries command-specific sections."""

    config: dict
    trials: list[TrialRecord] = field(default_factory=list)
    correlation: CorrelationReport | None = None
    timings: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def report_to_dict(r: RunReport, timings: bool = True) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": r.config,
        "trials": [trial_to_dict(t, timings) for t in r.trials],
        "correlation": None if r.correlation is None else correlation_to_dict(r.correlation),
        "timings": r.timings if timings else "timing.json",
        "extra": r.extra,
    }


def report_from_dict(d: dict) -> RunReport:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
    timings = d["timings"] if isinstance(d["timings"], dict) else {}
    return RunReport(
        d["config"],
        [trial_from_dict(t) for t in d["trials"]],
        None if d["correlation"] is None else correlation_from_dict(d["correlation"]),
        timings,
        d.get("extra", {}),
    )


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _trial_timings(r: RunReport) -> list[dict]:
    return [
        {
            "genotype_id": t.genotype_id,
            "mgm_wall_time": None if t.mgm is None else t.mgm.wall_time,
            "train_wall_time": None if t.curve is None else t.curve.wall_time,
        }
        for t in r.trials
    ]


def write_report(r: RunReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``report.json`` (timing-free) and ``timing.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rp = out_dir / "report.json"
    tp = out_dir / "timing.json"
    rp.write_text(dumps(report_to_dict(r, timings=False)))
    tp.write_text(dumps({"run": r.timings, "trials": _trial_timings(r)}))
    return rp, tp


def read_report(out_dir: str | Path) -> RunReport:
    """Inverse of :func:`write_report`; timings are merged back when present."""
    out_dir = Path(out_dir)
    r = report_from_dict(json.loads((out_dir / "report.json").read_text()))
    tp = out_dir / "timing.json"
    if tp.exists():
        tim = json.loads(tp.read_text())
        r.timings = tim.get("run", {})
        for t, row in zip(r.trials, tim.get("trials", [])):
            if row["genotype_id"] != t.genotype_id:
                raise ValueError("timing.json does not match report.json trial order")
            if t.mgm is not None:
                t.mgm.wall_time = row["mgm_wall_time"]
            if t.curve is not None:
                t.curve.wall_time = row["train_wall_time"]
    return r


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def trials_csv(trials: list[TrialRecord]) -> str:
    rows = [[t.genotype, None if t.mgm is None else t.mgm.value, t.mgm_rank, t.val_acc] for t in trials]
    return _csv_text(["genotype", "mgm", "rank", "val_acc"], rows)


def groups_csv(table: list[dict]) -> str:
    keys = ["group", "size", "best_rank", "worst_rank", "mean_val_acc"]
    return _csv_text(keys, [[row[k] for k in keys] for row in table])


def trajectory_csv(times, losses, lambda_mins, bounds) -> str:
    return _csv_text(["t", "loss", "lambda_min", "bound"], [list(r) for r in zip(times, losses, lambda_mins, bounds)])


def read_trials_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
