"""Inclusion criteria and per-study outlier rejection."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ._errors import ValidationError
from .cohort import MetricTable, SessionRecord

MISSING_AGE = "MISSING_AGE"
MISSING_SEX = "MISSING_SEX"
MISSING_GROUP = "MISSING_GROUP"
NO_USABLE_IMAGE = "NO_USABLE_IMAGE"
INSUFFICIENT_SHELL = "INSUFFICIENT_SHELL"
OUTLIER = "OUTLIER"


@dataclass(frozen=True)
class QaDecision:
    """Verdict for one session.

    ``scope`` is ``"session"`` for the inclusion criteria and ``"dwi"`` when
    only the diffusion data of the session is rejected.
    """

    key: tuple[str, str]
    study_id: str
    verdict: str
    reasons: tuple[str, ...] = ()
    scope: str = "session"

    def __post_init__(self):
        if self.verdict not in ("include", "exclude"):
            raise ValueError(f"bad verdict {self.verdict!r}")
        if self.verdict == "exclude" and not self.reasons:
            raise ValueError("an exclusion needs at least one reason code")

    @property
    def included(self) -> bool:
        return self.verdict == "include"


def check_inclusion(record: SessionRecord) -> QaDecision:
    """Include a session iff age, sex and group are reported and a T1w or DWI image exists."""
    reasons = []
    if record.age is None:
        reasons.append(MISSING_AGE)
    if record.sex == "unknown":
        reasons.append(MISSING_SEX)
    if record.group == "unknown":
        reasons.append(MISSING_GROUP)
    if not (record.has_t1w or record.has_dwi):
        reasons.append(NO_USABLE_IMAGE)
    return QaDecision(record.key, record.study_id,
                      "exclude" if reasons else "include", tuple(reasons))


def shell_decision(record: SessionRecord, sufficient: bool) -> QaDecision:
    """DWI-scope decision from the shell sufficiency rule."""
    if sufficient:
        return QaDecision(record.key, record.study_id, "include", (), scope="dwi")
    return QaDecision(record.key, record.study_id, "exclude", (INSUFFICIENT_SHELL,), scope="dwi")


@dataclass
class ColumnStats:
    study_id: str
    metric: str
    n: int
    mean: float
    sd: float
    k: float
    skipped: bool = False


@dataclass(frozen=True)
class Rejection:
    key: tuple[str, str]
    study_id: str
    metric: str
    value: float
    z: float


@dataclass
class OutlierReport:
    k: float
    stats: list[ColumnStats] = field(default_factory=list)
    rejected: list[Rejection] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "session_id", "study_id", "metric", "value", "z", "reason"])
        for r in self.rejected:
            w.writerow([r.key[0], r.key[1], r.study_id, r.metric, repr(r.value), repr(r.z), OUTLIER])
        return buf.getvalue()

    def summary(self) -> dict:
        per_metric = Counter(r.metric for r in self.rejected)
        return {"k": self.k, "n_rejected": len(self.rejected),
                "rejected_per_metric": dict(sorted(per_metric.items())),
                "skipped_columns": sum(s.skipped for s in self.stats)}


def reject_outliers(table: MetricTable, k: float = 5.0, columns=None) -> tuple[MetricTable, OutlierReport]:
    """Blank out cells more than ``k`` sample SDs from their study's column mean.

    Single pass: statistics come from the unfiltered column and are not
    recomputed after removal.  Study columns with fewer than two present
    values, or zero spread, reject nothing.
    """
    if not k > 0:
        raise ValidationError("BAD_K", f"k must be positive, got {k!r}")
    columns = table.columns if columns is None else tuple(columns)
    values = np.array(table.values)
    study = table.study
    report = OutlierReport(k=float(k))
    keys = table.keys
    for study_id in sorted(set(study)):
        rows = np.flatnonzero(study == study_id)
        for metric in columns:
            j = table.columns.index(metric)
            col = values[rows, j]
            present = ~np.isnan(col)
            n = int(present.sum())
            if n < 2:
                report.stats.append(ColumnStats(study_id, metric, n, np.nan, np.nan, k, skipped=True))
                continue
            mean = float(col[present].mean())
            sd = float(col[present].std(ddof=1))
            report.stats.append(ColumnStats(study_id, metric, n, mean, sd, k))
            if sd == 0:
                continue
            z = (col - mean) / sd
            for i in np.flatnonzero(present & (np.abs(col - mean) > k * sd)):
                row = rows[i]
                report.rejected.append(Rejection(keys[row], study_id, metric, float(col[i]), float(z[i])))
                values[row, j] = np.nan
    return table.with_values(values), report


def decisions_to_csv(decisions) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "session_id", "study_id", "scope", "verdict", "reasons"])
    for d in decisions:
        w.writerow([d.key[0], d.key[1], d.study_id, d.scope, d.verdict, ";".join(d.reasons)])
    return buf.getvalue()


def decisions_summary(decisions) -> dict:
    counts = Counter(reason for d in decisions for reason in d.reasons)
    verdicts = Counter(f"{d.scope}:{d.verdict}" for d in decisions)
    return {"reason_counts": dict(sorted(counts.items())),
            "verdict_counts": dict(sorted(verdicts.items()))}


def summary_json(decisions) -> str:
    return json.dumps(decisions_summary(decisions), indent=2, sort_keys=True) + "\n"
