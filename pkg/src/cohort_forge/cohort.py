"""Cohort data model and ingestion of participant and metric tables.

Participant tables are BIDS-like TSV files; metric tables are CSV files keyed
by ``(subject_id, session_id)``.  Sessions, not subjects, are the row unit.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import yaml

from ._errors import ValidationError

logger = logging.getLogger(__name__)

SEXES = ("female", "male", "unknown")
GROUPS = ("case", "control", "unknown")
DEFAULT_SESSION = "ses-01"

# tokens that mean "not reported" and are not worth a warning
_UNKNOWN_TOKENS = {"", "unknown"}
_MISSING_TOKENS = {"", "na", "nan"}

DEFAULT_SEX_SYNONYMS = {
    "female": ("f", "female", "0"),
    "male": ("m", "male", "1"),
}
DEFAULT_GROUP_SYNONYMS = {
    "case": ("case", "tbi", "1"),
    "control": ("control", "0"),
}

# CDE name -> candidate source column names, first match wins
DEFAULT_COLUMNS = {
    "subject_id": ("participant_id", "subject_id"),
    "session_id": ("session_id", "session"),
    "study_id": ("study_id", "study"),
    "age": ("age",),
    "sex": ("sex",),
    "group": ("group",),
    "gcs": ("gcs",),
    "scanner_type": ("scanner_type",),
    "scanner_id": ("scanner_id",),
    "scanner_location": ("scanner_location",),
    "race": ("race",),
    "ethnicity": ("ethnicity",),
    "has_t1w": ("has_t1w",),
    "has_dwi": ("has_dwi",),
}

_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


@dataclass(frozen=True)
class SessionRecord:
    """One imaging session with its common data elements."""

    subject_id: str
    session_id: str
    study_id: str
    age: float | None = None
    sex: str = "unknown"
    group: str = "unknown"
    gcs: int | None = None
    scanner_type: str | None = None
    scanner_id: str | None = None
    scanner_location: str | None = None
    race: str | None = None
    ethnicity: str | None = None
    has_t1w: bool = True
    has_dwi: bool = True

    def __post_init__(self):
        if not self.subject_id:
            raise ValidationError("MISSING_SUBJECT_ID", "empty subject id")
        if self.age is not None and not (math.isfinite(self.age) and 0 <= self.age <= 130):
            raise ValidationError("AGE_RANGE", f"age {self.age!r} outside [0, 130]")
        if self.gcs is not None and not 3 <= self.gcs <= 15:
            raise ValidationError("GCS_RANGE", f"gcs {self.gcs!r} outside [3, 15]")
        if self.sex not in SEXES:
            raise ValidationError("BAD_SEX", repr(self.sex))
        if self.group not in GROUPS:
            raise ValidationError("BAD_GROUP", repr(self.group))

    @property
    def key(self) -> tuple[str, str]:
        return (self.subject_id, self.session_id)


@dataclass
class ColumnMap:
    """Source-column names and coding synonyms for one study.

    ``columns`` maps a CDE name to the source column that holds it.  Synonym
    tables extend (never replace) the built-in codings.
    """

    columns: dict[str, str] = field(default_factory=dict)
    sex_synonyms: dict[str, tuple[str, ...]] = field(default_factory=dict)
    group_synonyms: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def source_column(self, cde: str, header: Sequence[str]) -> str | None:
        if cde in self.columns:
            return self.columns[cde] if self.columns[cde] in header else None
        for candidate in DEFAULT_COLUMNS[cde]:
            if candidate in header:
                return candidate
        return None

    def _lookup(self, defaults, extra):
        table = {}
        for level, tokens in list(defaults.items()) + list(extra.items()):
            for tok in tokens:
                table[str(tok).strip().lower()] = level
        return table

    @property
    def sex_table(self) -> dict[str, str]:
        return self._lookup(DEFAULT_SEX_SYNONYMS, self.sex_synonyms)

    @property
    def group_table(self) -> dict[str, str]:
        return self._lookup(DEFAULT_GROUP_SYNONYMS, self.group_synonyms)


def load_column_maps(path_or_text) -> dict[str, ColumnMap]:
    """Read a YAML column-mapping config.

    Layout::

        default:
          columns: {subject_id: participant_id}
        studies:
          study_a:
            columns: {age: age_at_scan, group: dx}
            group: {case: [mTBI], control: [HC]}

    Returns a dict keyed by study id; key ``None`` holds the default map.
    """
    if isinstance(path_or_text, Path) or (
        isinstance(path_or_text, str) and "\n" not in path_or_text and Path(path_or_text).exists()
    ):
        text = Path(path_or_text).read_text(encoding="utf-8")
    else:
        text = path_or_text
    doc = yaml.safe_load(text) or {}
    unknown = set(doc) - {"default", "studies"}
    if unknown:
        raise ValidationError("CONFIG_UNKNOWN_KEY", ", ".join(sorted(unknown)))

    def build(entry):
        entry = entry or {}
        bad = set(entry) - {"columns", "sex", "group"}
        if bad:
            raise ValidationError("CONFIG_UNKNOWN_KEY", ", ".join(sorted(bad)))
        cols = {str(k): str(v) for k, v in (entry.get("columns") or {}).items()}
        bad_cde = set(cols) - set(DEFAULT_COLUMNS)
        if bad_cde:
            raise ValidationError("CONFIG_UNKNOWN_KEY", ", ".join(sorted(bad_cde)))
        sex = {k: tuple(map(str, v)) for k, v in (entry.get("sex") or {}).items()}
        group = {k: tuple(map(str, v)) for k, v in (entry.get("group") or {}).items()}
        if set(sex) - {"female", "male"} or set(group) - {"case", "control"}:
            raise ValidationError("CONFIG_BAD_LEVEL", "unknown sex/group level in synonyms")
        return ColumnMap(cols, sex, group)

    maps = {None: build(doc.get("default"))}
    for study, entry in (doc.get("studies") or {}).items():
        maps[str(study)] = build(entry)
    return maps


def _decode(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        data = bytes(data).decode("utf-8-sig")
    return data.replace("\r\n", "\n").replace("\r", "\n")


def _map_level(value, table, field_name, warnings) -> str:
    token = (value or "").strip().lower()
    if token in table:
        return table[token]
    if token not in _UNKNOWN_TOKENS:
        msg = f"unmappable {field_name} value {value!r}"
        warnings.append(msg)
        logger.warning(msg)
    return "unknown"


def _opt_str(value):
    value = (value or "").strip()
    return None if value.lower() in _MISSING_TOKENS or value.lower() == "n/a" else value


def _opt_float(value, field_name, warnings):
    token = (value or "").strip()
    if token.lower() in _MISSING_TOKENS or token.lower() == "n/a":
        return None
    try:
        out = float(token)
    except ValueError:
        out = None
    if out is None or not math.isfinite(out):
        warnings.append(f"unparseable {field_name} value {value!r}")
        logger.warning(warnings[-1])
        return None
    return out


def _opt_bool(value, field_name, warnings, default=True):
    token = (value or "").strip().lower()
    if token in _TRUE:
        return True
    if token in _FALSE:
        return False
    if token not in _MISSING_TOKENS:
        warnings.append(f"unparseable {field_name} value {value!r}")
        logger.warning(warnings[-1])
    return default


def normalize_cde(raw: Mapping[str, str], column_map: ColumnMap | None = None,
                  warnings: list | None = None) -> dict:
    """Normalize the CDE fields of one table row.

    Parameters
    ----------
    raw : mapping of str to str
        One row, keyed by source column name.
    column_map : ColumnMap, optional
        Per-study column names and coding synonyms.
    warnings : list, optional
        Receives one message per unmappable or unparseable value.

    Returns
    -------
    dict
        CDE name to normalized value. Unmappable sex/group codes become
        ``"unknown"``; unparseable optional fields become ``None``.
    """
    cmap = column_map or ColumnMap()
    warnings = [] if warnings is None else warnings
    header = list(raw)

    def get(cde):
        col = cmap.source_column(cde, header)
        return None if col is None else raw.get(col)

    out = {
        "sex": _map_level(get("sex"), cmap.sex_table, "sex", warnings),
        "group": _map_level(get("group"), cmap.group_table, "group", warnings),
        "age": _opt_float(get("age"), "age", warnings),
    }
    if out["age"] is not None and not 0 <= out["age"] <= 130:
        warnings.append(f"age {out['age']!r} outside [0, 130]")
        logger.warning(warnings[-1])
        out["age"] = None
    gcs = _opt_float(get("gcs"), "gcs", warnings)
    if gcs is not None and (gcs != int(gcs) or not 3 <= gcs <= 15):
        warnings.append(f"gcs {gcs!r} outside 3-15")
        logger.warning(warnings[-1])
        gcs = None
    out["gcs"] = None if gcs is None else int(gcs)
    for name in ("scanner_type", "scanner_id", "scanner_location", "race", "ethnicity"):
        out[name] = _opt_str(get(name))
    for name in ("has_t1w", "has_dwi"):
        out[name] = _opt_bool(get(name), name, warnings)
    return out


def _read_tsv(tsv_bytes) -> tuple[list[str], list[list[str]]]:
    text = _decode(tsv_bytes)
    lines = [ln for ln in text.split("\n") if ln.strip() != ""]
    if not lines:
        raise ValidationError("MISSING_HEADER", "empty participants table")
    header = [h.strip() for h in lines[0].split("\t")]
    if len(header) < 2 and "," in lines[0]:
        raise ValidationError("MISSING_HEADER", "header is not tab-separated")
    rows = []
    for ln in lines[1:]:
        cells = ln.split("\t")
        cells += [""] * (len(header) - len(cells))
        rows.append(cells[: len(header)])
    return header, rows


def parse_participants(tsv_bytes, study_id: str,
                       column_maps: Mapping | ColumnMap | None = None,
                       warnings: list | None = None) -> list[SessionRecord]:
    """Parse a participants/sessions TSV into session records.

    ``study_id`` is used for rows that carry no study column.  ``column_maps``
    may be one :class:`ColumnMap` or the dict returned by
    :func:`load_column_maps`.
    """
    header, rows = _read_tsv(tsv_bytes)
    warnings = [] if warnings is None else warnings

    def cmap_for(study):
        if isinstance(column_maps, ColumnMap):
            return column_maps
        if not column_maps:
            return ColumnMap()
        return column_maps.get(study) or column_maps.get(None) or ColumnMap()

    base = cmap_for(study_id)
    sid_col = base.source_column("subject_id", header)
    if sid_col is None:
        raise ValidationError("MISSING_SUBJECT_COLUMN", f"no subject id column in {header}")
    ses_col = base.source_column("session_id", header)
    study_col = base.source_column("study_id", header)

    records, seen = [], set()
    for lineno, cells in enumerate(rows, start=2):
        raw = dict(zip(header, cells))
        subject = raw[sid_col].strip()
        if not subject:
            raise ValidationError("MISSING_SUBJECT_ID", f"line {lineno}")
        session = (raw[ses_col].strip() if ses_col else "") or DEFAULT_SESSION
        study = (raw[study_col].strip() if study_col else "") or study_id
        key = (subject, session)
        if key in seen:
            raise ValidationError("DUPLICATE_SESSION", f"{subject}/{session} at line {lineno}")
        seen.add(key)
        cmap = cmap_for(study)
        fields = normalize_cde(raw, cmap, warnings)
        records.append(SessionRecord(subject_id=subject, session_id=session, study_id=study, **fields))
    return records


def write_participants(records: Iterable[SessionRecord]) -> str:
    """Serialize records to the canonical participants TSV (re-readable by :func:`parse_participants`)."""
    cols = list(DEFAULT_COLUMNS)
    lines = ["\t".join(["participant_id"] + cols[1:])]
    for r in records:
        cells = []
        for name in cols:
            v = getattr(r, name)
            if v is None:
                cells.append("n/a")
            elif isinstance(v, bool):
                cells.append("1" if v else "0")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


class MetricTable:
    """Sessions x named metrics, with missing cells stored as NaN.

    Instances are immutable: ``values`` is a read-only array and every
    transformation returns a new table.
    """

    def __init__(self, records: Sequence[SessionRecord], columns: Sequence[str], values):
        records = tuple(records)
        columns = tuple(str(c) for c in columns)
        values = np.array(values, dtype=float, copy=True).reshape(len(records), len(columns))
        if len(set(columns)) != len(columns):
            raise ValidationError("DUPLICATE_COLUMN", "metric column names must be unique")
        if np.isinf(values).any():
            raise ValidationError("NON_FINITE", "metric values must be finite where present")
        keys = [r.key for r in records]
        if len(set(keys)) != len(keys):
            raise ValidationError("DUPLICATE_SESSION", "duplicate session rows")
        values.setflags(write=False)
        self.records = records
        self.columns = columns
        self.values = values

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, MetricTable):
            return NotImplemented
        return (self.records == other.records and self.columns == other.columns
                and np.array_equal(self.values, other.values, equal_nan=True))

    def __repr__(self):
        return f"MetricTable({len(self.records)} sessions x {len(self.columns)} metrics)"

    @property
    def shape(self):
        return self.values.shape

    @property
    def keys(self) -> list[tuple[str, str]]:
        return [r.key for r in self.records]

    def _attr(self, name, dtype=object):
        return np.array([getattr(r, name) for r in self.records], dtype=dtype)

    @property
    def study(self) -> np.ndarray:
        return self._attr("study_id")

    @property
    def subject(self) -> np.ndarray:
        return self._attr("subject_id")

    @property
    def sex(self) -> np.ndarray:
        return self._attr("sex")

    @property
    def group(self) -> np.ndarray:
        return self._attr("group")

    @property
    def age(self) -> np.ndarray:
        return np.array([np.nan if r.age is None else r.age for r in self.records], dtype=float)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def with_values(self, values) -> "MetricTable":
        return MetricTable(self.records, self.columns, values)

    def select(self, columns: Sequence[str]) -> "MetricTable":
        idx = [self.columns.index(c) for c in columns]
        return MetricTable(self.records, columns, self.values[:, idx])

    def subset(self, rows) -> "MetricTable":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return MetricTable([self.records[i] for i in rows], self.columns, self.values[rows])

    def replace_records(self, records: Sequence[SessionRecord]) -> "MetricTable":
        return MetricTable(records, self.columns, self.values)

    def to_frame(self) -> pd.DataFrame:
        """Demographics plus metrics as a DataFrame (one row per session)."""
        demo = pd.DataFrame({
            "subject_id": self.subject, "session_id": self._attr("session_id"),
            "study_id": self.study, "age": self.age, "sex": self.sex, "group": self.group,
        })
        metrics = pd.DataFrame(np.array(self.values), columns=list(self.columns))
        return pd.concat([demo, metrics], axis=1)

    def to_csv(self) -> str:
        """Serialize as CSV keyed by subject and session; missing cells are ``NA``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "session_id", *self.columns])
        for rec, row in zip(self.records, self.values):
            w.writerow([rec.subject_id, rec.session_id,
                        *("NA" if np.isnan(v) else repr(float(v)) for v in row)])
        return buf.getvalue()


@dataclass
class MergeReport:
    n_matched: int = 0
    unmatched: list = field(default_factory=list)


def _parse_cell(token: str, where: str) -> float:
    t = token.strip()
    if t.lower() in _MISSING_TOKENS:
        return np.nan
    try:
        value = float(t)
    except ValueError:
        raise ValidationError("MALFORMED_CSV", f"non-numeric cell {token!r} at {where}") from None
    if not math.isfinite(value):
        raise ValidationError("MALFORMED_CSV", f"non-finite cell {token!r} at {where}")
    return value


def merge_metrics(records: Sequence[SessionRecord], metrics_csv,
                  report: MergeReport | None = None) -> MetricTable:
    """Join a metrics CSV onto session records by ``(subject_id, session_id)``.

    Metric rows without a matching record are dropped and listed in
    ``report.unmatched``.  Rows keep the order of ``records``; records with
    no metric row are omitted.
    """
    report = MergeReport() if report is None else report
    text = _decode(metrics_csv)
    try:
        rows = list(csv.reader(io.StringIO(text), strict=True))
    except csv.Error as exc:
        raise ValidationError("MALFORMED_CSV", str(exc)) from None
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise ValidationError("MALFORMED_CSV", "empty metrics table")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["subject_id", "session_id"]:
        raise ValidationError("MALFORMED_CSV", "first columns must be subject_id, session_id")
    metric_names = header[2:]
    by_key = {r.key: r for r in records}
    found = {}
    for lineno, cells in enumerate(rows[1:], start=2):
        if len(cells) != len(header):
            raise ValidationError("MALFORMED_CSV", f"line {lineno} has {len(cells)} cells, expected {len(header)}")
        key = (cells[0].strip(), cells[1].strip() or DEFAULT_SESSION)
        values = [_parse_cell(c, f"line {lineno}") for c in cells[2:]]
        if key not in by_key:
            report.unmatched.append(key)
            logger.info("dropping metrics for unknown session %s/%s", *key)
            continue
        if key in found:
            raise ValidationError("DUPLICATE_SESSION", f"{key[0]}/{key[1]} repeated in metrics")
        found[key] = values
    if not found:
        raise ValidationError("NO_MATCHING_ROWS", "no metric row matches a known session")
    report.n_matched = len(found)
    matched = [r for r in records if r.key in found]
    values = np.array([found[r.key] for r in matched], dtype=float).reshape(len(matched), len(metric_names))
    return MetricTable(matched, metric_names, values)
