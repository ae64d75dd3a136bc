"""File-based pipeline stages.

Each stage reads the declared outputs of earlier stages (or the raw inputs
named in the config), writes its own artifacts under
``<output>/<stage>/`` and finishes with a ``manifest.json`` recording the
config digest, input and output hashes, library versions and timestamps.
Artifacts other than the manifest carry no timestamps, so identical
inputs give byte-identical files.

Stage order: synth, ingest, qa, dti, harmonize, fit, test, report.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
import sklearn
from joblib import Parallel, delayed

from . import __version__
from ._errors import CohortForgeError, ValidationError
from .cohort import (MergeReport, MetricTable, load_column_maps, merge_metrics, parse_participants,
                     write_participants)
from .combat import fit_table, harmonize_table
from .config import METRIC_NAMES_DWI, PipelineConfig
from .dwi import read_bval_bvec, read_nifti, session_metrics, shell_sufficiency
from .gamlss import GamlssGG, design_frame, fit_nested_pair
from .inference import (anova_by_study, apply_fdr, bootstrap_bands, lrt, residual_anova,
                        results_csv)
from .plotting import centile_svg
from .qa import (check_inclusion, decisions_to_csv, reject_outliers, shell_decision, summary_json)
from .synth import format_bval_bvec, make_phantom, simulate_cohort

logger = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "qa", "dti", "harmonize", "fit", "test", "report")
GROUPS = ("control", "case")
SEXES = ("female", "male")
PERCENTILES = (5, 50, 95)
DWI_NAMES = ("dwi.nii.gz", "dwi.nii")
MASK_NAMES = ("mask.nii.gz", "mask.nii")


# -- file helpers ----------------------------------------------------------
def atomic_write(path, data) -> Path:
    """Write via a temporary file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _clean(obj):
    """JSON-safe copy: NaN/inf become ``None``, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _frame_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, lineterminator="\n", float_format="%.12g", na_rep="NA")


class Stage:
    """Bookkeeping for one stage run: declared inputs, outputs and the manifest."""

    def __init__(self, name: str, cfg: PipelineConfig):
        self.name = name
        self.cfg = cfg
        self.root = Path(cfg.paths.output)
        self.dir = self.root / name
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.started = _now()

    def require(self, *paths) -> None:
        missing = [str(p) for p in paths if not Path(p).exists()]
        if missing:
            raise ValidationError("MISSING_STAGE_INPUT", f"stage {self.name} needs {', '.join(missing)}")
        self.inputs.extend(Path(p) for p in paths)

    def reset(self) -> None:
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)

    def write(self, relpath, data) -> Path:
        path = atomic_write(self.dir / relpath, data)
        self.outputs.append(path)
        return path

    def _rel(self, p: Path) -> str:
        p = Path(p).resolve()
        try:
            return str(p.relative_to(self.root.resolve()))
        except ValueError:
            return str(p)

    def finish(self) -> Path:
        manifest = {
            "stage": self.name,
            "config_sha256": self.cfg.digest(),
            "inputs": {self._rel(p): sha256(p) for p in sorted(set(self.inputs)) if p.is_file()},
            "outputs": {self._rel(p): sha256(p) for p in sorted(set(self.outputs))},
            "versions": {"cohort_forge": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "pandas": pd.__version__, "scikit-learn": sklearn.__version__},
            "started": self.started,
            "finished": _now(),
        }
        return atomic_write(self.dir / "manifest.json", _json(manifest))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_table(stage: Stage, table: MetricTable, prefix="") -> None:
    stage.write(f"{prefix}participants.tsv", write_participants(table.records))
    stage.write(f"{prefix}metrics.csv", table.to_csv())


def read_table(directory: Path, stage: Stage | None = None) -> MetricTable:
    directory = Path(directory)
    tsv, csv_path = directory / "participants.tsv", directory / "metrics.csv"
    if stage is not None:
        stage.require(tsv, csv_path)
    records = parse_participants(tsv.read_bytes(), "unknown")
    return merge_metrics(records, csv_path.read_bytes())


# -- synth -----------------------------------------------------------------
def run_synth(cfg: PipelineConfig) -> Path:
    """Write a synthetic cohort (participants TSV, metrics CSV, optional DWI phantoms)."""
    stage = Stage("synth", cfg)
    stage.reset()
    spec = cfg.synth
    table = simulate_cohort(spec)
    stage.write("participants.tsv", write_participants(table.records))
    stage.write("metrics.csv", table.to_csv())
    truth = {"spec": spec.model_dump(mode="json"), "n_sessions": len(table)}
    stage.write("truth.json", _json(truth))
    if spec.phantoms:
        n_dirs = {s.name: s.n_dirs for s in spec.studies}
        cols = [table.columns.index(m) for m in METRIC_NAMES_DWI]
        from .dwi import write_nifti
        for rec, row in zip(table.records, table.values):
            if not rec.has_dwi:
                continue
            fa_v, md_v, ticv_v = (float(row[j]) for j in cols)
            dwi, mask, bvals, bvecs = make_phantom(fa_v, md_v, ticv_v, spec.phantom_dims,
                                                   n_dirs[rec.study_id])
            base = Path("dwi") / rec.subject_id / rec.session_id
            bval, bvec = format_bval_bvec(bvals, bvecs)
            stage.write(base / "dwi.nii.gz", write_nifti(dwi, compress=True))
            stage.write(base / "mask.nii.gz", write_nifti(mask, compress=True))
            stage.write(base / "dwi.bval", bval)
            stage.write(base / "dwi.bvec", bvec)
    return stage.finish()


# -- ingest ----------------------------------------------------------------
def _combine(tables: list[MetricTable], records) -> MetricTable:
    """Outer-join metric tables on session key, keeping record order."""
    if len(tables) == 1:
        return tables[0]
    columns = []
    for t in tables:
        for c in t.columns:
            if c in columns:
                raise ValidationError("DUPLICATE_METRIC", f"metric {c} appears in two metric files")
            columns.append(c)
    present = set().union(*(set(t.keys) for t in tables))
    rows = [r for r in records if r.key in present]
    index = {r.key: i for i, r in enumerate(rows)}
    values = np.full((len(rows), len(columns)), np.nan)
    for t in tables:
        js = [columns.index(c) for c in t.columns]
        for key, vals in zip(t.keys, t.values):
            values[index[key], js] = vals
    return MetricTable(rows, columns, values)


def run_ingest(cfg: PipelineConfig) -> Path:
    stage = Stage("ingest", cfg)
    root = Path(cfg.paths.output)
    participants = [Path(p) for p in cfg.paths.participants] or [root / "synth" / "participants.tsv"]
    metrics = [Path(p) for p in cfg.paths.metrics] or [root / "synth" / "metrics.csv"]
    stage.require(*participants, *metrics)
    column_maps = None
    if cfg.paths.column_map:
        stage.require(cfg.paths.column_map)
        column_maps = load_column_maps(Path(cfg.paths.column_map))
    warnings: list = []
    records, seen = [], set()
    for path in participants:
        for rec in parse_participants(path.read_bytes(), path.stem, column_maps, warnings):
            if rec.key in seen:
                raise ValidationError("DUPLICATE_SESSION", f"{rec.key[0]}/{rec.key[1]} in two participant files")
            seen.add(rec.key)
            records.append(rec)
    reports, tables = [], []
    for path in metrics:
        report = MergeReport()
        tables.append(merge_metrics(records, path.read_bytes(), report))
        reports.append({"file": path.name, "n_matched": report.n_matched,
                        "unmatched": [list(k) for k in report.unmatched]})
    table = _combine(tables, records)
    stage.reset()
    stage.write("all_participants.tsv", write_participants(records))
    write_table(stage, table)
    stage.write("report.json", _json({"n_records": len(records), "n_sessions_with_metrics": len(table),
                                      "merge": reports, "warnings": [str(w) for w in warnings]}))
    return stage.finish()


# -- qa --------------------------------------------------------------------
def _dwi_root(cfg: PipelineConfig):
    if cfg.paths.dwi_root:
        return Path(cfg.paths.dwi_root)
    if not cfg.paths.participants:
        default = Path(cfg.paths.output) / "synth" / "dwi"
        if default.exists():
            return default
    return None


def _session_files(root, rec, names):
    if root is None:
        return None
    for name in names:
        p = Path(root) / rec.subject_id / rec.session_id / name
        if p.exists():
            return p
    return None


def _read_scheme(dwi_path: Path):
    base = dwi_path.parent
    return read_bval_bvec((base / "dwi.bval").read_text(), (base / "dwi.bvec").read_text())


def run_qa(cfg: PipelineConfig) -> Path:
    stage = Stage("qa", cfg)
    src = Path(cfg.paths.output) / "ingest"
    stage.require(src / "all_participants.tsv")
    records = parse_participants((src / "all_participants.tsv").read_bytes(), "unknown")
    table = read_table(src, stage)
    root = _dwi_root(cfg)
    decisions = [check_inclusion(r) for r in records]
    for rec in records:
        dwi = _session_files(root, rec, DWI_NAMES) if rec.has_dwi else None
        if dwi is None:
            continue
        stage.require(dwi.parent / "dwi.bval", dwi.parent / "dwi.bvec")
        scheme = _read_scheme(dwi)
        ok, _ = shell_sufficiency(scheme, tuple(cfg.qa.shell_range), cfg.qa.min_shell_dirs)
        decisions.append(shell_decision(rec, ok))
    included = {d.key for d in decisions if d.scope == "session" and d.included}
    kept = table.subset(np.array([k in included for k in table.keys], dtype=bool))
    if len(kept) == 0:
        raise ValidationError("NO_SESSIONS", "every session failed the inclusion criteria")
    stage.reset()
    stage.write("decisions.csv", decisions_to_csv(decisions))
    stage.write("summary.json", summary_json(decisions))
    write_table(stage, kept)
    return stage.finish()


# -- dti -------------------------------------------------------------------
def _dwi_excluded(path: Path) -> set:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    rows = frame[(frame["scope"] == "dwi") & (frame["verdict"] == "exclude")]
    return set(zip(rows["subject_id"], rows["session_id"]))


def _fit_session(rec, dwi_path, mask_path, qa):
    try:
        scheme = _read_scheme(dwi_path)
        out = session_metrics(read_nifti(dwi_path.read_bytes()), scheme, read_nifti(mask_path.read_bytes()),
                              max_b=qa.shell_range[1], single_shell=qa.single_shell,
                              shell_tol=qa.shell_tol, target_b=qa.target_b)
        return {"error": "", **out}
    except CohortForgeError as exc:
        logger.warning("DWI fit failed for %s/%s: %s", rec.subject_id, rec.session_id, exc)
        return {"error": exc.code}


def run_dti(cfg: PipelineConfig) -> Path:
    """Tensor metrics per session; replaces the tabulated FA, MD and TICV where images exist."""
    stage = Stage("dti", cfg)
    src = Path(cfg.paths.output) / "qa"
    stage.require(src / "decisions.csv")
    table = read_table(src, stage)
    excluded = _dwi_excluded(src / "decisions.csv")
    root = _dwi_root(cfg)
    mask_root = Path(cfg.paths.mask_root) if cfg.paths.mask_root else root
    jobs = []
    for i, rec in enumerate(table.records):
        if rec.key in excluded or not rec.has_dwi:
            continue
        dwi = _session_files(root, rec, DWI_NAMES)
        mask = _session_files(mask_root, rec, MASK_NAMES)
        if dwi is None or mask is None:
            continue
        stage.require(dwi, mask)
        jobs.append((i, rec, dwi, mask))
    results = Parallel(n_jobs=cfg.threads)(delayed(_fit_session)(rec, d, m, cfg.qa) for _, rec, d, m in jobs)

    columns = list(table.columns)
    for name in METRIC_NAMES_DWI:
        if name not in columns:
            columns.append(name)
    values = np.full((len(table), len(columns)), np.nan)
    values[:, :len(table.columns)] = table.values
    rows = []
    for (i, rec, _, _), res in zip(jobs, results):
        rows.append({"subject_id": rec.subject_id, "session_id": rec.session_id, **res})
        for name in METRIC_NAMES_DWI:
            values[i, columns.index(name)] = res.get(name, np.nan)
    # sessions whose diffusion data failed the shell rule lose their diffusion metrics
    for i, rec in enumerate(table.records):
        if rec.key in excluded:
            for name in ("mean_fa", "mean_md"):
                values[i, columns.index(name)] = np.nan
    order = ["subject_id", "session_id", "mean_fa", "mean_md", "ticv", "n_mask_voxels",
             "n_clamped_voxels", "shell_b", "n_dirs_used", "error"]
    stage.reset()
    stage.write("session_metrics.csv", _frame_csv(pd.DataFrame(rows, columns=order)))
    write_table(stage, MetricTable(table.records, columns, values))
    return stage.finish()


# -- harmonize -------------------------------------------------------------
def _anova_rows(table, metrics, controls_only, label):
    rows = []
    for m in metrics:
        for kind, fn in (("raw", anova_by_study), ("residual", residual_anova)):
            try:
                r = fn(table, m, controls_only)
                rows.append({"metric": m, "data": label, "kind": kind, "F": r.statistic,
                             "df1": r.df, "df2": r.df2, "p": r.p})
            except ValidationError as exc:
                rows.append({"metric": m, "data": label, "kind": kind, "F": np.nan,
                             "df1": np.nan, "df2": np.nan, "p": np.nan, "error": exc.code})
    return rows


def run_harmonize(cfg: PipelineConfig) -> Path:
    """ComBat on the configured features plus per-study outlier rejection."""
    stage = Stage("harmonize", cfg)
    table = read_table(Path(cfg.paths.output) / "dti", stage)
    k = cfg.qa.k
    reports = []
    if cfg.qa.outlier_order == "before_harmonization":
        table, rep = reject_outliers(table, k)
        reports.append(rep)
    model = None
    features = []
    if cfg.combat.enabled:
        features = list(cfg.combat.features)
        missing = [f for f in features if f not in table.columns]
        if missing:
            raise ValidationError("UNKNOWN_FEATURE", f"ComBat features not in table: {missing}")
        before = table
        model = fit_table(table, features, tol=cfg.combat.tol, max_iter=cfg.combat.max_iter,
                          empirical_bayes=cfg.combat.empirical_bayes)
        table = harmonize_table(model, table)
        anova = (_anova_rows(before, features, cfg.inference.anova_controls_only, "before")
                 + _anova_rows(table, features, cfg.inference.anova_controls_only, "after"))
    if cfg.qa.outlier_order == "after_harmonization":
        table, rep = reject_outliers(table, k)
        reports.append(rep)
    stage.reset()
    write_table(stage, table)
    rep = reports[0]
    stage.write("outliers.csv", rep.to_csv())
    stage.write("outliers.json", _json(_clean({**rep.summary(), "order": cfg.qa.outlier_order})))
    if model is not None:
        stage.write("combat_model.json", model.to_json())
        cols = ["metric", "data", "kind", "F", "df1", "df2", "p", "error"]
        stage.write("anova.csv", _frame_csv(pd.DataFrame(anova, columns=cols)))
    return stage.finish()


# -- fit -------------------------------------------------------------------
def _fit_rows(table: MetricTable, metric: str):
    y = table.column(metric)
    keep = ~np.isnan(y) & (y > 0) & ~np.isnan(table.age)
    keep &= (table.sex != "unknown") & (table.group != "unknown")
    X = design_frame(table.age[keep], table.sex[keep], table.group[keep])
    return keep, X, y[keep]


def _fit_metric(table, metric, params):
    _, X, y = _fit_rows(table, metric)
    full, null = fit_nested_pair(X, y, **params)
    return full, null


def _centiles(model: GamlssGG, ages, percentiles=PERCENTILES) -> pd.DataFrame:
    import warnings
    frames = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for sex in SEXES:
            for group in GROUPS:
                frames.append(model.predict_centiles(ages, sex, group, percentiles))
    return pd.concat(frames, ignore_index=True)


def _metrics(cfg, table) -> list[str]:
    metrics = cfg.gamlss.metrics or list(table.columns)
    missing = [m for m in metrics if m not in table.columns]
    if missing:
        raise ValidationError("UNKNOWN_METRIC", f"metrics not in table: {missing}")
    return metrics


def run_fit(cfg: PipelineConfig) -> Path:
    stage = Stage("fit", cfg)
    table = read_table(Path(cfg.paths.output) / "harmonize", stage)
    metrics = _metrics(cfg, table)
    params = cfg.gamlss.estimator_params()
    fits = Parallel(n_jobs=cfg.threads)(delayed(_fit_metric)(table, m, params) for m in metrics)
    ages = cfg.gamlss.age_grid.values()
    summary = {}
    stage.reset()
    for m, (full, null) in zip(metrics, fits):
        stage.write(f"models/{m}.json", _json({"full": full.to_dict(), "null": null.to_dict()}))
        stage.write(f"centiles/{m}.csv", _frame_csv(_centiles(full, ages)))
        summary[m] = {"n": full.n_samples_, "deviance_full": full.deviance_, "deviance_null": null.deviance_,
                      "edf_full": full.edf_, "edf_null": null.edf_, "lambdas": full.lambdas_,
                      "iterations": full.n_iter_ + null.n_iter_, "extrapolated_ages": int(full.extrapolates(ages).sum())}
    stage.write("summary.json", _json(_clean(summary)))
    return stage.finish()


# -- test ------------------------------------------------------------------
def _load_pair(path: Path):
    doc = json.loads(path.read_text())
    return GamlssGG.from_dict(doc["full"]), GamlssGG.from_dict(doc["null"])


def _bands(table, metric, params, cfg, n_jobs):
    keep, X, y = _fit_rows(table, metric)
    subjects = np.array([f"{s}/{r.subject_id}" for s, r in zip(table.study, table.records)], dtype=object)[keep]
    strata = np.array([f"{s}|{g}" for s, g in zip(table.study, table.group)], dtype=object)[keep]
    return bootstrap_bands(X, y, subjects, strata, params, B=cfg.inference.B,
                           ages=cfg.gamlss.age_grid.values(), seed=cfg.inference.seed,
                           sex=cfg.gamlss.reference_sex, groups=GROUPS, n_jobs=n_jobs)


def run_test(cfg: PipelineConfig) -> Path:
    """LRTs with BY correction across metrics and bootstrap bands of the median curves."""
    stage = Stage("test", cfg)
    root = Path(cfg.paths.output)
    table = read_table(root / "harmonize", stage)
    metrics = _metrics(cfg, table)
    paths = [root / "fit" / "models" / f"{m}.json" for m in metrics]
    stage.require(*paths)
    results = []
    for m, p in zip(metrics, paths):
        full, null = _load_pair(p)
        results.append(lrt(full, null, m))
    results = apply_fdr(results, cfg.inference.fdr_rate)
    params = cfg.gamlss.estimator_params()
    bands = [_bands(table, m, params, cfg, cfg.threads) for m in metrics]
    stage.reset()
    stage.write("results.csv", results_csv(results))
    failed = {}
    for m, band in zip(metrics, bands):
        stage.write(f"bands/{m}.csv", _frame_csv(band))
        failed[m] = band.attrs.get("n_failed", 0)
    stage.write("summary.json", _json(_clean({
        "fdr_rate": cfg.inference.fdr_rate, "B": cfg.inference.B, "seed": cfg.inference.seed,
        "failed_replicates": failed,
        "significant": [r.metric for r in results if r.rejected]})))
    return stage.finish()


# -- report ----------------------------------------------------------------
def run_report(cfg: PipelineConfig) -> Path:
    stage = Stage("report", cfg)
    root = Path(cfg.paths.output)
    results_path = root / "test" / "results.csv"
    stage.require(results_path)
    results = pd.read_csv(results_path)
    metrics = list(results["metric"].astype(str))
    ages = cfg.gamlss.age_grid.values()
    grid = cfg.gamlss.age_grid
    sex = cfg.gamlss.reference_sex
    rate = cfg.inference.fdr_rate
    svgs, index = {}, {"fdr_rate": rate, "reference_sex": sex, "metrics": []}
    for m, row in zip(metrics, results.itertuples()):
        cent_path = root / "fit" / "centiles" / f"{m}.csv"
        band_path = root / "test" / "bands" / f"{m}.csv"
        stage.require(cent_path, band_path)
        cent = pd.read_csv(cent_path)
        band = pd.read_csv(band_path)
        medians, shaded = {}, {}
        for g in GROUPS:
            c = cent[(cent["sex"] == sex) & (cent["group"] == g)]
            b = band[band["group"] == g]
            medians[g] = c["p50"].to_numpy()
            shaded[g] = (b["lower"].to_numpy(), b["upper"].to_numpy())
        q = float(row.q)
        svgs[m] = centile_svg(m, ages, medians, shaded, q=q, rate=rate, x_range=(grid.start, grid.stop))
        index["metrics"].append({"metric": m, "svg": f"{m}.svg", "statistic": float(row.statistic),
                                 "df": float(row.df), "p": float(row.p), "q": q,
                                 "significant": bool(q <= rate)})
    stage.reset()
    for m, svg in svgs.items():
        stage.write(f"{m}.svg", svg)
    stage.write("index.json", _json(_clean(index)))
    return stage.finish()


RUNNERS = {"synth": run_synth, "ingest": run_ingest, "qa": run_qa, "dti": run_dti,
           "harmonize": run_harmonize, "fit": run_fit, "test": run_test, "report": run_report}


def run_stage(name: str, cfg: PipelineConfig) -> Path:
    if name not in RUNNERS:
        raise ValidationError("UNKNOWN_STAGE", name)
    logger.info("running stage %s", name)
    return RUNNERS[name](cfg)


def run_all(cfg: PipelineConfig, include_synth=None) -> None:
    """Run every stage in order; ``synth`` runs when no input tables are configured."""
    if include_synth is None:
        include_synth = not cfg.paths.participants
    for name in STAGES:
        if name == "synth" and not include_synth:
            continue
        run_stage(name, cfg)
