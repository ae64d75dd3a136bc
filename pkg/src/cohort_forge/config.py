"""Pipeline and synthetic-cohort configuration.

Configuration is one YAML document validated against the models below.
Unknown keys are rejected and every numeric field is range-checked when
the file is loaded.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator
from pydantic import ValidationError as PydanticError

from ._errors import ValidationError
from .gamlss.model import DEFAULT_LAMBDA_GRID, TERMS

METRIC_NAMES_DWI = ("mean_fa", "mean_md", "ticv")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PathsConfig(_Strict):
    """Input and output locations; relative paths resolve against the config file."""

    participants: list[str] = Field(default_factory=list)
    metrics: list[str] = Field(default_factory=list)
    column_map: Optional[str] = None
    dwi_root: Optional[str] = None
    mask_root: Optional[str] = None
    output: str = "cohort_forge_out"


class QaConfig(_Strict):
    k: float = Field(5.0, gt=0)
    min_shell_dirs: int = Field(12, ge=1)
    shell_range: tuple[float, float] = (500.0, 1500.0)
    target_b: float = Field(1000.0, gt=0)
    shell_tol: float = Field(50.0, gt=0)
    outlier_order: Literal["after_harmonization", "before_harmonization"] = "after_harmonization"
    # keep only b0 plus the shell nearest target_b (for per-shell echo times)
    single_shell: bool = False

    @model_validator(mode="after")
    def _range(self):
        lo, hi = self.shell_range
        if not 0 <= lo <= hi:
            raise ValueError("shell_range must satisfy 0 <= low <= high")
        return self


class CombatConfig(_Strict):
    enabled: bool = True
    features: list[str] = Field(default_factory=lambda: list(METRIC_NAMES_DWI))
    empirical_bayes: bool = True
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(500, ge=1)


class AgeGrid(_Strict):
    start: float = Field(15.0, ge=0, le=130)
    stop: float = Field(90.0, ge=0, le=130)
    step: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _nonempty(self):
        if self.stop < self.start:
            raise ValueError("age grid is empty (stop < start)")
        return self

    def values(self) -> np.ndarray:
        n = int(np.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return self.start + self.step * np.arange(n)


class GamlssConfig(_Strict):
    metrics: Optional[list[str]] = None
    n_knots: int = Field(10, ge=1, le=50)
    lambda_grid: list[float] = Field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID), min_length=1)
    mu_terms: list[str] = Field(default_factory=lambda: ["age", "sex", "group"])
    sigma_terms: list[str] = Field(default_factory=lambda: ["age"])
    nu_terms: list[str] = Field(default_factory=list)
    tol: float = Field(1e-4, gt=0)
    max_outer: int = Field(200, ge=1)
    age_grid: AgeGrid = Field(default_factory=AgeGrid)
    reference_sex: Literal["female", "male"] = "female"

    @model_validator(mode="after")
    def _terms(self):
        if any(lam < 0 for lam in self.lambda_grid):
            raise ValueError("smoothing parameters must be >= 0")
        for name in ("mu_terms", "sigma_terms", "nu_terms"):
            bad = set(getattr(self, name)) - set(TERMS)
            if bad:
                raise ValueError(f"{name}: unknown terms {sorted(bad)}")
        if not any("group" in getattr(self, n) for n in ("mu_terms", "sigma_terms", "nu_terms")):
            raise ValueError("no parameter carries the group term; nothing to test")
        return self

    def estimator_params(self) -> dict:
        return {"mu_terms": tuple(self.mu_terms), "sigma_terms": tuple(self.sigma_terms),
                "nu_terms": tuple(self.nu_terms), "n_knots": self.n_knots,
                "lambda_grid": tuple(self.lambda_grid), "tol": self.tol, "max_outer": self.max_outer}


class InferenceConfig(_Strict):
    B: int = Field(200, ge=1)
    seed: int = Field(0, ge=0)
    fdr_rate: float = Field(0.05, gt=0, lt=1)
    anova_controls_only: bool = True


class StudySpec(_Strict):
    """One synthetic study.

    ``gamma`` and ``delta`` are the additive (in residual SDs) and
    multiplicative site effects applied to every metric.
    """

    name: str = Field(min_length=1)
    n_subjects: PositiveInt = 50
    gamma: float = 0.0
    delta: float = Field(1.0, gt=0)
    age_range: tuple[float, float] = (15.0, 90.0)
    case_fraction: float = Field(0.5, ge=0, le=1)
    n_dirs: int = Field(30, ge=0)

    @model_validator(mode="after")
    def _ages(self):
        lo, hi = self.age_range
        if not 0 <= lo < hi <= 130:
            raise ValueError("age_range must satisfy 0 <= low < high <= 130")
        return self


class MetricSpec(_Strict):
    """True age curve and noise of one synthetic metric.

    The median at age ``a`` is ``value_at_50 * exp(slope * t + curvature * t**2)``
    with ``t = (a - 50) / 10``; ``group_shift`` is in residual SDs.
    """

    name: str = Field(min_length=1)
    value_at_50: float = Field(gt=0)
    slope: float = 0.0
    curvature: float = 0.0
    sigma: float = Field(0.05, gt=0, le=1)
    nu: float = 1.0
    sex_effect: float = Field(0.0, gt=-1)
    group_shift: float = 0.0

    @model_validator(mode="after")
    def _nu(self):
        if self.nu == 0:
            raise ValueError("nu must be nonzero")
        return self


def _default_studies():
    return [StudySpec(name="study-a", gamma=0.8, delta=1.3),
            StudySpec(name="study-b", gamma=-0.6, delta=0.8),
            StudySpec(name="study-c", gamma=0.2, delta=1.0, n_dirs=40)]


def _default_metrics():
    return [MetricSpec(name="mean_fa", value_at_50=0.45, slope=-0.03, curvature=-0.01, sigma=0.05),
            MetricSpec(name="mean_md", value_at_50=0.75e-3, slope=0.03, curvature=0.01, sigma=0.05),
            MetricSpec(name="ticv", value_at_50=1.45e6, slope=-0.01, sigma=0.08, sex_effect=0.1)]


class SyntheticCohortSpec(_Strict):
    studies: list[StudySpec] = Field(default_factory=_default_studies, min_length=1)
    sessions_per_subject: int = Field(1, ge=1, le=20)
    metrics: list[MetricSpec] = Field(default_factory=_default_metrics, min_length=1)
    noise: Literal["gg", "normal"] = "gg"
    seed: int = Field(0, ge=0)
    phantoms: bool = False
    phantom_dims: tuple[PositiveInt, PositiveInt, PositiveInt] = (3, 3, 3)

    @model_validator(mode="after")
    def _unique(self):
        for what, items in (("study", self.studies), ("metric", self.metrics)):
            names = [i.name for i in items]
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {what} names")
        if self.phantoms:
            names = {m.name for m in self.metrics}
            missing = set(METRIC_NAMES_DWI) - names
            if missing:
                raise ValueError(f"phantoms need metrics {sorted(missing)}")
        return self


class PipelineConfig(_Strict):
    paths: PathsConfig = Field(default_factory=PathsConfig)
    qa: QaConfig = Field(default_factory=QaConfig)
    combat: CombatConfig = Field(default_factory=CombatConfig)
    gamlss: GamlssConfig = Field(default_factory=GamlssConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    synth: SyntheticCohortSpec = Field(default_factory=SyntheticCohortSpec)
    threads: int = Field(1, ge=1)

    def with_overrides(self, seed=None, threads=None, output=None) -> "PipelineConfig":
        doc = self.model_dump()
        if seed is not None:
            doc["synth"]["seed"] = seed
            doc["inference"]["seed"] = seed
        if threads is not None:
            doc["threads"] = threads
        if output is not None:
            doc["paths"]["output"] = str(output)
        return validate_config(doc)

    def digest(self) -> str:
        text = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def _format(err: PydanticError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def validate_config(doc) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(doc or {})
    except PydanticError as exc:
        raise ValidationError("CONFIG_INVALID", _format(exc)) from None


def load_config(path=None, text=None, base_dir=None) -> PipelineConfig:
    """Read a YAML config; relative paths are resolved against its directory."""
    if text is None:
        if path is None:
            doc = {}
            base_dir = base_dir or Path.cwd()
        else:
            path = Path(path)
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise ValidationError("CONFIG_INVALID", f"cannot read {path}: {exc}") from None
            base_dir = base_dir or path.parent
    if text is not None:
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ValidationError("CONFIG_INVALID", f"malformed YAML: {exc}") from None
        if doc is not None and not isinstance(doc, dict):
            raise ValidationError("CONFIG_INVALID", "config must be a mapping")
    cfg = validate_config(doc)
    return _resolve(cfg, Path(base_dir or Path.cwd()))


def _resolve(cfg: PipelineConfig, base: Path) -> PipelineConfig:
    def fix(p):
        return None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))

    paths = cfg.paths
    doc = cfg.model_dump()
    doc["paths"] = {
        "participants": [fix(p) for p in paths.participants],
        "metrics": [fix(p) for p in paths.metrics],
        "column_map": fix(paths.column_map), "dwi_root": fix(paths.dwi_root),
        "mask_root": fix(paths.mask_root), "output": fix(paths.output),
    }
    return validate_config(doc)
