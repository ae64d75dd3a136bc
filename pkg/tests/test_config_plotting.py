import xml.etree.ElementTree as ET

import numpy as np
import pytest

from cohort_forge._errors import ValidationError
from cohort_forge.config import (MetricSpec, PipelineConfig, StudySpec, SyntheticCohortSpec,
                                 load_config, validate_config)
from cohort_forge.plotting import centile_svg, q_annotation
from cohort_forge.synth import (make_phantom, median_curve, prolate_eigenvalues, simulate_cohort,
                                sphere_directions, true_median)
from cohort_forge.dwi import fa, md


def test_defaults_validate():
    cfg = validate_config({})
    assert cfg.inference.B == 200 and cfg.qa.k == 5.0
    assert cfg.qa.outlier_order == "after_harmonization"
    assert "group" in cfg.gamlss.estimator_params()["mu_terms"]
    assert len(cfg.gamlss.age_grid.values()) == 76


@pytest.mark.parametrize("doc", [
    {"qa": {"k": 0}},
    {"qa": {"kk": 1}},
    {"gamlss": {"age_grid": {"start": 50, "stop": 40}}},
    {"gamlss": {"mu_terms": ["age"], "sigma_terms": ["age"]}},
    {"gamlss": {"mu_terms": ["age", "weight", "group"]}},
    {"inference": {"fdr_rate": 1.5}},
    {"synth": {"studies": [{"name": "a"}, {"name": "a"}]}},
    {"synth": {"metrics": [{"name": "x", "value_at_50": 1.0, "nu": 0}]}},
])
def test_invalid_configs(doc):
    with pytest.raises(ValidationError) as e:
        validate_config(doc)
    assert e.value.code == "CONFIG_INVALID"


def test_load_resolves_relative_paths(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("paths:\n  participants: [p.tsv]\n  output: out\n")
    cfg = load_config(path)
    assert cfg.paths.participants == [str(tmp_path / "p.tsv")]
    assert cfg.paths.output == str(tmp_path / "out")
    for text in ("[1, 2]\n", "a: [\n"):
        with pytest.raises(ValidationError):
            load_config(text=text)
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.yaml")


def test_overrides_and_digest():
    cfg = PipelineConfig()
    new = cfg.with_overrides(seed=9, threads=2, output="x")
    assert (new.synth.seed, new.inference.seed, new.threads, new.paths.output) == (9, 9, 2, "x")
    assert new.digest() != cfg.digest()
    assert PipelineConfig().digest() == cfg.digest()


def test_simulated_cohort_shape_and_determinism():
    spec = SyntheticCohortSpec(studies=[StudySpec(name="a", n_subjects=10, case_fraction=0.3),
                                        StudySpec(name="b", n_subjects=5)],
                               sessions_per_subject=2, seed=3)
    t = simulate_cohort(spec)
    assert len(t) == 30
    assert (t.group[t.study == "a"] == "case").sum() == 3 * 2
    assert t == simulate_cohort(spec)
    assert not np.isnan(t.values).any() and (t.values > 0).all()


def test_site_effects_are_applied():
    metric = MetricSpec(name="m", value_at_50=10.0, sigma=0.05, nu=1.0)
    spec = SyntheticCohortSpec(studies=[StudySpec(name="a", n_subjects=400, age_range=(49.9, 50.1)),
                                        StudySpec(name="b", n_subjects=400, gamma=2.0, delta=2.0,
                                                  age_range=(49.9, 50.1))],
                               metrics=[metric], noise="normal", seed=1)
    t = simulate_cohort(spec)
    a, b = (t.column("m")[(t.study == s) & (t.sex == "female")] for s in "ab")
    # gamma shifts by gamma * sigma * mu, delta scales the spread
    assert b.mean() - a.mean() == pytest.approx(1.0, abs=0.15)
    assert b.std() / a.std() == pytest.approx(2.0, rel=0.2)


def test_truth_helpers():
    metric = MetricSpec(name="m", value_at_50=2.0, slope=0.1, sigma=0.1, nu=1.0)
    assert median_curve(metric, 50.0) == pytest.approx(2.0)
    assert median_curve(metric, 60.0) == pytest.approx(2.0 * np.exp(0.1))
    assert true_median(metric, 50.0, noise="normal") == pytest.approx(2.0)
    assert true_median(metric, 50.0) < 2.0  # Gamma median sits below its mean
    d = sphere_directions(17)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    ev = prolate_eigenvalues(0.6, 8e-4)
    assert fa(*ev) == pytest.approx(0.6) and md(*ev) == pytest.approx(8e-4)
    dwi, mask, bvals, _ = make_phantom(0.3, 7e-4, 1000.0, dims=(2, 2, 2), n_dirs=12)
    assert dwi.dims == (2, 2, 2, len(bvals)) and mask.voxel_volume * 8 == pytest.approx(1000.0)


def test_q_annotation():
    assert q_annotation(0.2) == "q=0.200, not significant at 0.05"
    assert q_annotation(0.01, 0.1) == "q=0.010, significant at 0.1"
    assert q_annotation(None) == q_annotation(float("nan")) == "q=n/a"


def test_svg_is_well_formed_and_deterministic():
    ages = np.linspace(15, 90, 76)
    med = {"control": 0.5 - 0.001 * ages, "case": 0.49 - 0.001 * ages}
    bands = {g: (v - 0.01, v + 0.01) for g, v in med.items()}
    svg = centile_svg("mean_fa", ages, med, bands, q=0.03)
    assert svg == centile_svg("mean_fa", ages, med, bands, q=0.03)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert "q=0.030, significant at 0.05" in svg and "mean_fa" in svg
