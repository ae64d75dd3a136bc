"""Synthetic multi-study cohorts with known truth.

Metrics follow smooth age curves with sex and case/control effects, noise
from the generalized Gamma family (or Normal), and per-study additive and
multiplicative site effects.  Optionally each session gets a tiny DWI
phantom built by the forward tensor model, so the diffusion stage can be
checked end to end against the tabulated metrics.
"""
from __future__ import annotations

import numpy as np

from .cohort import MetricTable, SessionRecord
from .config import SyntheticCohortSpec
from .dwi.nifti import Volume
from .gamlss.distribution import gg_ppf, gg_rvs

SCANNERS = ("Siemens Prisma", "GE Discovery MR750", "Philips Achieva")


def median_curve(metric, age, male=0.0, case=0.0):
    """Location ``mu`` of a metric at the given covariates."""
    t = (np.asarray(age, dtype=float) - 50.0) / 10.0
    mu = metric.value_at_50 * np.exp(metric.slope * t + metric.curvature * t * t)
    mu = mu * (1.0 + metric.sex_effect * np.asarray(male, dtype=float))
    return mu * (1.0 + metric.group_shift * metric.sigma * np.asarray(case, dtype=float))


def true_median(metric, age, male=0.0, case=0.0, noise="gg"):
    """Median of the simulated metric (before site effects)."""
    mu = median_curve(metric, age, male, case)
    if noise == "normal":
        return mu
    return gg_ppf(0.5, mu, metric.sigma, metric.nu)


def simulate_cohort(spec: SyntheticCohortSpec) -> MetricTable:
    """Draw demographics and metric values for every session."""
    rng = np.random.default_rng(spec.seed)
    records, rows = [], []
    for si, study in enumerate(spec.studies):
        n = study.n_subjects
        lo, hi = study.age_range
        base_age = rng.uniform(lo, hi, n)
        male = rng.random(n) < 0.5
        n_case = int(round(study.case_fraction * n))
        case = np.zeros(n, dtype=bool)
        case[rng.permutation(n)[:n_case]] = True
        gcs = rng.integers(3, 16, n)
        scanner = SCANNERS[si % len(SCANNERS)]
        for i in range(n):
            for s in range(spec.sessions_per_subject):
                age = float(np.round(min(base_age[i] + s, 130.0), 2))
                records.append(SessionRecord(
                    subject_id=f"sub-{si + 1:02d}{i + 1:04d}", session_id=f"ses-{s + 1:02d}",
                    study_id=study.name, age=age, sex="male" if male[i] else "female",
                    group="case" if case[i] else "control",
                    gcs=int(gcs[i]) if case[i] else 15, scanner_type=scanner,
                    scanner_id=f"{study.name}-scanner", scanner_location=f"site-{si + 1}",
                    has_t1w=True, has_dwi=spec.phantoms and study.n_dirs > 0))
                rows.append((age, float(male[i]), float(case[i]), si))
    demo = np.array(rows)
    values = np.empty((len(records), len(spec.metrics)))
    for j, metric in enumerate(spec.metrics):
        mu = median_curve(metric, demo[:, 0], demo[:, 1], demo[:, 2])
        if spec.noise == "gg":
            y0 = gg_rvs(mu, metric.sigma, metric.nu, rng=rng)
        else:
            y0 = mu * (1.0 + metric.sigma * rng.standard_normal(len(mu)))
        study_idx = demo[:, 3].astype(int)
        gamma = np.array([st.gamma for st in spec.studies])[study_idx]
        delta = np.array([st.delta for st in spec.studies])[study_idx]
        values[:, j] = mu + metric.sigma * mu * gamma + delta * (y0 - mu)
    return MetricTable(records, [m.name for m in spec.metrics], values)


# -- DWI phantoms -------------------------------------------------------
def sphere_directions(n: int) -> np.ndarray:
    """Deterministic near-uniform unit vectors (Fibonacci lattice on the sphere)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def phantom_scheme(n_dirs: int, b: float = 1000.0, n_b0: int = 2, high_b: float = 2000.0,
                   n_high: int = 2):
    """b0 volumes, ``n_dirs`` directions at ``b`` and a few high-b volumes.

    The high-b volumes lie outside the fitting range and must be ignored.
    """
    dirs = sphere_directions(n_dirs)
    high = sphere_directions(n_high) if n_high else np.zeros((0, 3))
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dirs, b), np.full(n_high, high_b)])
    bvecs = np.vstack([np.zeros((n_b0, 3)), dirs, high])
    return bvals, bvecs


def prolate_eigenvalues(fa: float, md: float) -> np.ndarray:
    """Eigenvalues ``(l1, l2, l2)`` with the given FA and MD."""
    if not 0 <= fa < 1:
        raise ValueError("FA must lie in [0, 1) for a prolate tensor")
    t = np.sqrt(fa * fa / (3.0 - 2.0 * fa * fa))
    return np.array([md * (1 + 2 * t), md * (1 - t), md * (1 - t)])


def make_phantom(fa: float, md: float, ticv: float, dims=(3, 3, 3), n_dirs: int = 30,
                 s0: float = 1000.0):
    """Uniform-tensor DWI phantom whose whole-brain metrics equal the targets.

    Returns ``(dwi, mask, bvals, bvecs)``; the mask covers every voxel and
    the isotropic voxel size is chosen so that the mask volume is ``ticv``.
    """
    bvals, bvecs = phantom_scheme(n_dirs)
    D = np.diag(prolate_eigenvalues(fa, md))
    adc = np.einsum("ij,jk,ik->i", bvecs, D, bvecs)
    signal = s0 * np.exp(-bvals * adc)
    nx, ny, nz = dims
    data = np.broadcast_to(signal, (nx, ny, nz, len(bvals)))
    voxel = (ticv / (nx * ny * nz)) ** (1.0 / 3.0)
    size = (voxel, voxel, voxel)
    dwi = Volume.from_array(data, size, dtype=np.float64)
    mask = Volume.from_array(np.ones(dims), size, dtype=np.uint8)
    return dwi, mask, bvals, bvecs


def format_bval_bvec(bvals, bvecs) -> tuple[str, str]:
    bval = " ".join(f"{b:g}" for b in bvals) + "\n"
    bvec = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(bvecs).T)
    return bval, bvec
