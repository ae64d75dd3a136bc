"""Diffusion tensor fitting and scalar metrics.

Log-linear model ``ln S_i = ln S0 - b_i g_i^T D g_i`` solved by ordinary
least squares followed by one weighted pass with weights equal to the
squared predicted signal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._errors import NumericalError, ValidationError
from .gradients import B0_THRESHOLD, GradientScheme, select_shell, group_shells

# b is handled in ms/um^2 internally so the normal equations stay well scaled
_B_SCALE = 1e-3
_CHUNK = 65536
_COND_LIMIT = 1e12


def design_matrix(scheme: GradientScheme) -> np.ndarray:
    """Rows ``-b * [gx^2, gy^2, gz^2, 2gxgy, 2gxgz, 2gygz]`` with b in ms/um^2."""
    g = scheme.bvecs
    b = scheme.bvals * _B_SCALE
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    return -b[:, None] * np.column_stack([gx * gx, gy * gy, gz * gz, 2 * gx * gy, 2 * gx * gz, 2 * gy * gz])


def tensor_from_components(c) -> np.ndarray:
    """(..., 6) components (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz) -> (..., 3, 3) symmetric matrices."""
    c = np.asarray(c, dtype=float)
    D = np.empty(c.shape[:-1] + (3, 3))
    D[..., 0, 0], D[..., 1, 1], D[..., 2, 2] = c[..., 0], c[..., 1], c[..., 2]
    D[..., 0, 1] = D[..., 1, 0] = c[..., 3]
    D[..., 0, 2] = D[..., 2, 0] = c[..., 4]
    D[..., 1, 2] = D[..., 2, 1] = c[..., 5]
    return D


def eigen_sorted(D):
    """Eigenvalues in descending order with matching eigenvector columns."""
    w, v = np.linalg.eigh(D)
    return w[..., ::-1], v[..., :, ::-1]


def fa(l1, l2, l3):
    """Fractional anisotropy from eigenvalues; all-zero triples give 0."""
    l1, l2, l3 = (np.asarray(x, dtype=float) for x in (l1, l2, l3))
    mean = (l1 + l2 + l3) / 3
    num = (l1 - mean) ** 2 + (l2 - mean) ** 2 + (l3 - mean) ** 2
    den = l1 ** 2 + l2 ** 2 + l3 ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(1.5) * np.sqrt(num) / np.sqrt(den)
    out = np.where(den > 0, np.clip(out, 0.0, 1.0), 0.0)
    return out[()] if out.ndim == 0 else out


def md(l1, l2, l3):
    """Mean diffusivity, the trace over three."""
    out = (np.asarray(l1, dtype=float) + np.asarray(l2, dtype=float) + np.asarray(l3, dtype=float)) / 3
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class VoxelTensor:
    D: np.ndarray
    s0: float
    evals: np.ndarray
    evecs: np.ndarray

    @property
    def components(self) -> np.ndarray:
        D = self.D
        return np.array([D[0, 0], D[1, 1], D[2, 2], D[0, 1], D[0, 2], D[1, 2]])

    @property
    def clamped(self) -> bool:
        return bool((self.evals < 0).any())

    @property
    def clamped_evals(self) -> np.ndarray:
        return np.clip(self.evals, 0.0, None)

    @property
    def fa(self) -> float:
        return float(fa(*self.clamped_evals))

    @property
    def md(self) -> float:
        return float(md(*self.clamped_evals))


def _batched_wls(A, logS, mask):
    """Solve the OLS then one WLS pass for every row of ``logS``.

    ``mask`` zero-weights unusable volumes.  Returns coefficients and a
    per-voxel flag for well-conditioned systems.
    """
    def solve(W):
        AtWA = np.einsum("vn,np,nq->vpq", W, A, A)
        AtWy = np.einsum("vn,np,vn->vp", W, A, logS)
        cond = np.linalg.cond(AtWA)
        good = np.isfinite(cond) & (cond < _COND_LIMIT)
        AtWA[~good] = np.eye(A.shape[1])
        AtWy[~good] = 0.0
        return np.linalg.solve(AtWA, AtWy[..., None])[..., 0], good

    W = mask.astype(float)
    coef, good = solve(W)
    pred = coef @ A.T
    pred -= pred.max(axis=1, keepdims=True)
    coef2, good2 = solve(W * np.exp(2 * pred))
    return coef2, good & good2


def _prepare(scheme: GradientScheme, estimate_s0: bool):
    dw = scheme.bvals >= B0_THRESHOLD
    if estimate_s0:
        idx = np.arange(len(scheme))
        A = np.column_stack([np.ones(len(idx)), design_matrix(scheme)])
    else:
        idx = np.flatnonzero(dw)
        A = design_matrix(scheme.subset(idx))
    return idx, A


def fit_tensor_wls(signals, scheme: GradientScheme, b0_mean: float | None = None) -> VoxelTensor:
    """Fit one voxel.

    Parameters
    ----------
    signals : array_like, shape (n_volumes,)
    scheme : GradientScheme
    b0_mean : float, optional
        Non-diffusion-weighted reference signal.  When ``None``, ``ln S0`` is
        estimated as a seventh unknown from all volumes.

    Raises
    ------
    ValidationError
        ``RANK_DEFICIENT`` when the usable volumes do not determine the tensor;
        ``NONPOSITIVE_SIGNAL`` when more than half of them are <= 0.
    """
    signals = np.asarray(signals, dtype=float).reshape(-1)
    if len(signals) != len(scheme):
        raise ValidationError("COUNT_MISMATCH", f"{len(signals)} signals vs {len(scheme)} volumes")
    estimate_s0 = b0_mean is None
    if not estimate_s0 and not b0_mean > 0:
        raise ValidationError("NONPOSITIVE_SIGNAL", "b0 reference must be positive")
    idx, A = _prepare(scheme, estimate_s0)
    s = signals[idx]
    ok = s > 0
    if (~ok).sum() * 2 > len(s):
        raise ValidationError("NONPOSITIVE_SIGNAL", f"{int((~ok).sum())} of {len(s)} signals <= 0")
    if len(s) < A.shape[1] or np.linalg.matrix_rank(A[ok]) < A.shape[1]:
        raise ValidationError("RANK_DEFICIENT", "gradient design does not determine the tensor")
    logS = np.log(np.where(ok, s, 1.0))
    if not estimate_s0:
        logS = logS - np.log(b0_mean)
    coef, good = _batched_wls(A, logS[None], ok[None])
    if not good[0]:
        raise ValidationError("RANK_DEFICIENT", "ill-conditioned weighted system")
    coef = coef[0]
    if estimate_s0:
        s0, comps = float(np.exp(coef[0])), coef[1:]
    else:
        s0, comps = float(b0_mean), coef
    D = tensor_from_components(comps * _B_SCALE)
    evals, evecs = eigen_sorted(D)
    return VoxelTensor(D, s0, evals, evecs)


@dataclass
class TensorMaps:
    """Voxelwise fit results; invalid voxels carry NaN in ``fa``/``md``."""

    fa: np.ndarray
    md: np.ndarray
    evals: np.ndarray
    valid: np.ndarray
    clamped: np.ndarray


def fit_tensor_volume(dwi, scheme: GradientScheme, mask=None) -> TensorMaps:
    """Fit every masked voxel of a 4-D array ``(x, y, z, volume)``.

    Volumes with b < 50 s/mm^2 are averaged into the S0 reference; without
    any, ln S0 is estimated per voxel.  Voxels where more than half of the
    signals are <= 0, the reference is <= 0, or ``lambda1 < 0`` are invalid.
    """
    dwi = np.asarray(dwi, dtype=float)
    if dwi.ndim != 4 or dwi.shape[3] != len(scheme):
        raise ValidationError("DIMS_MISMATCH", f"dwi shape {dwi.shape} vs {len(scheme)} volumes")
    spatial = dwi.shape[:3]
    mask = np.ones(spatial, bool) if mask is None else np.asarray(mask).astype(bool)
    if mask.shape != spatial:
        raise ValidationError("DIMS_MISMATCH", f"mask {mask.shape} vs image {spatial}")
    b0 = scheme.b0_mask
    estimate_s0 = not b0.any()
    idx, A = _prepare(scheme, estimate_s0)
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise ValidationError("RANK_DEFICIENT", "gradient design does not determine the tensor")

    vox = np.flatnonzero(mask.reshape(-1))
    flat = dwi.reshape(-1, dwi.shape[3])
    n = vox.size
    evals_out = np.full((n, 3), np.nan)
    valid = np.zeros(n, bool)
    for start in range(0, n, _CHUNK):
        sl = slice(start, start + _CHUNK)
        sig = flat[vox[sl]]
        s = sig[:, idx]
        ok = s > 0
        usable = ok.sum(axis=1) * 2 >= s.shape[1]
        logS = np.log(np.where(ok, s, 1.0))
        if not estimate_s0:
            ref = sig[:, b0].mean(axis=1)
            usable &= ref > 0
            logS = logS - np.log(np.where(ref > 0, ref, 1.0))[:, None]
        coef, good = _batched_wls(A, logS, ok & usable[:, None])
        comps = coef[:, 1:] if estimate_s0 else coef
        evals, _ = eigen_sorted(tensor_from_components(comps * _B_SCALE))
        evals_out[sl] = evals
        valid[sl] = usable & good & ((ok.sum(axis=1)) >= A.shape[1])

    clamped = valid & (evals_out < 0).any(axis=1)
    valid &= ~(evals_out[:, 0] < 0)
    lam = np.clip(np.nan_to_num(evals_out), 0.0, None)
    fa_v = np.where(valid, fa(*lam.T), np.nan)
    md_v = np.where(valid, md(*lam.T), np.nan)

    def scatter(values, fill=np.nan, dtype=float):
        out = np.full(int(np.prod(spatial)), fill, dtype=dtype)
        out[vox] = values
        return out.reshape(spatial)

    ev_map = np.full(spatial + (3,), np.nan)
    ev_map.reshape(-1, 3)[vox] = evals_out
    return TensorMaps(scatter(fa_v), scatter(md_v), ev_map,
                      scatter(valid, False, bool), scatter(clamped, False, bool))


def aggregate_metrics(fa_map, md_map, tissue_mask, voxel_size):
    """Whole-brain mean FA, mean MD and TICV over a tissue mask.

    Means use mask voxels with a valid fit (finite FA and MD); TICV counts
    every mask voxel times the voxel volume in mm^3.
    """
    fa_map = np.asarray(fa_map, dtype=float)
    md_map = np.asarray(md_map, dtype=float)
    mask = np.asarray(tissue_mask).astype(bool)
    if fa_map.shape != mask.shape or md_map.shape != mask.shape:
        raise ValidationError("DIMS_MISMATCH", f"maps {fa_map.shape}/{md_map.shape} vs mask {mask.shape}")
    n_mask = int(mask.sum())
    if n_mask == 0:
        raise ValidationError("EMPTY_MASK", "tissue mask has no voxels")
    ok = mask & np.isfinite(fa_map) & np.isfinite(md_map)
    if not ok.any():
        raise NumericalError("NO_VALID_VOXELS", "no mask voxel has a valid tensor fit")
    dx, dy, dz = (float(v) for v in voxel_size)
    return float(fa_map[ok].mean()), float(md_map[ok].mean()), n_mask * dx * dy * dz


def session_metrics(dwi, scheme: GradientScheme, mask, max_b: float = 1500.0,
                    single_shell: bool = False, shell_tol: float = 50.0,
                    target_b: float = 1000.0) -> dict:
    """Fit one DWI session and summarize it as one output row.

    ``dwi`` and ``mask`` are :class:`~cohort_forge.dwi.nifti.Volume` objects.
    Volumes above ``max_b`` are ignored; with ``single_shell`` only the b0
    volumes and the shell nearest ``target_b`` are kept.
    """
    shells = group_shells(scheme.bvals, shell_tol)
    shell_b, shell_members = select_shell(shells, target_b)
    keep = scheme.bvals <= max_b
    if single_shell:
        members = np.zeros(len(scheme), bool)
        members[shell_members] = True
        keep &= members | scheme.b0_mask
    idx = np.flatnonzero(keep)
    sub = scheme.subset(idx)
    data = dwi.data[..., idx]
    mask_arr = mask.data.astype(bool)
    if mask_arr.shape != data.shape[:3]:
        raise ValidationError("DIMS_MISMATCH", f"mask {mask_arr.shape} vs image {data.shape[:3]}")
    maps = fit_tensor_volume(data, sub, mask_arr)
    mean_fa, mean_md, ticv = aggregate_metrics(maps.fa, maps.md, mask_arr, mask.voxel_size)
    return {
        "mean_fa": mean_fa, "mean_md": mean_md, "ticv": ticv,
        "n_mask_voxels": int(mask_arr.sum()),
        "n_clamped_voxels": int(maps.clamped.sum()),
        "shell_b": float(shell_b),
        "n_dirs_used": int((sub.bvals >= B0_THRESHOLD).sum()),
    }
