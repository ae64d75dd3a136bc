"""Gradient schemes, shell grouping and the shell sufficiency rule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._errors import ValidationError

B0_THRESHOLD = 50.0
SHELL_RANGE = (500.0, 1500.0)
MIN_SHELL_DIRS = 12
TARGET_B = 1000.0
UNIT_TOL = 1e-3


@dataclass(frozen=True)
class GradientScheme:
    """Per-volume b-values (s/mm^2) and gradient directions."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=float).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=float).reshape(-1, 3)
        if len(bvals) != len(bvecs):
            raise ValidationError("COUNT_MISMATCH", f"{len(bvals)} b-values vs {len(bvecs)} vectors")
        if (bvals < 0).any() or not np.isfinite(bvals).all():
            raise ValidationError("NEGATIVE_BVAL", "b-values must be finite and >= 0")
        norms = np.linalg.norm(bvecs, axis=1)
        ok = (norms == 0) | (np.abs(norms - 1) <= UNIT_TOL)
        if not ok.all():
            raise ValidationError("NON_UNIT_BVEC", f"vector norms {norms[~ok]}")
        if ((norms == 0) & (bvals >= B0_THRESHOLD)).any():
            raise ValidationError("NON_UNIT_BVEC", "zero vector on a diffusion-weighted volume")
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self):
        return len(self.bvals)

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals < B0_THRESHOLD

    def subset(self, idx) -> "GradientScheme":
        return GradientScheme(self.bvals[idx], self.bvecs[idx])


def _rows(text) -> list[list[float]]:
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    rows = []
    for line in text.splitlines():
        if line.strip():
            try:
                rows.append([float(tok) for tok in line.split()])
            except ValueError as exc:
                raise ValidationError("MALFORMED_GRADIENTS", str(exc)) from None
    return rows


def read_bval_bvec(bval_text, bvec_text) -> GradientScheme:
    """Parse FSL-style ``.bval`` / ``.bvec`` text.

    Diffusion-weighted vectors whose norm lies in [0.5, 2] are renormalized;
    anything further from unit length is rejected.
    """
    bval_rows = _rows(bval_text)
    if len(bval_rows) != 1:
        # one value per line is also seen in the wild
        if all(len(r) == 1 for r in bval_rows):
            bval_rows = [[r[0] for r in bval_rows]]
        else:
            raise ValidationError("MALFORMED_GRADIENTS", "bval must be a single row")
    bvals = np.array(bval_rows[0] if bval_rows else [], dtype=float)
    vec_rows = _rows(bvec_text)
    if len(vec_rows) == len(bvals) and all(len(r) == 3 for r in vec_rows) and len(bvals) != 3:
        vecs = np.array(vec_rows, dtype=float)
    else:
        if len(vec_rows) != 3:
            raise ValidationError("MALFORMED_GRADIENTS", f"bvec needs 3 rows, got {len(vec_rows)}")
        lengths = {len(r) for r in vec_rows}
        if len(lengths) != 1:
            raise ValidationError("COUNT_MISMATCH", f"bvec rows have lengths {sorted(lengths)}")
        vecs = np.array(vec_rows, dtype=float).T
    if len(vecs) != len(bvals):
        raise ValidationError("COUNT_MISMATCH", f"{len(bvals)} b-values vs {len(vecs)} vectors")
    if (bvals < 0).any():
        raise ValidationError("NEGATIVE_BVAL", "negative b-value")
    norms = np.linalg.norm(vecs, axis=1)
    dw = bvals >= B0_THRESHOLD
    fix = dw & (np.abs(norms - 1) > UNIT_TOL)
    if ((norms[fix] < 0.5) | (norms[fix] > 2)).any():
        raise ValidationError("BAD_BVEC_NORM", f"unrecoverable vector norms {norms[fix]}")
    vecs[fix] /= norms[fix, None]
    # b0 volumes may carry arbitrary vectors; they carry no direction
    off_unit = ~dw & (norms != 0) & (np.abs(norms - 1) > UNIT_TOL)
    vecs[off_unit] = 0.0
    return GradientScheme(bvals, vecs)


def group_shells(bvals, tol: float = 50.0) -> list[tuple[float, list[int]]]:
    """Greedy shell clustering in ascending b order.

    A volume joins the current shell when within ``tol`` of the shell's
    running mean, otherwise it opens a new shell.  Returns
    ``(mean b, member indices)`` pairs in ascending b.
    """
    if not tol > 0:
        raise ValidationError("BAD_TOL", "tol must be positive")
    bvals = np.asarray(bvals, dtype=float)
    order = np.argsort(bvals, kind="stable")
    shells: list[tuple[float, list[int]]] = []
    total = 0.0
    for i in order:
        b = bvals[i]
        if shells and abs(b - shells[-1][0]) <= tol:
            members = shells[-1][1] + [int(i)]
            total += b
            shells[-1] = (total / len(members), members)
        else:
            total = b
            shells.append((float(b), [int(i)]))
    return shells


def select_shell(shells, target: float = TARGET_B):
    """Return the diffusion-weighted shell nearest ``target``; ties go to the lower b."""
    candidates = [s for s in shells if s[0] >= B0_THRESHOLD]
    if not candidates:
        raise ValidationError("NO_DWI_SHELL", "no shell with b > 0")
    return min(candidates, key=lambda s: (abs(s[0] - target), s[0]))


def shell_sufficiency(scheme: GradientScheme, b_range=SHELL_RANGE,
                      min_count: int = MIN_SHELL_DIRS) -> tuple[bool, int]:
    """Count volumes with ``b_range[0] <= b <= b_range[1]``; sufficient iff count >= ``min_count``."""
    lo, hi = b_range
    count = int(((scheme.bvals >= lo) & (scheme.bvals <= hi)).sum())
    return count >= min_count, count


def fitting_volumes(scheme: GradientScheme, max_b: float = SHELL_RANGE[1]) -> np.ndarray:
    """Indices of volumes used for tensor fitting: everything with ``b <= max_b``."""
    return np.flatnonzero(scheme.bvals <= max_b)
