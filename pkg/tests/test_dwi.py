import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from cohort_forge._errors import CohortForgeError, ValidationError
from cohort_forge.dwi import (GradientScheme, Volume, aggregate_metrics, fa, fit_tensor_volume,
                              fit_tensor_wls, group_shells, md, read_bval_bvec, read_nifti,
                              select_shell, session_metrics, write_nifti)
from cohort_forge.synth import format_bval_bvec, make_phantom, phantom_scheme, prolate_eigenvalues

from oracles import fa_closed_form, forward_signal


# -- NIfTI -------------------------------------------------------------------
@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
@pytest.mark.parametrize("compress", [False, True])
def test_nifti_round_trip(dtype, compress):
    data = (np.arange(2 * 3 * 4 * 5) % 120).reshape(2, 3, 4, 5)
    vol = Volume.from_array(data, (1.5, 2.0, 2.5), dtype=dtype)
    blob = write_nifti(vol, compress=compress)
    assert (blob[:2] == b"\x1f\x8b") == compress
    back = read_nifti(blob)
    assert back.dims == (2, 3, 4, 5) and back.voxel_size == (1.5, 2.0, 2.5)
    assert back.raw.dtype == np.dtype(dtype)
    assert np.array_equal(back.data, data)
    assert back.voxel_volume == 7.5 and back.n_voxels == 24


def test_nifti_compressed_output_is_deterministic():
    vol = Volume.from_array(np.ones((2, 2, 2)))
    assert write_nifti(vol, True) == write_nifti(vol, True)


def _big_endian_image(values, slope=2.0, inter=1.0):
    # header written field by field in big-endian order
    hdr = bytearray(352)
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, *values.shape, 1, 1, 1, 1)
    struct.pack_into(">hh", hdr, 70, 4, 16)
    struct.pack_into(">8f", hdr, 76, 1, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into(">3f", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + values.astype(">i2").tobytes(order="F")


def test_nifti_big_endian_and_scaling():
    values = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    vol = read_nifti(gzip.compress(_big_endian_image(values)))
    assert vol.voxel_size == (2.0, 2.0, 2.0)
    assert np.array_equal(vol.data, values * 2.0 + 1.0)


@pytest.mark.parametrize("mutate, code", [
    (lambda b: b[:100], "TRUNCATED"),
    (lambda b: b[:-4], "TRUNCATED"),
    (lambda b: b[:344] + b"ni1\x00" + b[348:], "UNSUPPORTED_LAYOUT"),
    (lambda b: b[:344] + b"abcd" + b[348:], "BAD_MAGIC"),
    (lambda b: b[:70] + struct.pack("<h", 32) + b[72:], "UNSUPPORTED_DATATYPE"),
    (lambda b: b[:40] + struct.pack("<h", 9) + b[42:], "BAD_DIM"),
    (lambda b: b[:42] + struct.pack("<h", 0) + b[44:], "BAD_DIM"),
])
def test_nifti_errors(mutate, code):
    blob = write_nifti(Volume.from_array(np.ones((2, 2, 2))))
    with pytest.raises(ValidationError) as e:
        read_nifti(mutate(blob))
    assert e.value.code == code


# -- gradients ---------------------------------------------------------------
def test_read_bval_bvec_layouts():
    bvals, bvecs = phantom_scheme(12)
    bval, bvec = format_bval_bvec(bvals, bvecs)
    a = read_bval_bvec(bval, bvec)
    # one b-value per line and one vector per line
    one_per_line = "\n".join(bval.split()) + "\n"
    rows = "\n".join(" ".join(repr(float(v)) for v in g) for g in bvecs)
    b = read_bval_bvec(one_per_line, rows)
    assert np.array_equal(a.bvals, b.bvals) and np.allclose(a.bvecs, b.bvecs)
    assert a.b0_mask.sum() == 2


def test_read_bvec_renormalizes_near_unit():
    sch = read_bval_bvec("0 1000 1000\n", "5 1.5 0\n0 0 0\n0 0 1.2\n")
    assert np.allclose(np.linalg.norm(sch.bvecs[1:], axis=1), 1.0)
    assert np.array_equal(sch.bvecs[0], [0, 0, 0])


@pytest.mark.parametrize("bval, bvec, code", [
    ("0 1000\n", "0 1\n0 0\n", "MALFORMED_GRADIENTS"),
    ("0 x\n", "0 1\n0 0\n0 0\n", "MALFORMED_GRADIENTS"),
    ("0 1000\n1 2\n", "0 1\n0 0\n0 0\n", "MALFORMED_GRADIENTS"),
    ("0 1000 1000\n", "0 1\n0 0\n0 0\n", "COUNT_MISMATCH"),
    ("0 -5\n", "0 1\n0 0\n0 0\n", "NEGATIVE_BVAL"),
    ("0 1000\n", "0 3\n0 0\n0 0\n", "BAD_BVEC_NORM"),
])
def test_read_bval_bvec_errors(bval, bvec, code):
    with pytest.raises(ValidationError) as e:
        read_bval_bvec(bval, bvec)
    assert e.value.code == code


def test_gradient_scheme_errors():
    with pytest.raises(ValidationError) as e:
        GradientScheme(np.array([0.0, 1000.0]), np.zeros((2, 3)))
    assert e.value.code == "NON_UNIT_BVEC"
    with pytest.raises(ValidationError) as e:
        GradientScheme(np.array([0.0]), np.zeros((2, 3)))
    assert e.value.code == "COUNT_MISMATCH"


def test_group_shells_running_mean():
    shells = group_shells([0, 5, 990, 1010, 1040, 2000], tol=50)
    assert [m for _, m in shells] == [[0, 1], [2, 3, 4], [5]]
    assert shells[1][0] == pytest.approx(1013.333333333)
    with pytest.raises(ValidationError):
        group_shells([0], tol=0)
    with pytest.raises(ValidationError) as e:
        select_shell(group_shells([0, 10]))
    assert e.value.code == "NO_DWI_SHELL"


# -- tensor ------------------------------------------------------------------
evals3 = st.tuples(*(st.floats(0, 3e-3) for _ in range(3)))


@given(evals3)
def test_fa_md_properties(ev):
    f = fa(*ev)
    assert 0.0 <= f <= 1.0
    assert f == pytest.approx(fa_closed_form(*ev), abs=1e-12)
    assert md(*ev) == pytest.approx(sum(ev) / 3)
    assert fa(*[3.7 * v for v in ev]) == pytest.approx(f, abs=1e-12)


def test_fa_limits():
    assert fa(1e-3, 1e-3, 1e-3) == pytest.approx(0.0, abs=1e-15)
    assert fa(1.0, 0.0, 0.0) == pytest.approx(1.0)
    assert fa(0.0, 0.0, 0.0) == 0.0


@given(st.floats(0.05, 0.9), st.floats(3e-4, 1.5e-3), st.integers(0, 10_000))
def test_fit_is_rotation_invariant(fa_t, md_t, seed):
    bvals, bvecs = phantom_scheme(30, n_high=0)
    sch = GradientScheme(bvals, bvecs)
    R = special_ortho_group.rvs(3, random_state=seed)
    D = R @ np.diag(prolate_eigenvalues(fa_t, md_t)) @ R.T
    t = fit_tensor_wls(forward_signal(D, bvals, bvecs, 800.0), sch)
    assert t.fa == pytest.approx(fa_t, abs=1e-9)
    assert t.md == pytest.approx(md_t, rel=1e-9)
    assert t.s0 == pytest.approx(800.0, rel=1e-9)


def test_fit_errors():
    bvals, bvecs = phantom_scheme(6, n_high=0)
    sch = GradientScheme(bvals, bvecs)
    with pytest.raises(ValidationError) as e:
        fit_tensor_wls(np.ones(3), sch)
    assert e.value.code == "COUNT_MISMATCH"
    with pytest.raises(ValidationError) as e:
        fit_tensor_wls(np.zeros(len(bvals)), sch)
    assert e.value.code == "NONPOSITIVE_SIGNAL"
    # five directions cannot determine six tensor components
    few = GradientScheme(bvals[:7], bvecs[:7])
    with pytest.raises(ValidationError) as e:
        fit_tensor_wls(np.ones(7), few)
    assert e.value.code == "RANK_DEFICIENT"
    with pytest.raises(ValidationError) as e:
        fit_tensor_volume(np.ones((2, 2, 2, 3)), sch)
    assert e.value.code == "DIMS_MISMATCH"


def test_volume_fit_marks_bad_voxels_invalid():
    bvals, bvecs = phantom_scheme(20, n_high=0)
    sch = GradientScheme(bvals, bvecs)
    sig = forward_signal(np.diag([1.5e-3, 5e-4, 5e-4]), bvals, bvecs, 1000.0)
    dwi = np.broadcast_to(sig, (2, 2, 1, len(bvals))).copy()
    dwi[0, 0, 0] = 0.0
    maps = fit_tensor_volume(dwi, sch)
    assert not maps.valid[0, 0, 0] and np.isnan(maps.fa[0, 0, 0])
    assert maps.valid.sum() == 3
    mask = np.zeros((2, 2, 1), bool)
    mask[1, 1, 0] = True
    masked = fit_tensor_volume(dwi, sch, mask)
    assert masked.valid.sum() == 1


def test_aggregate_metrics_errors_and_ticv():
    fa_map = np.array([[[0.2, np.nan]]])
    md_map = np.array([[[1e-3, np.nan]]])
    out = aggregate_metrics(fa_map, md_map, np.ones((1, 1, 2)), (2.0, 2.0, 2.0))
    assert out == (0.2, 1e-3, 16.0)
    with pytest.raises(ValidationError) as e:
        aggregate_metrics(fa_map, md_map, np.zeros((1, 1, 2)), (1, 1, 1))
    assert e.value.code == "EMPTY_MASK"
    with pytest.raises(CohortForgeError) as e:
        aggregate_metrics(fa_map, md_map, np.array([[[0, 1]]]), (1, 1, 1))
    assert e.value.code == "NO_VALID_VOXELS"


@pytest.mark.parametrize("single_shell", [False, True])
def test_session_metrics_on_phantom(single_shell):
    dwi, mask, bvals, bvecs = make_phantom(0.45, 7e-4, 1.4e6, dims=(3, 3, 2), n_dirs=24)
    sch = GradientScheme(bvals, bvecs)
    out = session_metrics(read_nifti(write_nifti(dwi)), sch, read_nifti(write_nifti(mask)),
                          single_shell=single_shell)
    assert out["mean_fa"] == pytest.approx(0.45, abs=1e-9)
    assert out["mean_md"] == pytest.approx(7e-4, rel=1e-9)
    assert out["ticv"] == pytest.approx(1.4e6, rel=1e-5)
    # the two b=2000 volumes are ignored
    assert (out["shell_b"], out["n_dirs_used"], out["n_mask_voxels"]) == (1000.0, 24, 18)


@pytest.mark.parametrize("bvals, means", [
    ([0, 5, 995, 1000, 1005, 2000], [2.5, 1000.0, 2000.0]),
    ([0, 1000], [0.0, 1000.0]),
    # traced by hand: 940 joins 900 (mean 920), 980 is 60 from 920 and opens a shell
    ([900, 940, 980], [920.0, 980.0]),
])
def test_group_shells_traced_examples(bvals, means):
    assert [b for b, _ in group_shells(bvals, 50.0)] == pytest.approx(means)


@pytest.mark.parametrize("shells, expected", [([0.0, 900.0, 2000.0], 900.0), ([0.0, 700.0, 1300.0], 700.0)])
def test_select_shell_nearest_and_tie(shells, expected):
    assert select_shell([(b, [i]) for i, b in enumerate(shells)])[0] == expected


@pytest.mark.parametrize("D", [0.7e-3 * np.eye(3), np.diag([1.7e-3, 0.3e-3, 0.2e-3])])
def test_tensor_recovery_32_directions(D):
    from cohort_forge.synth import sphere_directions
    bvecs = np.vstack([np.zeros((1, 3)), sphere_directions(32)])
    bvals = np.r_[0.0, np.full(32, 1000.0)]
    t = fit_tensor_wls(forward_signal(D, bvals, bvecs, 1000.0), GradientScheme(bvals, bvecs))
    assert np.abs(t.D - D).max() / np.abs(D).max() < 1e-6


def test_fa_md_reference_values():
    ev = (1.7e-3, 0.3e-3, 0.2e-3)
    assert fa(*ev) == pytest.approx(0.836, abs=5e-4)
    assert md(*ev) == pytest.approx(0.7333e-3, rel=1e-4)


def test_isotropic_phantom_md():
    dwi, mask, bvals, bvecs = make_phantom(0.0, 0.7e-3, 1000.0, dims=(2, 2, 2), n_dirs=30)
    out = session_metrics(dwi, GradientScheme(bvals, bvecs), mask)
    assert abs(out["mean_md"] - 0.7e-3) < 1e-6 * 0.7e-3
    assert out["mean_fa"] == pytest.approx(0.0, abs=1e-6)


def test_twelve_volumes_suffice():
    from cohort_forge.dwi import shell_sufficiency
    bvals = np.r_[0.0, 0.0, np.full(12, 1000.0)]
    bvecs = np.vstack([np.zeros((2, 3)), sphere_dirs(12)])
    assert shell_sufficiency(GradientScheme(bvals, bvecs)) == (True, 12)


def sphere_dirs(n):
    from cohort_forge.synth import sphere_directions
    return sphere_directions(n)
