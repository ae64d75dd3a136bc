import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cohort_forge._errors import ValidationError
from cohort_forge.cohort import (ColumnMap, MergeReport, MetricTable, SessionRecord,
                                 load_column_maps, merge_metrics, normalize_cde,
                                 parse_participants, write_participants)


def _tsv(*rows):
    return ("\n".join("\t".join(r) for r in rows) + "\n").encode()


def test_record_validation_codes():
    with pytest.raises(ValidationError) as e:
        SessionRecord("", "ses-01", "s")
    assert e.value.code == "MISSING_SUBJECT_ID"
    for kwargs, code in [({"age": 131.0}, "AGE_RANGE"), ({"age": float("nan")}, "AGE_RANGE"),
                         ({"gcs": 2}, "GCS_RANGE"), ({"sex": "F"}, "BAD_SEX"),
                         ({"group": "tbi"}, "BAD_GROUP")]:
        with pytest.raises(ValidationError) as e:
            SessionRecord("sub-1", "ses-01", "s", **kwargs)
        assert e.value.code == code


def test_record_defaults_assume_images_present():
    r = SessionRecord("sub-1", "ses-01", "s")
    assert r.has_t1w and r.has_dwi
    assert r.key == ("sub-1", "ses-01")


def test_parse_default_synonyms_and_session():
    data = _tsv(("participant_id", "age", "sex", "group", "gcs"),
                ("sub-1", "34", "F", "TBI", "14"),
                ("sub-2", "n/a", "1", "0", "2"),
                ("sub-3", "40", "x", "control", ""))
    warnings = []
    recs = parse_participants(data, "study-a", warnings=warnings)
    assert [r.session_id for r in recs] == ["ses-01"] * 3
    assert [r.study_id for r in recs] == ["study-a"] * 3
    assert (recs[0].sex, recs[0].group, recs[0].gcs, recs[0].age) == ("female", "case", 14, 34.0)
    assert (recs[1].sex, recs[1].group, recs[1].age, recs[1].gcs) == ("male", "control", None, None)
    assert recs[2].sex == "unknown"
    # unmappable sex and out-of-range gcs are reported
    assert any("sex" in w for w in warnings) and any("gcs" in w for w in warnings)


def test_parse_errors():
    with pytest.raises(ValidationError) as e:
        parse_participants(b"", "s")
    assert e.value.code == "MISSING_HEADER"
    with pytest.raises(ValidationError) as e:
        parse_participants(_tsv(("name", "age"), ("a", "3")), "s")
    assert e.value.code == "MISSING_SUBJECT_COLUMN"
    with pytest.raises(ValidationError) as e:
        parse_participants(_tsv(("participant_id", "session_id"), ("a", "1"), ("a", "1")), "s")
    assert e.value.code == "DUPLICATE_SESSION"
    with pytest.raises(ValidationError) as e:
        parse_participants(_tsv(("participant_id", "age"), ("", "3")), "s")
    assert e.value.code == "MISSING_SUBJECT_ID"


def test_column_map_yaml():
    maps = load_column_maps(
        "studies:\n  site-x:\n    columns: {age: age_at_scan, group: dx}\n"
        "    group: {case: [mTBI], control: [HC]}\n")
    data = _tsv(("participant_id", "age_at_scan", "sex", "dx"),
                ("a", "20", "m", "mTBI"), ("b", "30", "f", "HC"))
    recs = parse_participants(data, "site-x", maps)
    assert [(r.age, r.group) for r in recs] == [(20.0, "case"), (30.0, "control")]
    # built-in codings still apply next to the extra synonyms
    assert ColumnMap(group_synonyms={"case": ("mTBI",)}).group_table["tbi"] == "case"


@pytest.mark.parametrize("text, code", [("other: 1\n", "CONFIG_UNKNOWN_KEY"),
                                        ("default: {colums: {}}\n", "CONFIG_UNKNOWN_KEY"),
                                        ("default: {columns: {height: h}}\n", "CONFIG_UNKNOWN_KEY"),
                                        ("default: {sex: {other: [o]}}\n", "CONFIG_BAD_LEVEL")])
def test_column_map_errors(text, code):
    with pytest.raises(ValidationError) as e:
        load_column_maps(text)
    assert e.value.code == code


def test_normalize_out_of_range_age_becomes_missing():
    warnings = []
    out = normalize_cde({"participant_id": "a", "age": "200", "has_dwi": "no"}, warnings=warnings)
    assert out["age"] is None and out["has_dwi"] is False and out["has_t1w"] is True
    assert warnings


_levels = st.sampled_from


@st.composite
def _records(draw):
    n = draw(st.integers(1, 8))
    out = []
    for i in range(n):
        out.append(SessionRecord(
            subject_id=f"sub-{i}", session_id=draw(_levels(["ses-01", "ses-02"])),
            study_id=draw(_levels(["a", "b"])),
            age=draw(st.none() | st.floats(0, 130, allow_nan=False)),
            sex=draw(_levels(["female", "male", "unknown"])),
            group=draw(_levels(["case", "control", "unknown"])),
            gcs=draw(st.none() | st.integers(3, 15)),
            scanner_id=draw(st.none() | st.sampled_from(["s1", "s2"])),
            has_t1w=draw(st.booleans()), has_dwi=draw(st.booleans())))
    return out


@given(_records())
def test_participants_round_trip(records):
    assert parse_participants(write_participants(records).encode(), "ignored") == records


def _table():
    recs = [SessionRecord(f"sub-{i}", "ses-01", "a" if i < 3 else "b", age=20.0 + i) for i in range(5)]
    return MetricTable(recs, ["fa", "md"], np.arange(10.0).reshape(5, 2))


def test_metric_table_is_immutable():
    t = _table()
    with pytest.raises(ValueError):
        t.values[0, 0] = 1.0
    src = np.zeros((5, 2))
    t2 = t.with_values(src)
    src[0, 0] = 9.0
    assert t2.values[0, 0] == 0.0


def test_metric_table_accessors():
    t = _table()
    assert t.shape == (5, 2)
    assert list(t.column("md")) == [1, 3, 5, 7, 9]
    with pytest.raises(KeyError):
        t.column("ticv")
    assert t.select(["md"]).columns == ("md",)
    assert len(t.subset(t.study == "b")) == 2
    frame = t.to_frame()
    assert list(frame.columns[:6]) == ["subject_id", "session_id", "study_id", "age", "sex", "group"]


@pytest.mark.parametrize("columns, values, code", [(["a", "a"], [[1, 2]], "DUPLICATE_COLUMN"),
                                                   (["a"], [[np.inf]], "NON_FINITE")])
def test_metric_table_errors(columns, values, code):
    with pytest.raises(ValidationError) as e:
        MetricTable([SessionRecord("s", "ses-01", "a")], columns, values)
    assert e.value.code == code


def test_csv_round_trip_with_missing():
    t = _table()
    vals = np.array(t.values)
    vals[1, 0] = np.nan
    t = t.with_values(vals)
    assert "NA" in t.to_csv()
    assert merge_metrics(t.records, t.to_csv()) == t


def test_merge_report_and_order():
    t = _table()
    csv = "subject_id,session_id,fa\nsub-4,ses-01,1\nghost,ses-01,2\nsub-0,,3\n"
    report = MergeReport()
    out = merge_metrics(t.records, csv, report)
    assert out.keys == [("sub-0", "ses-01"), ("sub-4", "ses-01")]
    assert list(out.column("fa")) == [3.0, 1.0]
    assert report.unmatched == [("ghost", "ses-01")] and report.n_matched == 2


@pytest.mark.parametrize("csv, code", [
    ("", "MALFORMED_CSV"),
    ("id,fa\n", "MALFORMED_CSV"),
    ("subject_id,session_id,fa\nsub-0,ses-01\n", "MALFORMED_CSV"),
    ("subject_id,session_id,fa\nsub-0,ses-01,abc\n", "MALFORMED_CSV"),
    ("subject_id,session_id,fa\nsub-0,ses-01,inf\n", "MALFORMED_CSV"),
    ("subject_id,session_id,fa\nnobody,ses-01,1\n", "NO_MATCHING_ROWS"),
    ("subject_id,session_id,fa\nsub-0,ses-01,1\nsub-0,ses-01,2\n", "DUPLICATE_SESSION"),
])
def test_merge_errors(csv, code):
    with pytest.raises(ValidationError) as e:
        merge_metrics(_table().records, csv)
    assert e.value.code == code
