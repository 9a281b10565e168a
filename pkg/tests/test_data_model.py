from __future__ import annotations

import csv
import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthmtl.data_model import (
    ALL_TASKS,
    ConfigurationError,
    Dataset,
    LabelSchema,
    RemapTable,
    Sample,
    TaskKind,
    bucketize_age,
    clean_dataset,
    load_manifest,
    load_remap_config,
    merge_datasets,
    remap_labels,
    shuffle_dataset,
    split_dataset,
    write_manifest,
)

from conftest import AGE, EXPR, GAZE, make_dataset, tiny_image

SYNTH_B_AGES = ["0-3", "4-12", "13-18", "19-30", "31-50", "50+"]
UNIFIED = LabelSchema({
    GAZE: ("infotainment", "ext_mirror", "int_mirror", "rear", "road", "passenger"),
    AGE: ("teen", "adult", "elderly"),
    EXPR: ("happy", "surprised", "frown", "neutral", "sad"),
})


def _write_csv(path, rows, header=("image_path", "gaze", "age", "expression")):
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, header)
        w.writeheader()
        for r in rows:
            w.writerow(r)


@pytest.fixture
def image_file(tmp_path):
    p = tmp_path / "img.npy"
    np.save(p, tiny_image(7))
    return p


# -- types ---------------------------------------------------------------

def test_exactly_three_task_kinds():
    assert {t.value for t in TaskKind} == {"gaze", "age", "expression"}
    assert len(ALL_TASKS) == 3


def test_schema_rejects_duplicates_and_empty():
    with pytest.raises(ValueError):
        LabelSchema({GAZE: ("a", "a")})
    with pytest.raises(ValueError):
        LabelSchema({GAZE: ()})


def test_dataset_rejects_label_outside_schema():
    with pytest.raises(ValueError, match="not in schema"):
        Dataset((Sample("x", tiny_image(), {GAZE: "nope"}),), LabelSchema({GAZE: ("road",)}))


def test_sample_requires_hwc_image():
    with pytest.raises(ValueError):
        Sample("x", np.zeros((3, 4, 4)))


# -- manifests --------------------------------------------------------------

def test_manifest_three_valid_rows(tmp_path, image_file):
    rows = [{"image_path": image_file.name, "gaze": "road", "age": "adult", "expression": "happy"}] * 3
    _write_csv(tmp_path / "m.csv", rows)
    d = load_manifest(tmp_path / "m.csv", UNIFIED)
    assert d.size == 3
    assert d.load_report.rows_loaded == 3


def test_manifest_empty_field_is_absent(tmp_path, image_file):
    _write_csv(tmp_path / "m.csv", [{"image_path": image_file.name, "gaze": "road", "age": "adult",
                                     "expression": ""}])
    d = load_manifest(tmp_path / "m.csv", UNIFIED)
    assert EXPR not in d[0].labels
    assert d[0].labels[GAZE] == "road"


def test_manifest_unparseable_label_is_dropped_and_counted(tmp_path, image_file):
    _write_csv(tmp_path / "m.csv", [
        {"image_path": image_file.name, "gaze": "moon", "age": "adult", "expression": "sad"}])
    d = load_manifest(tmp_path / "m.csv", UNIFIED)
    assert len(d) == 1 and GAZE not in d[0].labels
    assert d.load_report.unparseable == ((1, "gaze", "moon"),)


def test_manifest_missing_image_skipped(tmp_path, image_file):
    _write_csv(tmp_path / "m.csv", [
        {"image_path": image_file.name, "gaze": "road"},
        {"image_path": "nope.png", "gaze": "road"}])
    d = load_manifest(tmp_path / "m.csv", UNIFIED)
    assert len(d) == 1
    assert d.load_report.missing_images == ("nope.png",)


def test_manifest_missing_file_is_fatal(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "absent.csv", UNIFIED)


def test_manifest_synth_a_scale(tmp_path, image_file):
    rows = [{"image_path": image_file.name, "gaze": "road", "age": str(20 + i % 40),
             "expression": "neutral"} for i in range(10_000)]
    _write_csv(tmp_path / "m.csv", rows)
    schema = LabelSchema({GAZE: UNIFIED.categories[GAZE], EXPR: UNIFIED.categories[EXPR]})
    d = load_manifest(tmp_path / "m.csv", schema)
    assert d.size == 10_000
    # raw numeric ages pass through an unconstrained age task
    assert d[5].labels[AGE] == "25"


def test_manifest_jsonl_roundtrip(tmp_path):
    d = make_dataset([{GAZE: "road", AGE: "adult"}, {GAZE: "rear"}], UNIFIED)
    path = write_manifest(d, tmp_path, fmt="jsonl")
    back = load_manifest(path, UNIFIED, name="d")
    assert back.image_ids == d.image_ids
    assert [s.labels for s in back] == [s.labels for s in d]
    np.testing.assert_array_equal(back[1].image, d[1].image)


def test_manifest_csv_roundtrip_with_schema_file(tmp_path):
    d = make_dataset([{GAZE: "road", EXPR: "sad"}, {GAZE: "rear", EXPR: "happy"}], UNIFIED)
    path = write_manifest(d, tmp_path)
    schema = LabelSchema.from_dict(json.loads((tmp_path / "schema.json").read_text()))
    assert schema == UNIFIED
    assert [s.labels for s in load_manifest(path, schema)] == [s.labels for s in d]


# -- cleaning ---------------------------------------------------------------

def test_clean_filters_by_required_tasks():
    rows = [{GAZE: "a", AGE: "x"}, {AGE: "x"}, {GAZE: "b"}, {AGE: "y"}, {GAZE: "a", AGE: "y"}]
    d = make_dataset(rows)
    out = clean_dataset(d, {GAZE})
    assert out.image_ids == [s.image_id for s in d if GAZE in s.labels]  # filter oracle
    assert len(out) == 3
    assert clean_dataset(d, set()).image_ids == d.image_ids
    assert len(d) == 5  # input untouched


def test_clean_noop_when_complete():
    d = make_dataset([{GAZE: "a"}, {GAZE: "b"}])
    assert clean_dataset(d, {GAZE}).image_ids == d.image_ids


# -- age buckets --------------------------------------------------------------

SYNTH_A_EDGES = [18, 30, 50]
SYNTH_A_TARGETS = ["13-18", "19-30", "31-50", "50+"]
SYNTH_B_EDGES = [3, 12, 18, 30, 50]


def _bucket_oracle(age, edges, targets):
    for e, t in zip(edges, targets):
        if age <= e:
            return t
    return targets[-1]


def _ages(values):
    return make_dataset([{AGE: str(v)} for v in values], LabelSchema({}))


def test_bucketize_examples():
    out = bucketize_age(_ages([25, 18]), SYNTH_A_EDGES, SYNTH_A_TARGETS)
    assert [s.labels[AGE] for s in out] == ["19-30", "13-18"]
    out = bucketize_age(_ages([3, 12, 13, 51]), SYNTH_B_EDGES, SYNTH_B_AGES)
    assert [s.labels[AGE] for s in out] == ["0-3", "4-12", "13-18", "50+"]
    assert out.schema.categories[AGE] == tuple(SYNTH_B_AGES)


@given(st.lists(st.floats(0, 120, allow_nan=False), min_size=1, max_size=30))
def test_bucketize_matches_oracle(ages):
    out = bucketize_age(_ages(ages), SYNTH_B_EDGES, SYNTH_B_AGES)
    assert [s.labels[AGE] for s in out] == [_bucket_oracle(float(str(a)), SYNTH_B_EDGES, SYNTH_B_AGES)
                                            for a in ages]


def test_bucketize_negative_age_flagged():
    out = bucketize_age(_ages([-1, 40]), SYNTH_A_EDGES, SYNTH_A_TARGETS)
    assert AGE not in out[0].labels and out[0].meta["age_invalid"]
    assert out[1].labels[AGE] == "31-50"


def test_bucketize_rejects_bad_edges():
    with pytest.raises(ValueError):
        bucketize_age(_ages([1]), [1, 2], ["a", "b"])
    with pytest.raises(ValueError):
        bucketize_age(_ages([1]), [2, 1], ["a", "b", "c"])


# -- remap ------------------------------------------------------------------

def test_remap_identity_unchanged():
    d = make_dataset([{GAZE: "a"}, {GAZE: "b"}, {}])
    out = remap_labels(d, RemapTable.identity(GAZE, ("a", "b")))
    assert [s.labels for s in out] == [s.labels for s in d]


def test_remap_17_to_7():
    source = [f"plane_{i:02d}" for i in range(1, 18)]
    targets = ("center_stack_area", "road_area", "up", "down", "passenger_side", "driver_side",
               "rearview_mirror")
    table = RemapTable(GAZE, {p: targets[i % 7] for i, p in enumerate(source)}, targets)
    d = make_dataset([{GAZE: p} for p in source], LabelSchema({GAZE: tuple(source)}))
    out = remap_labels(d, table)
    assert out.schema.categories[GAZE] == targets
    assert set(out.label_counts(GAZE)) == set(targets)


def test_remap_many_to_one_sums_counts():
    d = make_dataset([{EXPR: "anger"}] * 3 + [{EXPR: "disgust"}] * 2 + [{EXPR: "happiness"}])
    before = d.label_counts(EXPR)
    t = RemapTable(EXPR, {"anger": "frown", "disgust": "frown", "happiness": "happy"},
                   ("happy", "frown"))
    after = remap_labels(d, t).label_counts(EXPR)
    assert after == {"frown": before["anger"] + before["disgust"], "happy": before["happiness"]}


def test_remap_unmapped_is_fatal_and_lists_category():
    d = make_dataset([{GAZE: "a"}, {GAZE: "z"}])
    with pytest.raises(ConfigurationError, match="'z'"):
        remap_labels(d, RemapTable(GAZE, {"a": "x"}, ("x",)))


def test_remap_table_rejects_stray_target():
    with pytest.raises(ConfigurationError):
        RemapTable(GAZE, {"a": "q"}, ("x",))


def test_remap_numeric_ranges_inclusive_first_match():
    t = RemapTable(AGE, {}, ("teen", "adult"), ((0, 18, "teen"), (18, math.inf, "adult")))
    assert t.lookup("18") == "teen"
    assert t.lookup("18.5") == "adult"
    assert t.lookup("abc") is None


@given(st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=40),
       st.lists(st.sampled_from(["x", "y"]), min_size=4, max_size=4))
def test_remap_conservation(labels, targets):
    d = make_dataset([{GAZE: v} for v in labels], LabelSchema({GAZE: ("a", "b", "c", "d")}))
    t = RemapTable(GAZE, dict(zip("abcd", targets)), ("x", "y"))
    out = remap_labels(d, t)
    assert sum(out.label_counts(GAZE).values()) == len(labels)
    for s in out:  # schema closure
        assert s.labels[GAZE] in out.schema.categories[GAZE]


# -- merge ------------------------------------------------------------------

def _unified_identity(name):
    return {t: RemapTable.identity(t, UNIFIED.categories[t]) for t in UNIFIED.tasks}


def _sized(n, name):
    row = {GAZE: "road", AGE: "adult", EXPR: "happy"}
    samples = tuple(Sample(f"{i}", tiny_image(1, 1), row, name) for i in range(n))
    return Dataset(samples, UNIFIED, name)


def test_merge_combined_size():
    parts = [_sized(10_000, "synth_a"), _sized(2_999, "synth_b"), _sized(1_920, "synth_c")]
    tables = {p.name: _unified_identity(p.name) for p in parts}
    merged = merge_datasets(parts, tables, UNIFIED)
    assert merged.size == 14_919
    assert Counter(s.source for s in merged) == {"synth_a": 10_000, "synth_b": 2_999, "synth_c": 1_920}
    # colliding raw ids get source-prefixed so ids stay unique
    assert len(set(merged.image_ids)) == 14_919
    assert merged.schema.categories[GAZE] == (
        "infotainment", "ext_mirror", "int_mirror", "rear", "road", "passenger")


def test_merge_single_equals_remap():
    d = make_dataset([{GAZE: "center_stack_area"}, {GAZE: "road_area"}])
    t = RemapTable(GAZE, {"center_stack_area": "infotainment", "road_area": "road"},
                   UNIFIED.categories[GAZE])
    unified = LabelSchema({GAZE: UNIFIED.categories[GAZE]})
    merged = merge_datasets([d], {"d": {GAZE: t}}, unified)
    assert [s.labels for s in merged] == [s.labels for s in remap_labels(d, t)]
    assert merged.image_ids == d.image_ids


def test_merge_missing_table_is_error():
    d = make_dataset([{GAZE: "road"}], UNIFIED)
    with pytest.raises(ConfigurationError):
        merge_datasets([d], {}, UNIFIED)
    with pytest.raises(ConfigurationError):
        merge_datasets([d], {"d": {GAZE: RemapTable.identity(GAZE, UNIFIED.categories[GAZE])}},
                       UNIFIED)


def test_packaged_combined_remap_is_total(tmp_path):
    from importlib.resources import files

    unified, tables = load_remap_config(files("synthmtl") / "resources" / "combined_remap.yaml")
    assert unified == UNIFIED
    assert set(tables) >= {"synth_a", "synth_b", "synth_c"}
    assert tables["synth_a"][AGE].lookup("18") == "teen"
    assert tables["synth_b"][AGE].lookup("19-30") == "adult"


# -- shuffle / split ------------------------------------------------------------

def _n(n):
    return make_dataset([{GAZE: "a"}] * n)


def test_shuffle_determinism_and_difference():
    d = _n(100)
    a, b = shuffle_dataset(d, 7), shuffle_dataset(d, 7)
    assert a.image_ids == b.image_ids
    c = shuffle_dataset(d, 8)
    assert sorted(c.image_ids) == sorted(a.image_ids)
    assert c.image_ids != a.image_ids
    assert shuffle_dataset(_n(1), 3).image_ids == _n(1).image_ids


@pytest.mark.parametrize("n,frac,expect", [(100, 0.7, (70, 30)), (10, 0.5, (5, 5)), (7, 0.7, (4, 3))])
def test_split_sizes(n, frac, expect):
    tr, te = split_dataset(_n(n), frac, 0)
    assert (len(tr), len(te)) == expect


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset(_n(1), 0.7, 0)
    for frac in (0, 1, 1.5):
        with pytest.raises(ValueError):
            split_dataset(_n(10), frac, 0)


@given(st.integers(2, 300), st.integers(1, 99), st.integers(0, 2**31))
def test_split_partition(n, pct, seed):
    d = _n(n)
    tr, te = split_dataset(d, pct / 100, seed)
    assert len(tr) == pct * n // 100  # integer floor oracle
    assert set(tr.image_ids).isdisjoint(te.image_ids)
    assert sorted(tr.image_ids + te.image_ids) == sorted(d.image_ids)
    again = split_dataset(d, pct / 100, seed)
    assert again[0].image_ids == tr.image_ids
