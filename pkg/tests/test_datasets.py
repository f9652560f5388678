import json
from collections import Counter
from pathlib import Path

import jsonschema
import pytest

import manifests as mf
from diffsim.datasets import (
    MANIFEST_SCHEMA,
    PUBLISHED_COUNTS,
    TripletRecord,
    build_triplets,
    load_frame_sequence,
    load_manifest,
    read_triplets,
    validate_manifest_dict,
    video_ids,
    write_triplets,
)
from diffsim.errors import ManifestError

DOCS = Path(__file__).parent.parent / "docs"


@pytest.fixture(scope="module")
def full(tmp_path_factory):
    return {b: load_manifest(p) for b, p in mf.all_manifests(tmp_path_factory.mktemp("full")).items()}


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    return {b: load_manifest(p) for b, p in mf.all_manifests(tmp_path_factory.mktemp("mini"), full=False).items()}


@pytest.mark.parametrize("benchmark", sorted(PUBLISHED_COUNTS))
def test_full_size_counts(full, benchmark):
    trips = build_triplets(full[benchmark], seed=0)
    assert len(trips) == PUBLISHED_COUNTS[benchmark]
    assert len({t.id for t in trips}) == len(trips)


def test_count_table_values():
    assert PUBLISHED_COUNTS == {"nights": 2120, "dreambench_pp": 937, "cute": 1800, "ip_bench": 1495,
                                "tid2013": 600, "sref": 2000, "instantstyle": 2000}


def _field(m, image_id, name):
    return m.item(image_id)[name]


def test_style_rule(mini):
    for b in ("sref", "instantstyle"):
        m = mini[b]
        for t in build_triplets(m, seed=3, n_triplets=50):
            close, far = t.cand[t.gt_index], t.cand[1 - t.gt_index]
            assert _field(m, t.ref, "style_id") == _field(m, close, "style_id") == t.meta["style"]
            assert _field(m, far, "style_id") != t.meta["style"]


def test_tid_rule(mini):
    m = mini["tid2013"]
    trips = build_triplets(m, seed=1)
    assert len(trips) == 2 * 3
    for t in trips:
        assert _field(m, t.ref, "role") == "reference"
        close, far = t.cand[t.gt_index], t.cand[1 - t.gt_index]
        assert _field(m, close, "distortion_type") == _field(m, far, "distortion_type")
        assert _field(m, close, "group_id") == _field(m, far, "group_id") == _field(m, t.ref, "group_id")
        assert _field(m, close, "distortion_level") < _field(m, far, "distortion_level")


def test_ip_rule(mini):
    m = mini["ip_bench"]
    trips = build_triplets(m, seed=1, repeats=4)
    assert len(trips) == 3 * 4
    for t in trips:
        close, far = t.cand[t.gt_index], t.cand[1 - t.gt_index]
        assert _field(m, close, "consistency_weight") > _field(m, far, "consistency_weight")
        assert _field(m, t.ref, "role") == "original"


def test_dreambench_rule_skips_ties(mini):
    m = mini["dreambench_pp"]
    trips = build_triplets(m, seed=2, n_triplets=200)
    for t in trips:
        close, far = t.cand[t.gt_index], t.cand[1 - t.gt_index]
        assert _field(m, close, "rating") > _field(m, far, "rating")
    assert {t.meta["group"] for t in trips} == {"g000", "g001", "g002"}


def test_cute_rule(mini):
    m = mini["cute"]
    trips = build_triplets(m, seed=4, repeats=3)
    assert len(trips) == 4 * 3
    for t in trips:
        close, far = t.cand[t.gt_index], t.cand[1 - t.gt_index]
        light = _field(m, t.ref, "lighting_id")
        assert _field(m, close, "lighting_id") == _field(m, far, "lighting_id") == light
        assert _field(m, close, "instance_id") == _field(m, t.ref, "instance_id")
        assert _field(m, far, "instance_id") != _field(m, t.ref, "instance_id")


def test_nights_ground_truth(mini):
    trips = build_triplets(mini["nights"], seed=0)
    by_id = {t.id: t for t in trips}
    assert by_id["nights-0001"].gt_index == 1  # votes [1, 4]
    assert by_id["nights-0000"].gt_index == 0
    assert by_id["nights-0002"].gt_index == 1


def test_gt_positions_are_balanced(full):
    c = Counter(t.gt_index for t in build_triplets(full["sref"], seed=0))
    assert 900 < c[0] < 1100


@pytest.mark.parametrize("benchmark", sorted(PUBLISHED_COUNTS))
def test_deterministic_and_seed_sensitive(mini, benchmark):
    a = build_triplets(mini[benchmark], seed=11)
    b = build_triplets(mini[benchmark], seed=11)
    assert [t.to_dict() for t in a] == [t.to_dict() for t in b]
    if benchmark != "nights":
        c = build_triplets(mini[benchmark], seed=12)
        assert [(t.ref, t.cand) for t in a] != [(t.ref, t.cand) for t in c]
    assert all(t.meta["seed"] == 11 for t in a)


def test_triplet_file_round_trip(mini, tmp_path):
    trips = build_triplets(mini["sref"], seed=5, n_triplets=20)
    out = tmp_path / "t.jsonl"
    write_triplets(out, trips)
    first = out.read_bytes()
    back = read_triplets(out)
    assert back == trips and [t.paths for t in back] == [t.paths for t in trips]
    write_triplets(out, back)
    assert out.read_bytes() == first


def test_triplet_record_validation():
    with pytest.raises(ManifestError):
        TripletRecord("x", "a", ("b", "c"), 2, "sref")
    with pytest.raises(ManifestError):
        TripletRecord("x", "a", ("a", "c"), 0, "sref")
    with pytest.raises(ManifestError):
        TripletRecord("x", "a", ("b", "b"), 0, "sref")


def test_bad_triplet_line_reports_line(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"id":"a","ref":"r","cand":["x","y"],"gt_index":0}\n{"id":"b"}\n')
    with pytest.raises(ManifestError, match=":2:"):
        read_triplets(p)


def _load_raw(path):
    return json.loads(Path(path).read_text())


def test_duplicate_id_is_named(tmp_path):
    p = mf.styles(tmp_path, "instantstyle", full=False)
    d = _load_raw(p)
    d["items"][1]["id"] = d["items"][0]["id"]
    p.write_text(json.dumps(d))
    with pytest.raises(ManifestError, match=d["items"][0]["id"]):
        load_manifest(p)


def test_sref_style_with_three_images(tmp_path):
    p = mf.styles(tmp_path, "sref", full=False)
    d = _load_raw(p)
    d["items"].pop()
    p.write_text(json.dumps(d))
    with pytest.raises(ManifestError, match="style001.*3 images"):
        load_manifest(p)


def test_missing_path(tmp_path):
    p = mf.styles(tmp_path, "instantstyle", full=False)
    (tmp_path / "img" / "i0_0.png").unlink()
    with pytest.raises(ManifestError, match="i0_0"):
        load_manifest(p)
    assert load_manifest(p, check_paths=False).benchmark == "instantstyle"


def test_schema_violation_names_field(tmp_path):
    p = mf.tid2013(tmp_path, full=False)
    d = _load_raw(p)
    d["items"][1]["distortion_level"] = 7
    with pytest.raises(ManifestError, match="items/1/distortion_level"):
        validate_manifest_dict(d)
    del d["items"][1]["distortion_level"]
    with pytest.raises(ManifestError, match="distortion_level"):
        validate_manifest_dict(d)


def test_group_without_anchor(tmp_path):
    p = mf.ip_bench(tmp_path, full=False)
    d = _load_raw(p)
    d["items"][0]["role"] = "variant"
    d["items"][0]["consistency_weight"] = 0.9
    p.write_text(json.dumps(d))
    with pytest.raises(ManifestError, match="c000"):
        load_manifest(p)


def test_nights_tied_votes_rejected(tmp_path):
    p = mf.nights(tmp_path, full=False)
    d = _load_raw(p)
    d["triplets"][1]["votes"] = [2, 2]
    p.write_text(json.dumps(d))
    with pytest.raises(ManifestError, match="tied"):
        load_manifest(p)


def test_unreadable_manifest(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ManifestError):
        load_manifest(bad)


def test_frame_sequence(tmp_path):
    m = load_manifest(mf.tiktok(tmp_path))
    assert video_ids(m) == ["v1", "v2"]
    seq = load_frame_sequence(m, "v1")
    assert len(seq) == 10 and seq[0] == "v1_f0" and seq[-1] == "v1_f9"
    assert load_frame_sequence(m, "v2") == ["v2_f0"]
    with pytest.raises(ManifestError, match="unknown video"):
        load_frame_sequence(m, "v9")


def test_frame_sequence_gap(tmp_path):
    m = load_manifest(mf.tiktok(tmp_path, skip=("v1", 3)))
    with pytest.raises(ManifestError, match=r"missing \[3\]"):
        load_frame_sequence(m, "v1")


def test_tiktok_has_no_triplet_protocol(tmp_path):
    with pytest.raises(ManifestError):
        build_triplets(load_manifest(mf.tiktok(tmp_path)), 0)


@pytest.mark.parametrize("path", sorted((DOCS / "manifests").glob("*.json")), ids=lambda p: p.stem)
def test_documented_examples_validate(path):
    validate_manifest_dict(_load_raw(path))


def test_published_schema_matches_code():
    assert _load_raw(DOCS / "manifest.schema.json") == MANIFEST_SCHEMA
    jsonschema.Draft202012Validator.check_schema(MANIFEST_SCHEMA)


def test_triplet_schema_accepts_written_records(mini, tmp_path):
    schema = _load_raw(DOCS / "triplet.schema.json")
    for t in build_triplets(mini["cute"], seed=0, repeats=1):
        jsonschema.validate(t.to_dict(), schema)
