import json
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformpic.dataset import (ChecksumError, DatasetConfig, TruncatedError, VersionMismatch, build_dataset,
                               collate, decode_record, denoising_count, encode_record, load_dataset,
                               make_denoising_pair, make_reconstruction_pair, make_record,
                               make_registration_pair, patchify, reconstruction_size, record_plan,
                               regenerate_input, split_indices, write_dataset)
from deformpic.geometry import chamfer_l2
from deformpic.shapes import KINDS, PARAM_RANGES, ShapeSpec, generate_shape, random_spec


def small_cfg(**kw):
    return DatasetConfig(**{"samples_per_cell": 1, "n_points": 64, "seed": 3, **kw})


# -- shapes ------------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_shapes_are_normalized_and_deterministic(kind):
    spec = random_spec(kind, 200, 11, np.random.default_rng(0))
    c = generate_shape(spec)
    assert c.shape == (200, 3)
    np.testing.assert_allclose(c.mean(0), 0, atol=1e-6)
    assert np.linalg.norm(c, axis=1).max() == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_array_equal(c, generate_shape(spec))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(32, 300))
def test_sphere_points_on_unit_sphere(seed, n):
    c = generate_shape(ShapeSpec("sphere", n, seed))
    np.testing.assert_allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-6)


def test_cube_points_lie_on_faces():
    spec = ShapeSpec("cube", 500, 4, {"ex": 0.5, "ey": 0.8, "ez": 1.0})
    from deformpic.shapes import sample_surface

    raw = sample_surface(spec)
    ext = np.array([0.5, 0.8, 1.0])
    on_face = np.isclose(np.abs(raw), ext).any(axis=1)
    assert on_face.all()
    assert np.all(np.abs(raw) <= ext + 1e-12)


def test_shape_spec_validation():
    with pytest.raises(ValueError, match="unknown shape kind"):
        generate_shape(ShapeSpec("teapot", 64, 0))
    with pytest.raises(ValueError, match="n_points"):
        generate_shape(ShapeSpec("sphere", 8, 0))
    lo, hi = PARAM_RANGES["torus"]["minor"]
    with pytest.raises(ValueError, match="outside"):
        generate_shape(ShapeSpec("torus", 64, 0, {"major": 0.8, "minor": hi + 0.1}))


# -- task pairs ---------------------------------------------------------------------

@pytest.mark.parametrize("level,expected", [(1, 512), (2, 256), (3, 128), (4, 64), (5, 32)])
def test_reconstruction_sizes_at_1024(level, expected):
    assert reconstruction_size(1024, level) == expected


def test_reconstruction_ratio_rule_small_cloud():
    assert reconstruction_size(128, 5) == 4


@pytest.mark.parametrize("level", [1, 2, 3, 4, 5])
def test_denoising_counts_at_1024(level):
    assert denoising_count(1024, level) == 100 * level


def test_denoising_ratio_rule_small_cloud():
    assert denoising_count(128, 1) == 13


def test_level_out_of_range():
    with pytest.raises(ValueError):
        reconstruction_size(1024, 6)


def _cloud(n=128, seed=0):
    return generate_shape(ShapeSpec("sphere", n, seed))


def test_reconstruction_input_is_subset_of_target():
    c = _cloud()
    inp, tgt, rec = make_reconstruction_pair(c, 2, np.random.default_rng(0))
    assert tgt is c and inp.shape[0] == rec["n_input"] == 32
    assert {tuple(p) for p in inp} <= {tuple(p) for p in c}


def test_denoising_keeps_unreplaced_points():
    c = _cloud()
    inp, tgt, rec = make_denoising_pair(c, 3, np.random.default_rng(0))
    keep = np.setdiff1d(np.arange(128), rec["indices"])
    np.testing.assert_array_equal(inp[keep], c[keep])
    assert len(rec["indices"]) == len(set(rec["indices"])) == denoising_count(128, 3)


def test_registration_preserves_distances_and_moves_points():
    c = _cloud()
    inp, tgt, rec = make_registration_pair(c, 1, np.random.default_rng(0))
    assert np.all(np.abs(rec["angles_deg"]) <= 20)
    d0 = np.linalg.norm(c[:, None] - c[None], axis=-1)
    d1 = np.linalg.norm(inp[:, None] - inp[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-9)
    assert chamfer_l2(inp, tgt) > 0


# -- records and files -----------------------------------------------------------------

def test_record_plan_counts():
    assert len(record_plan(DatasetConfig(samples_per_cell=2))) == 30


def test_record_prompt_and_query_use_distinct_shapes():
    cfg = small_cfg()
    for i, (task, level) in enumerate(record_plan(cfg)):
        s = make_record(cfg, i, task, level)
        assert s.provenance["prompt"]["shape_seed"] != s.provenance["query"]["shape_seed"]
        assert s.prompt_target.shape == s.query_target.shape == (64, 3)
        for tgt in (s.prompt_target, s.query_target):
            assert np.linalg.norm(tgt, axis=1).max() == pytest.approx(1.0, abs=1e-6)


def test_record_encoding_round_trip():
    s = make_record(small_cfg(), 0, "registration", 2)
    clouds = decode_record(encode_record(s))
    for a, b in zip(clouds, s.clouds):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(TruncatedError):
        decode_record(encode_record(s)[:-1])


def test_build_is_deterministic_and_round_trips(tmp_path):
    cfg = small_cfg()
    m1 = build_dataset(tmp_path / "a", cfg)
    build_dataset(tmp_path / "b", cfg)
    for name in ("manifest.json", "records.bin", "provenance.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(m1["records"]) == 15
    offsets = [r["offset"] for r in m1["records"]]
    assert offsets == sorted(set(offsets))
    assert sum(sum(v) for v in m1["counts"].values()) == 15
    ds = load_dataset(tmp_path / "a")
    write_dataset(tmp_path / "c", ds.samples, cfg)
    for name in ("manifest.json", "records.bin", "provenance.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()


def test_manifest_fields(tmp_path):
    build_dataset(tmp_path, small_cfg())
    mf = json.loads((tmp_path / "manifest.json").read_text())
    assert {"version", "n_points", "tasks", "levels", "counts", "seed", "patch", "records"} <= set(mf)
    assert mf["version"] == 1 and mf["patch"] == {"m": 16, "k": 8}
    blob = (tmp_path / "records.bin").read_bytes()
    rec = mf["records"][3]
    assert zlib.crc32(blob[rec["offset"]:rec["offset"] + rec["len"]]) == rec["crc32"]


def test_corrupt_byte_names_record(tmp_path):
    mf = build_dataset(tmp_path, small_cfg())
    path = tmp_path / "records.bin"
    blob = bytearray(path.read_bytes())
    blob[mf["records"][5]["offset"] + 10] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError, match="record 5") as info:
        load_dataset(tmp_path)
    assert info.value.index == 5


def test_truncated_and_version_errors(tmp_path):
    build_dataset(tmp_path, small_cfg())
    path = tmp_path / "records.bin"
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(TruncatedError):
        load_dataset(tmp_path)
    mf = json.loads((tmp_path / "manifest.json").read_text())
    mf["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(mf))
    with pytest.raises(VersionMismatch):
        load_dataset(tmp_path)


def test_empty_dataset_is_zero_records(tmp_path):
    build_dataset(tmp_path, small_cfg(samples_per_cell=0))
    ds = load_dataset(tmp_path)
    assert len(ds) == 0 and ds.is_empty


def test_config_validation():
    with pytest.raises(ValueError, match="n_points"):
        DatasetConfig(n_points=8).validate()
    with pytest.raises(ValueError, match="unknown tasks"):
        DatasetConfig(tasks=("segmentation",)).validate()


def test_provenance_regenerates_inputs(tmp_path):
    build_dataset(tmp_path, small_cfg(samples_per_cell=2))
    for s in load_dataset(tmp_path):
        for role, inp, tgt in (("prompt", s.prompt_input, s.prompt_target),
                               ("query", s.query_input, s.query_target)):
            p = s.provenance[role]
            spec = ShapeSpec(p["kind"], 64, p["shape_seed"], p["params"])
            np.testing.assert_array_equal(generate_shape(spec).astype(np.float32), tgt)
            np.testing.assert_array_equal(regenerate_input(generate_shape(spec), s.task, s.level, p["pair_seed"]), inp)


# -- patching / split ----------------------------------------------------------------------

def test_patchify_shapes_and_collate():
    cfg = small_cfg()
    samples = [make_record(cfg, i, t, lv) for i, (t, lv) in enumerate(record_plan(cfg))]
    bank = patchify(samples, 8, 4)
    assert bank["qt"].shape == (15, 8, 4, 3) and bank["qi_c"].shape == (15, 8, 3)
    batch = collate(bank, [2, 0])
    np.testing.assert_array_equal(batch["pi"][1], bank["pi"][0])
    assert list(batch["level"]) == [3, 1]


def test_split_is_deterministic_and_disjoint():
    tr, va = split_indices(1000)
    assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == 1000
    assert 60 <= len(va) <= 140
    tr2, va2 = split_indices(1000)
    np.testing.assert_array_equal(va, va2)
