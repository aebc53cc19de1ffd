"""Netpbm codecs, scene generation and dataset round-trips."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hook_tokenizer import netpbm
from hook_tokenizer.data import (GenerationError, ManifestError, SceneSpec, generate_scene, largest_object_kind,
                                 load_manifest, make_dataset, make_scenes, raster_disk, write_dataset)
from hook_tokenizer.tensor import RngState


# ------------------------------------------------------------------ netpbm


def test_ppm_white_pixel_bytes():
    assert netpbm.encode_ppm(np.full((1, 1, 3), 255, dtype=np.uint8)) == b"P6\n1 1\n255\n\xff\xff\xff"


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_netpbm_round_trip(h, w, seed):
    r = np.random.default_rng(seed)
    img = r.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    mask = r.integers(0, 256, size=(h, w), dtype=np.uint8)
    assert np.array_equal(netpbm.decode_ppm(netpbm.encode_ppm(img)), img)
    assert np.array_equal(netpbm.decode_pgm(netpbm.encode_pgm(mask)), mask)


def test_header_comments_are_skipped():
    data = b"P5\n# made by hand\n2 1\n# max\n255\n\x07\x09"
    assert netpbm.decode_pgm(data).tolist() == [[7, 9]]


@pytest.mark.parametrize("data", [
    b"P6\n2 2\n255\n\x00\x00\x00",      # truncated payload
    b"P3\n1 1\n255\n0 0 0",             # wrong magic
    b"P5\n1 x\n255\n\x00",              # bad extent
    b"P5\n1 1\n65535\n\x00\x00",        # unsupported maxval
])
def test_malformed_netpbm(data):
    with pytest.raises(netpbm.NetpbmError):
        (netpbm.decode_ppm if data.startswith(b"P6") or data.startswith(b"P3") else netpbm.decode_pgm)(data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_quantization_error_bound(seed):
    img = np.random.default_rng(seed).uniform(0, 1, size=(4, 5, 3))
    back = netpbm.dequantize(netpbm.quantize(img))
    assert np.abs(back - img).max() <= 1 / 255 + 1e-9


# ------------------------------------------------------------------ scenes


def test_disk_area_oracle():
    # one disk per scene, seed 7
    spec = SceneSpec(kinds=("disk",), min_objects=1, max_objects=1)
    scene = generate_scene(RngState(7), spec)
    r = scene.params[0]["r"]
    area = scene.objects[0].sum()
    assert len(scene.objects) == 1 and scene.label == 1
    assert math.pi * (r - 1) ** 2 <= area <= math.pi * (r + 1) ** 2


@settings(max_examples=60, deadline=None)
@given(st.floats(2.0, 20.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_raster_disk_area_bound(r, fy, fx):
    m = raster_disk(48, 48, 24 + fy, 24 + fx, r)
    assert math.pi * (r - 1) ** 2 <= m.sum() <= math.pi * (r + 1) ** 2


def test_empty_scene():
    scene = generate_scene(RngState(3), SceneSpec(min_objects=0, max_objects=0))
    assert scene.label == 0 and not scene.mask.any() and scene.objects == []


def test_scene_determinism():
    a = generate_scene(RngState(11), SceneSpec())
    b = generate_scene(RngState(11), SceneSpec())
    assert a.image.tobytes() == b.image.tobytes() and np.array_equal(a.mask, b.mask)


@pytest.mark.parametrize("seed", range(40))
def test_scene_invariants(seed):
    spec = SceneSpec()
    s = generate_scene(RngState(seed), spec)
    assert s.image.shape == (64, 64, 3) and 0 <= s.image.min() and s.image.max() <= 1
    union = np.zeros((64, 64), dtype=bool)
    for m, k in zip(s.objects, s.kinds):
        assert not (union & m).any()
        union |= m
        assert np.all(s.mask[m] == k)
        ys, xs = np.nonzero(m)
        assert np.ptp(ys) + 1 > spec.seed_size and np.ptp(xs) + 1 > spec.seed_size
        # fully inside the frame, off the border
        assert not (m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())
    assert np.array_equal(union, s.mask != 0)
    assert s.label == largest_object_kind(s.objects, s.kinds)


def test_largest_object_ties_go_to_earliest():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0, :2] = True
    b[3, :2] = True
    assert largest_object_kind([a, b], [2, 3]) == 2
    assert largest_object_kind([], []) == 0


def test_class_balance():
    labels = np.array([s.label for s in make_scenes(300, SceneSpec(), 5)])
    freq = np.bincount(labels, minlength=4)[1:] / len(labels)
    assert np.all(np.abs(freq - 1 / 3) <= 0.2 / 3)


def test_spec_validation():
    with pytest.raises(ValueError, match="seed size"):
        SceneSpec(min_object_size=4).validate()
    with pytest.raises(ValueError, match="divisible"):
        SceneSpec(height=62).validate()


def test_unplaceable_objects_raise():
    spec = SceneSpec(min_objects=9, max_objects=9, min_object_size=26, max_object_size=28, max_tries=20)
    with pytest.raises(GenerationError):
        generate_scene(RngState(0), spec)


# ------------------------------------------------------------------ files


def test_dataset_round_trip(tmp_path):
    rows = write_dataset(tmp_path, 10, SceneSpec(), 4)
    assert len(rows) == 10
    assert (tmp_path / "manifest.csv").read_text().splitlines()[0] == "image,label,mask"
    loaded = load_manifest(tmp_path)
    mem = make_dataset(10, SceneSpec(), 4)
    raw = make_scenes(10, SceneSpec(), 4)
    assert len(loaded) == 10
    assert np.array_equal(loaded.images, mem.images)
    assert np.array_equal(loaded.labels, mem.labels) and np.array_equal(loaded.masks, mem.masks)
    assert np.array_equal(loaded.objects, mem.objects)
    err = max(np.abs(loaded.images[i].transpose(1, 2, 0) - s.image).max() for i, s in enumerate(raw))
    assert err <= 1 / 255 + 1e-9


def test_dataset_bytes_are_deterministic(tmp_path):
    write_dataset(tmp_path / "a", 3, SceneSpec(), 9)
    write_dataset(tmp_path / "b", 3, SceneSpec(), 9)
    for f in sorted((tmp_path / "a").rglob("*.p?m")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_manifest_missing_file_names_path(tmp_path):
    write_dataset(tmp_path, 2, SceneSpec(), 0)
    (tmp_path / "images" / "0001.ppm").unlink()
    with pytest.raises(ManifestError, match=r"manifest.csv:3: missing file .*0001\.ppm"):
        load_manifest(tmp_path / "manifest.csv")


@pytest.mark.parametrize("body,line", [
    ("image,label\n", 1),
    ("image,label,mask\nimages/0000.ppm,x,masks/0000.pgm\n", 2),
    ("image,label,mask\nimages/0000.ppm,1,masks/0000.pgm\nimages/0001.ppm,1\n", 3),
])
def test_manifest_parse_errors_carry_line(tmp_path, body, line):
    write_dataset(tmp_path, 2, SceneSpec(), 0)
    (tmp_path / "manifest.csv").write_text(body)
    with pytest.raises(ManifestError, match=rf"manifest.csv:{line}:"):
        load_manifest(tmp_path)
