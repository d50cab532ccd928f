import json
import struct

import numpy as np
import pytest

from ucaps.patches import extract, plan_patches, random_origins, reassemble, sliding_window
from ucaps.phantom import NUM_CLASSES, PhantomError, PhantomSpec, generate_phantom
from ucaps.volume import (BadMagicError, EmptyHeaderError, ManifestEntry, TruncatedPayloadError,
                          UnknownDtypeError, Volume, VolumeFormatError, normalize, read_manifest,
                          read_volume, write_manifest, write_volume)

# class histogram of the default phantom (seed 0, 64^3), counted once and frozen
DEFAULT_PHANTOM_COUNTS = [190378, 41445, 23555, 6766]


# -- VVOL ------------------------------------------------------------------------------

def test_f32_round_trip_is_bit_exact(tmp_path):
    data = np.random.default_rng(0).normal(size=(4, 4, 4)).astype(np.float32)
    data[0, 0, 0] = -0.0
    write_volume(tmp_path / "a.vvol", Volume(data, (0.5, 1.0, 2.0)))
    back = read_volume(tmp_path / "a.vvol")
    assert back.data.tobytes() == data.tobytes()
    assert back.spacing == (0.5, 1.0, 2.0) and back.dtype == "f32"


def test_u8_round_trip_preserves_histogram(tmp_path):
    labels = np.random.default_rng(1).integers(0, 4, size=(5, 3, 7)).astype(np.uint8)
    write_volume(tmp_path / "l.vvol", Volume(labels))
    back = read_volume(tmp_path / "l.vvol")
    assert back.is_label
    np.testing.assert_array_equal(np.bincount(back.data.ravel()), np.bincount(labels.ravel()))
    assert back.data.tobytes() == labels.tobytes()


def test_file_layout(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_volume(tmp_path / "v.vvol", Volume(data))
    raw = (tmp_path / "v.vvol").read_bytes()
    assert raw[:4] == b"VVOL"
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    assert header["shape"] == [2, 3, 4] and header["dtype"] == "f32"
    payload = np.frombuffer(raw[8 + hlen:], dtype="<f4")
    np.testing.assert_array_equal(payload, data.ravel())  # D fastest


def _vvol(header: bytes, payload: bytes) -> bytes:
    return b"VVOL" + struct.pack("<I", len(header)) + header + payload


def test_format_errors_are_distinct(tmp_path):
    p = tmp_path / "x.vvol"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(BadMagicError):
        read_volume(p)
    p.write_bytes(_vvol(b"", b""))
    with pytest.raises(EmptyHeaderError, match="empty header"):
        read_volume(p)
    hdr = json.dumps({"shape": [2, 2, 2], "dtype": "f32", "spacing": [1, 1, 1]}).encode()
    p.write_bytes(_vvol(hdr, b"\0" * 31))
    with pytest.raises(TruncatedPayloadError):
        read_volume(p)
    hdr = json.dumps({"shape": [2, 2, 2], "dtype": "f16", "spacing": [1, 1, 1]}).encode()
    p.write_bytes(_vvol(hdr, b"\0" * 16))
    with pytest.raises(UnknownDtypeError):
        read_volume(p)
    for cls in (BadMagicError, EmptyHeaderError, TruncatedPayloadError, UnknownDtypeError):
        assert issubclass(cls, VolumeFormatError)


def test_unsupported_dtype_on_write(tmp_path):
    with pytest.raises(UnknownDtypeError):
        write_volume(tmp_path / "x.vvol", Volume(np.zeros((2, 2, 2), dtype=np.int64)))


def test_normalize_cases():
    v = normalize(Volume(np.array([2, 4, 6], dtype=np.float32).reshape(1, 1, 3)))
    np.testing.assert_allclose(v.data.ravel(), [0, 0.5, 1])
    assert not normalize(Volume(np.full((2, 2, 2), 7.0, dtype=np.float32))).data.any()
    rng = np.random.default_rng(2)
    once = normalize(Volume(rng.normal(size=(4, 5, 6)).astype(np.float32)))
    twice = normalize(once)
    np.testing.assert_array_equal(once.data, twice.data)
    assert once.data.min() == 0 and once.data.max() == 1
    with pytest.raises(ValueError):
        normalize(Volume(np.zeros((2, 2, 2), np.uint8)))


def test_manifest_round_trip_resolves_relative_paths(tmp_path):
    entries = [ManifestEntry("img0.vvol", "lab0.vvol", "train"),
               ManifestEntry("img1.vvol", "lab1.vvol", "val")]
    write_manifest(tmp_path / "manifest.json", entries)
    back = read_manifest(tmp_path / "manifest.json")
    assert [e.split for e in back] == ["train", "val"]
    assert back[0].image_path == str(tmp_path / "img0.vvol")
    (tmp_path / "bad.json").write_text(json.dumps([{"image_path": "a", "label_path": "b",
                                                    "split": "train", "extra": 1}]))
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.json")


# -- phantom ---------------------------------------------------------------------------

def test_phantom_is_deterministic():
    a_img, a_lab = generate_phantom(PhantomSpec(seed=3, shape=(24, 24, 24)))
    b_img, b_lab = generate_phantom(PhantomSpec(seed=3, shape=(24, 24, 24)))
    assert a_img.data.tobytes() == b_img.data.tobytes()
    assert a_lab.data.tobytes() == b_lab.data.tobytes()
    c_img, _ = generate_phantom(PhantomSpec(seed=4, shape=(24, 24, 24)))
    assert c_img.data.tobytes() != a_img.data.tobytes()


def test_centre_voxel_is_innermost_class_without_noise():
    spec = PhantomSpec(shape=(33, 33, 33), deformation=0.0, jitter=0.0,
                       intensity_stds=(0, 0, 0, 0), smoothing_sigma=0.0)
    img, lab = generate_phantom(spec)
    assert lab.data[16, 16, 16] == NUM_CLASSES - 1
    assert lab.data[0, 0, 0] == 0
    # noise-free intensities are a strictly increasing function of the class
    means = [img.data[lab.data == k].mean() for k in range(4)]
    assert all(b > a for a, b in zip(means, means[1:]))


def test_default_phantom_class_counts_frozen():
    img, lab = generate_phantom(PhantomSpec())
    counts = np.bincount(lab.data.ravel(), minlength=4).tolist()
    assert counts == DEFAULT_PHANTOM_COUNTS
    assert counts[1] >= counts[2] >= counts[3]
    assert img.dtype == "f32" and img.data.min() == 0.0 and img.data.max() == 1.0
    assert lab.data.max() < NUM_CLASSES


def test_phantom_spec_validation():
    with pytest.raises(PhantomError):
        PhantomSpec(radii=(0.5, 0.6, 0.3)).validate()
    with pytest.raises(PhantomError):
        PhantomSpec(radii=(1.2, 0.6, 0.3)).validate()
    with pytest.raises(PhantomError):
        PhantomSpec.from_dict({"bogus": 1})
    spec = PhantomSpec(seed=9)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec


# -- patches ---------------------------------------------------------------------------

def test_single_patch_identity():
    plan = plan_patches((16, 16, 16), 16, 0)
    assert plan.origins == [(0, 0, 0)]
    patch = np.random.default_rng(3).normal(size=(2, 16, 16, 16))
    np.testing.assert_array_equal(reassemble(plan, [patch]), patch)


def test_constant_patches_reassemble_to_constant():
    plan = plan_patches((24, 16, 16), 16, 8)
    assert len(plan.origins) == 2
    out = reassemble(plan, [np.full((16, 16, 16), 3.5)] * len(plan.origins))
    np.testing.assert_allclose(out, 3.5)


def test_per_voxel_average_oracle():
    plan = plan_patches((64, 64, 64), 32, 16)
    rng = np.random.default_rng(4)
    patches = [rng.normal(size=(32, 32, 32)) for _ in plan.origins]
    got = reassemble(plan, patches)
    # independent accounting: for sampled voxels, average the patches that contain them
    for v in rng.integers(0, 64, size=(300, 3)).tolist() + [[0, 0, 0], [63, 63, 63], [31, 32, 16]]:
        vals = [p[v[0] - o[0], v[1] - o[1], v[2] - o[2]] for o, p in zip(plan.origins, patches)
                if all(o[i] <= v[i] < o[i] + 32 for i in range(3))]
        assert got[tuple(v)] == pytest.approx(np.mean(vals), abs=1e-12)


def test_plan_covers_every_voxel_in_bounds():
    for shape, p, ov in [((64, 64, 64), 32, 16), ((40, 33, 70), 16, 5), ((10, 10, 10), 16, 8)]:
        plan = plan_patches(shape, p, ov)
        assert plan.coverage().min() >= 1
        for o in plan.origins:
            assert all(0 <= o[i] and o[i] + p <= plan.padded_shape[i] for i in range(3))


def test_overlap_must_be_below_patch_size():
    with pytest.raises(ValueError):
        plan_patches((32, 32, 32), 16, 16)


def test_extract_bounds():
    vol = np.arange(4 * 4 * 4).reshape(4, 4, 4)
    np.testing.assert_array_equal(extract(vol, (1, 1, 1), 2), vol[1:3, 1:3, 1:3])
    with pytest.raises(ValueError):
        extract(vol, (3, 0, 0), 2)


def test_sliding_window_identity_and_padding():
    rng = np.random.default_rng(5)
    image = rng.normal(size=(1, 20, 12, 17))
    out = sliding_window(lambda b: b * 2.0, image, 16, 8, batch_size=3)
    np.testing.assert_allclose(out, 2 * image)


def test_random_origins_in_bounds():
    rng = np.random.default_rng(6)
    for o in random_origins(rng, (64, 40, 32), 32, 50):
        assert 0 <= o[0] <= 32 and 0 <= o[1] <= 8 and o[2] == 0
