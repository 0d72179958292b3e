import numpy as np
import pytest

from tctseg.data import (
    LabelMap,
    PhantomSpec,
    Volume,
    clip_normalize,
    ellipsoid_voxel_bounds,
    generate_phantom_dataset,
    labels_bytes,
    load_labels,
    load_manifest,
    load_volume,
    parse_datasets_spec,
    render_phantom,
    resample,
    sample_rng,
    save_labels,
    save_volume,
    volume_bytes,
)
from tctseg.errors import ConfigError, FormatError, ShapeError


# ------------------------------------------------------------------ formats

def test_volume_size_arithmetic(tmp_path):
    save_volume(tmp_path / "v.tctv", Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0)))
    assert (tmp_path / "v.tctv").stat().st_size == 4 + 4 + 12 + 12 + 32


def test_volume_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.standard_normal((3, 4, 5)).astype(np.float32), (0.5, 1.25, 2.0))
    p = tmp_path / "v.tctv"
    save_volume(p, vol)
    back = load_volume(p)
    assert back.dims == (3, 4, 5)
    assert back.spacing == (0.5, 1.25, 2.0)
    assert np.array_equal(back.data, vol.data)
    assert volume_bytes(back) == p.read_bytes()


def test_labels_roundtrip(tmp_path):
    lab = LabelMap(np.random.default_rng(1).integers(0, 6, size=(4, 3, 2)))
    p = tmp_path / "l.tctl"
    save_labels(p, lab)
    back = load_labels(p)
    assert np.array_equal(back.data, lab.data)
    assert labels_bytes(back) == p.read_bytes()


@pytest.mark.parametrize("loader,saver,obj", [
    (load_volume, save_volume, Volume(np.ones((2, 2, 2)))),
    (load_labels, save_labels, LabelMap(np.ones((2, 2, 2), np.uint8))),
])
def test_corruptions_rejected(tmp_path, loader, saver, obj):
    p = tmp_path / "f"
    saver(p, obj)
    good = p.read_bytes()
    p.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="offset 0"):
        loader(p)
    p.write_bytes(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(FormatError, match="offset 4"):
        loader(p)
    p.write_bytes(good[:-1])
    with pytest.raises(FormatError, match="truncated"):
        loader(p)
    p.write_bytes(good + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        loader(p)


def test_label_map_range():
    with pytest.raises(ShapeError):
        LabelMap(np.full((2, 2, 2), 300))


# ------------------------------------------------------------------ preprocessing

def test_clip_normalize_points():
    v = clip_normalize(Volume(np.array([-2000.0, 0.0, 1024.0]).reshape(1, 1, 3)))
    assert v.data.reshape(-1).tolist() == [0.0, 0.5, 1.0]


def test_resample_identity_and_constant():
    rng = np.random.default_rng(2)
    vol = Volume(rng.standard_normal((4, 5, 6)), (1.0, 2.0, 1.5))
    same = resample(vol, vol.spacing)
    assert np.array_equal(same.data, vol.data)
    const = resample(Volume(np.full((4, 4, 4), 3.0), (1, 1, 1)), (0.5, 2.0, 1.3))
    assert np.allclose(const.data, 3.0)


def test_resample_ramp_matches_scalar_oracle():
    x = np.arange(8.0)
    vol = Volume(np.broadcast_to(x, (2, 2, 8)).copy(), (1, 1, 1))
    out = resample(vol, (1, 1, 2)).data
    # 8 -> 4 samples: source coordinate (o + 0.5) * 2 - 0.5
    ref = [(o + 0.5) * 2 - 0.5 for o in range(4)]
    assert np.allclose(out[0, 0], ref)


def test_resample_nearest_labels():
    lab = LabelMap(np.arange(8, dtype=np.uint8).reshape(1, 1, 8))
    out, spacing = resample((lab, (1, 1, 1)), (1, 1, 2), mode="nearest")
    assert spacing == (1.0, 1.0, 2.0)
    assert set(out.data.reshape(-1)) <= set(range(8))


# ------------------------------------------------------------------ dataset strings

def test_parse_datasets_spec():
    specs = parse_datasets_spec("d1:1,2x20;d2:5x4")
    assert [(s.id, s.annotated, s.count) for s in specs] == [("d1", (1, 2), 20), ("d2", (5,), 4)]
    with pytest.raises(ConfigError):
        parse_datasets_spec("d1:1,2")
    with pytest.raises(ConfigError):
        parse_datasets_spec("")


# ------------------------------------------------------------------ phantoms

def small_spec(**kw):
    base = dict(size=(24, 24, 24), num_classes=3, radius_ranges=((3, 5),),
                datasets=parse_datasets_spec("a:1x2;b:2,3x2"), test_count=1, seed=5)
    base.update(kw)
    return PhantomSpec(**base)


def test_generation_is_byte_identical(tmp_path):
    generate_phantom_dataset(small_spec(), tmp_path / "x")
    generate_phantom_dataset(small_spec(), tmp_path / "y")
    files = sorted(p.relative_to(tmp_path / "x") for p in (tmp_path / "x").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


def test_partial_labels_only_annotated(tmp_path):
    m = generate_phantom_dataset(small_spec(), tmp_path)
    for d in m.datasets:
        for s in d.samples:
            vals = set(np.unique(load_labels(m.path(s.labels)).data))
            assert vals <= {0} | set(d.annotated)
            full = load_labels(m.path(s.full_labels)).data
            assert set(np.unique(full)) == {0, 1, 2, 3}
    assert len(m.test) == 1
    again = load_manifest(tmp_path)
    assert again.to_dict() == m.to_dict()


def test_region_sizes_within_ellipsoid_bounds():
    spec = small_spec(size=(40, 40, 40), radius_ranges=((3, 8),))
    for k in range(5):
        img, labels, radii = render_phantom(spec, sample_rng(spec.seed, k))
        for c, r in enumerate(radii, start=1):
            lo, hi = ellipsoid_voxel_bounds(r)
            n = int(np.count_nonzero(labels == c))
            assert lo <= n <= hi, (c, r, n, lo, hi)


def test_intensity_distinguishes_classes():
    spec = small_spec(noise_sigma=0.0)
    img, labels, _ = render_phantom(spec, sample_rng(0, 0))
    for c in range(1, 4):
        assert np.allclose(img[labels == c], spec.class_intensity(c))
    assert np.allclose(img[labels == 0], spec.background)


def test_sample_streams_are_order_free():
    a = sample_rng(3, 7).random(4)
    b = sample_rng(3, 7).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_rng(3, 8).random(4))


def test_radius_must_fit():
    with pytest.raises(ConfigError):
        PhantomSpec(size=(10, 10, 10), num_classes=1, radius_ranges=((3, 6),))


def test_manifest_missing_file(tmp_path):
    m = generate_phantom_dataset(small_spec(), tmp_path)
    m.path(m.datasets[0].samples[0].labels).unlink()
    with pytest.raises(FormatError):
        load_manifest(tmp_path)
