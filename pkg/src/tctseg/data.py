"""Volumes, label maps, dataset manifests and the synthetic phantom generator."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tctseg.errors import ConfigError, FormatError, GenerationError, ShapeError
from tctseg.tensor import linear_interp_matrix

VOLUME_MAGIC = b"TCTV"
LABEL_MAGIC = b"TCTL"
FORMAT_VERSION = 1


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"a volume needs 3 positive dims, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelMap:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"a label map needs 3 dims, got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ShapeError("label values must fit in u8")
        self.data = arr.astype(np.uint8)

    @property
    def dims(self):
        return self.data.shape


# ------------------------------------------------------------------ binary io

def _read_exact(buf, offset, n, path):
    if offset + n > len(buf):
        raise FormatError(f"truncated file: needed {n} bytes, {len(buf) - offset} left", offset, path)
    return buf[offset:offset + n]


def _read_header(buf, magic, path):
    got = _read_exact(buf, 0, 4, path)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0, path)
    (version,) = struct.unpack("<I", _read_exact(buf, 4, 4, path))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    dims = struct.unpack("<3I", _read_exact(buf, 8, 12, path))
    return dims


def volume_bytes(vol):
    dz, dy, dx = vol.dims
    head = VOLUME_MAGIC + struct.pack("<I3I3f", FORMAT_VERSION, dz, dy, dx, *vol.spacing)
    return head + np.ascontiguousarray(vol.data, dtype="<f4").tobytes()


def save_volume(path, vol):
    Path(path).write_bytes(volume_bytes(vol))


def load_volume(path):
    buf = Path(path).read_bytes()
    dims = _read_header(buf, VOLUME_MAGIC, path)
    spacing = struct.unpack("<3f", _read_exact(buf, 20, 12, path))
    n = dims[0] * dims[1] * dims[2]
    body = _read_exact(buf, 32, 4 * n, path)
    if len(buf) != 32 + 4 * n:
        raise FormatError(f"{len(buf) - 32 - 4 * n} trailing bytes", 32 + 4 * n, path)
    data = np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume(data, spacing)


def labels_bytes(lab):
    dz, dy, dx = lab.dims
    head = LABEL_MAGIC + struct.pack("<I3I", FORMAT_VERSION, dz, dy, dx)
    return head + np.ascontiguousarray(lab.data, dtype=np.uint8).tobytes()


def save_labels(path, lab):
    Path(path).write_bytes(labels_bytes(lab))


def load_labels(path):
    buf = Path(path).read_bytes()
    dims = _read_header(buf, LABEL_MAGIC, path)
    n = dims[0] * dims[1] * dims[2]
    body = _read_exact(buf, 20, n, path)
    if len(buf) != 20 + n:
        raise FormatError(f"{len(buf) - 20 - n} trailing bytes", 20 + n, path)
    return LabelMap(np.frombuffer(body, dtype=np.uint8).reshape(dims).copy())


# ------------------------------------------------------------------ manifests

@dataclass
class SampleEntry:
    volume: str
    labels: str
    full_labels: str


@dataclass
class SubDataset:
    id: str
    annotated: tuple
    samples: list = field(default_factory=list)


@dataclass
class DatasetManifest:
    """Partially labeled dataset family.

    ``test`` holds fully labeled held-out samples; it is not part of any
    training sub-dataset. Paths are relative to ``root``.
    """

    name: str
    classes: list
    datasets: list
    test: list = field(default_factory=list)
    root: Path = None

    @property
    def num_classes(self):
        return len(self.classes)

    def path(self, rel):
        return Path(self.root) / rel if self.root is not None else Path(rel)

    def to_dict(self):
        def sample(s):
            return {"volume": s.volume, "labels": s.labels, "full_labels": s.full_labels}

        return {
            "name": self.name,
            "classes": list(self.classes),
            "datasets": [
                {"id": d.id, "annotated": list(d.annotated), "samples": [sample(s) for s in d.samples]}
                for d in self.datasets
            ],
            "test": [sample(s) for s in self.test],
        }

    def validate(self, check_files=True):
        n = self.num_classes
        for d in self.datasets:
            if not d.annotated:
                raise ConfigError(f"sub-dataset {d.id!r} has an empty annotated set")
            bad = [c for c in d.annotated if not 1 <= c <= n]
            if bad:
                raise ConfigError(f"sub-dataset {d.id!r} annotates classes {bad} outside 1..{n}")
        if check_files:
            for s in self.all_samples():
                for rel in (s.volume, s.labels, s.full_labels):
                    if not self.path(rel).exists():
                        raise FormatError("referenced file is missing", path=str(self.path(rel)))

    def all_samples(self):
        for d in self.datasets:
            yield from d.samples
        yield from self.test


def save_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def load_manifest(path, check_files=True):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.pos, str(path)) from None
    try:
        datasets = [
            SubDataset(
                str(d["id"]),
                tuple(int(c) for c in d["annotated"]),
                [SampleEntry(s["volume"], s["labels"], s["full_labels"]) for s in d["samples"]],
            )
            for d in raw["datasets"]
        ]
        test = [SampleEntry(s["volume"], s["labels"], s["full_labels"]) for s in raw.get("test", [])]
        manifest = DatasetManifest(raw["name"], list(raw["classes"]), datasets, test, root=path.parent)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest is missing field {exc}", path=str(path)) from None
    manifest.validate(check_files)
    return manifest


# -------------------------------------------------------------- preprocessing

def clip_normalize(vol, lo=-1024.0, hi=1024.0):
    """Clamp intensities to ``[lo, hi]`` and rescale to ``[0, 1]``."""
    if not lo < hi:
        raise ConfigError(f"need lo < hi, got {lo}, {hi}")
    data = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return Volume(data.astype(np.float32), vol.spacing)


def _nearest_index(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    return np.clip(np.floor(src + 0.5).astype(int), 0, n_in - 1)


def resample(vol, target_spacing, mode="trilinear"):
    """Resample to ``target_spacing`` (mm per axis, z/y/x order).

    Accepts a :class:`Volume` (``mode='trilinear'``) or a ``(LabelMap,
    spacing)`` pair with ``mode='nearest'``. New dims are
    ``round(dims * spacing / target)``, at least 1.
    """
    if isinstance(vol, tuple):
        lab, spacing = vol
        data = lab.data
    else:
        data, spacing = vol.data, vol.spacing
    target = tuple(float(t) for t in target_spacing)
    if min(target) <= 0 or min(spacing) <= 0:
        raise ConfigError("spacings must be positive")
    new_dims = tuple(max(1, int(round(d * s / t))) for d, s, t in zip(data.shape, spacing, target))
    if mode == "nearest":
        out = data
        for ax, (n_in, n_out) in enumerate(zip(data.shape, new_dims)):
            out = np.take(out, _nearest_index(n_in, n_out), axis=ax)
        return LabelMap(out), target
    if mode != "trilinear":
        raise ConfigError(f"unknown resampling mode {mode!r}")
    out = data.astype(np.float64)
    for ax, (n_in, n_out) in enumerate(zip(data.shape, new_dims)):
        if n_in == n_out:
            continue
        m = linear_interp_matrix(n_in, n_out)
        out = np.moveaxis(np.moveaxis(out, ax, -1) @ m.T, -1, ax)
    return Volume(out.astype(np.float32), target)


# ----------------------------------------------------------------- phantoms

@dataclass
class SubDatasetSpec:
    id: str
    annotated: tuple
    count: int


def parse_datasets_spec(text):
    """Parse ``"d1:1,2x20;d2:5x4"`` into sub-dataset specs."""
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            ident, rest = chunk.split(":", 1)
            classes, count = rest.rsplit("x", 1)
            annotated = tuple(int(c) for c in classes.split(","))
            out.append(SubDatasetSpec(ident.strip(), annotated, int(count)))
        except ValueError:
            raise ConfigError(f"cannot parse dataset spec {chunk!r} (expected id:c1,c2xCOUNT)") from None
    if not out:
        raise ConfigError("empty dataset spec")
    return out


@dataclass
class PhantomSpec:
    size: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int = 5
    # (min, max) semi-axis in voxels, per class (one pair reused for all when given once)
    radius_ranges: tuple = ((5, 9),)
    background: float = 0.05
    noise_sigma: float = 0.05
    datasets: list = field(default_factory=list)
    test_count: int = 0
    seed: int = 0
    max_retries: int = 1000

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        if len(self.radius_ranges) == 1:
            self.radius_ranges = tuple(self.radius_ranges) * self.num_classes
        if len(self.radius_ranges) != self.num_classes:
            raise ConfigError("need one radius range per class")
        for lo, hi in self.radius_ranges:
            if lo < 1 or hi < lo or 2 * hi + 1 > min(self.size):
                raise ConfigError(f"radius range ({lo}, {hi}) does not fit volume {self.size}")
        for d in self.datasets:
            if d.count < 1:
                raise ConfigError(f"sub-dataset {d.id!r} needs at least one sample")

    def class_intensity(self, c):
        return min(0.1 + 0.15 * c, 0.95)


def _place_ellipsoids(spec, rng):
    """Centres and semi-axes for one non-overlapping ellipsoid per class, or None."""
    placed = []
    for c in range(1, spec.num_classes + 1):
        lo, hi = spec.radius_ranges[c - 1]
        for _ in range(spec.max_retries):
            radii = rng.integers(lo, hi + 1, size=3)
            centre = np.array([rng.integers(r, s - r) for r, s in zip(radii, spec.size)])
            # bounding spheres must be separated by at least one voxel
            if all(np.linalg.norm(centre - pc) > radii.max() + pr.max() + 1 for pc, pr in placed):
                placed.append((centre, radii))
                break
        else:
            return None
    return placed


def render_phantom(spec, rng):
    """One (intensity volume, full label map, radii per class) triple."""
    for _ in range(spec.max_retries):
        placed = _place_ellipsoids(spec, rng)
        if placed is not None:
            break
    else:
        return None
    grid = np.indices(spec.size, dtype=np.float64)
    labels = np.zeros(spec.size, np.uint8)
    img = np.full(spec.size, spec.background, np.float64)
    for c, (centre, radii) in enumerate(placed, start=1):
        r2 = sum(((grid[k] - centre[k]) / radii[k]) ** 2 for k in range(3))
        inside = r2 <= 1.0
        labels[inside] = c
        img[inside] = spec.class_intensity(c)
    img += rng.normal(0.0, spec.noise_sigma, size=spec.size)
    return img.astype(np.float32), labels, [r for _, r in placed]


def sample_rng(seed, index):
    """Independent stream for sample ``index`` (seed xor index), order-free."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) ^ int(index)]))


def partial_view(labels, annotated):
    keep = np.isin(labels, np.asarray(annotated, dtype=np.uint8))
    return np.where(keep, labels, 0).astype(np.uint8)


def generate_phantom_dataset(spec, out_dir):
    """Write volumes, partial and full label maps and ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"class_{c}" for c in range(1, spec.num_classes + 1)]
    for d in spec.datasets:
        bad = [c for c in d.annotated if not 1 <= c <= spec.num_classes]
        if bad:
            raise ConfigError(f"sub-dataset {d.id!r} annotates {bad} outside 1..{spec.num_classes}")
    groups = [(d.id, d.annotated, d.count) for d in spec.datasets]
    if spec.test_count:
        groups.append(("test", tuple(range(1, spec.num_classes + 1)), spec.test_count))

    index = 0
    datasets, test = [], []
    for ident, annotated, count in groups:
        sub_dir = out_dir / ident
        sub_dir.mkdir(exist_ok=True)
        entries = []
        for k in range(count):
            rendered = render_phantom(spec, sample_rng(spec.seed, index))
            if rendered is None:
                raise GenerationError(f"could not place ellipsoids for sample {ident}/{k:03d}")
            img, full, _ = rendered
            stem = f"{ident}/{k:03d}"
            save_volume(out_dir / f"{stem}.tctv", Volume(img, spec.spacing))
            save_labels(out_dir / f"{stem}_full.tctl", LabelMap(full))
            save_labels(out_dir / f"{stem}.tctl", LabelMap(partial_view(full, annotated)))
            entries.append(SampleEntry(f"{stem}.tctv", f"{stem}.tctl", f"{stem}_full.tctl"))
            index += 1
        if ident == "test" and spec.test_count:
            test = entries
        else:
            datasets.append(SubDataset(ident, tuple(annotated), entries))
    manifest = DatasetManifest("phantom", names, datasets, test, root=out_dir)
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest


def ellipsoid_voxel_bounds(radii):
    """Analytic bounds on the voxel count of an axis-aligned ellipsoid.

    With ``m = sqrt(3)/2`` (half a voxel diagonal) and ``k = m / min(radii)``,
    a ball of radius ``m`` fits in the ellipsoid scaled by ``k``. Counted unit
    cubes are disjoint and lie in the ellipsoid scaled by ``1 + k``; they
    cover the ellipsoid scaled by ``1 - k``.
    """
    r = np.asarray(radii, dtype=np.float64)
    k = (math.sqrt(3) / 2) / r.min()
    unit = 4.0 / 3.0 * math.pi * float(np.prod(r))
    return unit * max(1.0 - k, 0.0) ** 3, unit * (1.0 + k) ** 3
