"""Procedural content, a parameterized distortion bank and proxy quality labels.

Image files use the ``GRMPIMG1`` layout::

    b"GRMPIMG1" | count:u32 | H:u32 | W:u32 | C:u32 | f32 pixels (record order)

with little-endian integers and floats. The manifest is a JSON document
``{"records": [...]}`` whose records carry ``image_id``, ``content_class``,
``distortion_type``, ``severity``, ``y``, ``seed`` and ``split``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_MAGIC = b"GRMPIMG1"
SIZE = 32

CONTENT_CLASSES = ("blob-creatures", "grid-skyline", "stick-figures", "boxes",
                   "gradient-horizon", "dark-field-stars", "branch-fractals",
                   "circles-table", "uniform-noise-texture")


class Distortion(IntEnum):
    GAUSSIAN_BLUR = 0
    GAUSSIAN_NOISE = 1
    IMPULSE_NOISE = 2
    BLOCK_AVERAGING = 3
    OVEREXPOSURE = 4
    UNDEREXPOSURE = 5
    CONTRAST_REDUCTION = 6
    PIXELATION = 7

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DistortionSpec:
    type: Distortion
    severity: float

    def __post_init__(self):
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must lie in [0, 1], got {self.severity}")
        object.__setattr__(self, "type", Distortion(self.type))


# ---------------------------------------------------------------- content

def _grid():
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    return yy / (SIZE - 1), xx / (SIZE - 1)


def _line(img, rng_color, y0, x0, y1, x1, width=1.0):
    yy, xx = _grid()
    yy, xx = yy * (SIZE - 1), xx * (SIZE - 1)
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx + 1e-9
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / length2, 0.0, 1.0)
    dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    mask = np.clip(width - dist + 0.5, 0.0, 1.0)[..., None]
    img[:] = img * (1 - mask) + rng_color * mask


def _disk(img, color, cy, cx, r):
    yy, xx = _grid()
    d = np.hypot(yy * (SIZE - 1) - cy, xx * (SIZE - 1) - cx)
    mask = np.clip(r - d + 0.5, 0.0, 1.0)[..., None]
    img[:] = img * (1 - mask) + color * mask


def _vertical_gradient(top, bottom):
    yy, _ = _grid()
    return top * (1 - yy[..., None]) + bottom * yy[..., None]


def _blob_creatures(rng):
    img = _vertical_gradient(rng.uniform(0.5, 0.9, 3), rng.uniform(0.3, 0.7, 3))
    yy, xx = _grid()
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        sy, sx = rng.uniform(0.06, 0.18, 2)
        w = np.exp(-((yy - cy) ** 2 / (2 * sy ** 2) + (xx - cx) ** 2 / (2 * sx ** 2)))[..., None]
        img = img * (1 - w) + rng.uniform(0, 1, 3) * w
        _disk(img, np.zeros(3), cy * 31 - 2, cx * 31 + 1, 1.0)
    return img


def _grid_skyline(rng):
    img = _vertical_gradient(rng.uniform(0.4, 0.8, 3), rng.uniform(0.7, 1.0, 3))
    x = 0
    while x < SIZE:
        w = int(rng.integers(3, 8))
        h = int(rng.integers(8, 26))
        img[SIZE - h:, x:x + w] = rng.uniform(0.1, 0.4, 3)
        img[SIZE - h + 1:SIZE - 1:3, x + 1:x + w - 1:2] = rng.uniform(0.7, 1.0, 3)
        x += w + int(rng.integers(0, 2))
    return img


def _stick_figures(rng):
    img = np.ones((SIZE, SIZE, 3)) * rng.uniform(0.6, 0.95, 3)
    for _ in range(rng.integers(1, 4)):
        cx = rng.uniform(5, 26)
        top = rng.uniform(4, 10)
        color = rng.uniform(0, 0.4, 3)
        _disk(img, color, top, cx, 2.0)
        _line(img, color, top + 2, cx, top + 12, cx)
        _line(img, color, top + 5, cx - 4, top + 5, cx + 4)
        _line(img, color, top + 12, cx, top + 19, cx - 3)
        _line(img, color, top + 12, cx, top + 19, cx + 3)
    return img


def _boxes(rng):
    img = np.ones((SIZE, SIZE, 3)) * rng.uniform(0.3, 0.7, 3)
    for _ in range(rng.integers(3, 7)):
        y0, x0 = rng.integers(0, 24, 2)
        h, w = rng.integers(4, 14, 2)
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, 3)
    return img


def _gradient_horizon(rng):
    horizon = rng.uniform(0.35, 0.65)
    yy, xx = _grid()
    sky = _vertical_gradient(rng.uniform(0.3, 0.7, 3), rng.uniform(0.7, 1.0, 3))
    ground = _vertical_gradient(rng.uniform(0.2, 0.5, 3), rng.uniform(0.0, 0.3, 3))
    wave = horizon + 0.05 * np.sin(2 * np.pi * (xx * rng.uniform(1, 3) + rng.uniform()))
    m = (yy > wave)[..., None]
    return np.where(m, ground, sky)


def _dark_field_stars(rng):
    img = np.ones((SIZE, SIZE, 3)) * rng.uniform(0.0, 0.12, 3)
    n = int(rng.integers(8, 25))
    ys, xs = rng.integers(0, SIZE, n), rng.integers(0, SIZE, n)
    img[ys, xs] = rng.uniform(0.7, 1.0, (n, 1)) * np.ones(3)
    _disk(img, rng.uniform(0.7, 1.0, 3), rng.uniform(4, 12), rng.uniform(4, 28), rng.uniform(1.5, 3.5))
    return img


def _branch_fractals(rng):
    img = _vertical_gradient(rng.uniform(0.6, 0.9, 3), rng.uniform(0.4, 0.7, 3))
    color = np.array([rng.uniform(0.1, 0.3), rng.uniform(0.35, 0.6), rng.uniform(0.05, 0.25)])

    def branch(y, x, angle, length, depth):
        if depth == 0 or length < 1.5:
            return
        y1, x1 = y - length * math.cos(angle), x + length * math.sin(angle)
        _line(img, color, y, x, y1, x1, width=0.6 + 0.2 * depth)
        spread = rng.uniform(0.3, 0.7)
        branch(y1, x1, angle - spread, length * 0.7, depth - 1)
        branch(y1, x1, angle + spread, length * 0.7, depth - 1)

    branch(31.0, rng.uniform(12, 20), rng.uniform(-0.2, 0.2), rng.uniform(8, 11), 4)
    return img


def _circles_table(rng):
    img = _vertical_gradient(rng.uniform(0.5, 0.8, 3), rng.uniform(0.5, 0.8, 3))
    table = int(rng.integers(18, 24))
    img[table:] = rng.uniform(0.3, 0.6, 3)
    for _ in range(rng.integers(2, 5)):
        r = rng.uniform(2.5, 5.0)
        _disk(img, rng.uniform(0, 1, 3), table - r + 1, rng.uniform(5, 27), r)
    return img


def _noise_texture(rng):
    base = rng.uniform(0, 1, (SIZE, SIZE, 3))
    return ndimage.gaussian_filter(base, sigma=(rng.uniform(0.8, 2.0),) * 2 + (0,), mode="wrap") * 0.8 + 0.1


_GENERATORS = (_blob_creatures, _grid_skyline, _stick_figures, _boxes, _gradient_horizon,
               _dark_field_stars, _branch_fractals, _circles_table, _noise_texture)


def gen_content(class_id: int, seed: int) -> np.ndarray:
    """Pristine ``32x32x3`` image in [0, 1]; a pure function of its arguments."""
    if not 0 <= int(class_id) < len(_GENERATORS):
        raise ValueError(f"class_id must be in [0, {len(_GENERATORS) - 1}], got {class_id}")
    rng = np.random.default_rng([int(class_id), int(seed), 0xC0])
    return np.clip(_GENERATORS[int(class_id)](rng), 0.0, 1.0)


# ---------------------------------------------------------------- distortions

def _block_mean(img, b):
    out = img.copy()
    for y in range(0, SIZE, b):
        for x in range(0, SIZE, b):
            out[y:y + b, x:x + b] = img[y:y + b, x:x + b].mean(axis=(0, 1))
    return out


def apply_distortion(image: np.ndarray, spec: DistortionSpec, seed: int = 0) -> np.ndarray:
    """Distort ``image``; severity 0 returns an exact copy. Output is clipped to [0, 1]."""
    s = spec.severity
    img = np.asarray(image, dtype=np.float64)
    if s == 0.0:
        return img.copy()
    rng = np.random.default_rng([int(seed), int(spec.type), 0xD1])
    t = spec.type
    if t is Distortion.GAUSSIAN_BLUR:
        radius = math.ceil(3 * s)
        out = ndimage.gaussian_filter(img, sigma=(radius / 2, radius / 2, 0),
                                      radius=(radius, radius, 0), mode="reflect")
    elif t is Distortion.GAUSSIAN_NOISE:
        out = img + rng.normal(0.0, 0.25 * s, img.shape)
    elif t is Distortion.IMPULSE_NOISE:
        hit = rng.random(img.shape[:2]) < 0.3 * s
        salt = rng.random(img.shape[:2]) < 0.5
        out = img.copy()
        out[hit & salt] = 1.0
        out[hit & ~salt] = 0.0
    elif t is Distortion.BLOCK_AVERAGING:
        out = _block_mean(img, 1 + int(math.floor(7 * s)))
    elif t is Distortion.OVEREXPOSURE:
        out = img * (1 + 2 * s) + 0.3 * s
    elif t is Distortion.UNDEREXPOSURE:
        out = img * (1 - 0.7 * s) - 0.2 * s
    elif t is Distortion.CONTRAST_REDUCTION:
        mean = img.mean(axis=(0, 1), keepdims=True)
        out = mean + (img - mean) * (1 - 0.9 * s)
    elif t is Distortion.PIXELATION:
        f = 1 + int(math.floor(7 * s))
        idx = (np.arange(SIZE) // f) * f
        out = img[idx][:, idx]
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown distortion {t}")
    return np.clip(out, 0.0, 1.0)


def proxy_mos(spec: DistortionSpec) -> float:
    """Stand-in quality label: ``1 - severity``."""
    return 1.0 - spec.severity


# ---------------------------------------------------------------- benchmark

@dataclass(frozen=True)
class BenchmarkConfig:
    train_types: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    eval_types: tuple[int, ...] = (6, 7)
    num_classes: int = 9
    train_contents_per_class: int = 10
    eval_contents_per_class: int = 10
    severities: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    test_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "train_types", tuple(int(t) for t in self.train_types))
        object.__setattr__(self, "eval_types", tuple(int(t) for t in self.eval_types))
        object.__setattr__(self, "severities", tuple(float(s) for s in self.severities))
        overlap = set(self.train_types) & set(self.eval_types)
        if overlap:
            raise ValueError(f"train and eval distortion types overlap: {sorted(overlap)}")
        for t in self.train_types + self.eval_types:
            Distortion(t)
        for s in self.severities:
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"severity {s} outside [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Record:
    image_id: int
    content_class: int
    distortion_type: int
    severity: float
    y: float
    seed: int
    split: str

    @property
    def content_id(self) -> tuple[int, int]:
        return (self.content_class, self.seed)


@dataclass
class Dataset:
    images: np.ndarray
    records: list[Record]

    def __len__(self):
        return len(self.records)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], [self.records[i] for i in idx])

    def where(self, **fields) -> np.ndarray:
        keep = [i for i, r in enumerate(self.records)
                if all(getattr(r, k) == v for k, v in fields.items())]
        return np.asarray(keep, dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.y for r in self.records])


def _as_f32_exact(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32).astype(np.float64)


def _render(records_spec, seed: int, start_id: int, split_of) -> Dataset:
    images, records = [], []
    cache: dict = {}
    for offset, (cls, content_seed, dtype, sev) in enumerate(records_spec):
        image_id = start_id + offset
        key = (cls, content_seed)
        if key not in cache:
            cache[key] = gen_content(cls, content_seed)
        spec = DistortionSpec(Distortion(dtype), sev)
        img = apply_distortion(cache[key], spec, seed=int(seed) * 1_000_003 + image_id)
        images.append(_as_f32_exact(img))
        records.append(Record(image_id, cls, int(dtype), float(sev), proxy_mos(spec),
                              content_seed, split_of(key)))
    arr = np.stack(images) if images else np.zeros((0, SIZE, SIZE, 3))
    return Dataset(arr, records)


def build_benchmark(config: BenchmarkConfig = BenchmarkConfig(), seed: int = 0) -> tuple[Dataset, Dataset]:
    """Meta-training set over ``train_types`` and an evaluation set over ``eval_types``.

    Evaluation content never appears in meta-training; its records are tagged
    ``train-pool`` or ``test`` by content id.
    """
    base = int(seed) * 100_000
    train_spec = [(c, base + k, t, s)
                  for t in config.train_types
                  for c in range(config.num_classes)
                  for k in range(config.train_contents_per_class)
                  for s in config.severities]
    meta = _render(train_spec, seed, 0, lambda key: "meta-train")

    eval_contents = [(c, base + 50_000 + k) for c in range(config.num_classes)
                     for k in range(config.eval_contents_per_class)]
    rng = np.random.default_rng([int(seed), 0x5B1])
    order = rng.permutation(len(eval_contents))
    n_test = max(1, int(round(config.test_fraction * len(eval_contents))))
    test_keys = {eval_contents[i] for i in order[:n_test]}
    eval_spec = [(c, k, t, s) for t in config.eval_types for (c, k) in eval_contents
                 for s in config.severities]
    evaluation = _render(eval_spec, seed, len(meta),
                         lambda key: "test" if key in test_keys else "train-pool")
    return meta, evaluation


# ---------------------------------------------------------------- file format

def write_dataset(prefix, dataset: Dataset) -> tuple[Path, Path]:
    """Write ``<prefix>.grmpimg`` and ``<prefix>.json``."""
    prefix = Path(prefix)
    images = np.asarray(dataset.images)
    n = len(dataset.records)
    h, w, c = images.shape[1:] if n else (SIZE, SIZE, 3)
    head = IMAGE_MAGIC + struct.pack("<4I", n, h, w, c)
    img_path = prefix.with_suffix(".grmpimg")
    img_path.write_bytes(head + images.astype("<f4").tobytes())
    man_path = prefix.with_suffix(".json")
    man_path.write_text(json.dumps({"records": [asdict(r) for r in dataset.records]}, indent=1))
    return img_path, man_path


def read_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < len(IMAGE_MAGIC) + 16:
        raise DatasetFormatError(f"{path}: file too short for header ({len(data)} bytes)")
    if data[:8] != IMAGE_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {data[:8]!r}")
    n, h, w, c = struct.unpack("<4I", data[8:24])
    need = 24 + 4 * n * h * w * c
    if len(data) != need:
        raise DatasetFormatError(f"{path}: expected {need} bytes for {n} images, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=24).astype(np.float64).reshape(n, h, w, c)


def read_dataset(prefix) -> Dataset:
    prefix = Path(prefix)
    images = read_images(prefix.with_suffix(".grmpimg"))
    try:
        raw = json.loads(prefix.with_suffix(".json").read_text())
        records = [Record(**r) for r in raw["records"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{prefix}.json: invalid manifest ({exc})") from exc
    if len(records) != len(images):
        raise DatasetFormatError(f"{prefix}: {len(images)} images but {len(records)} records")
    return Dataset(images, records)
