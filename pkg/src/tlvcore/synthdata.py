"""Deterministic synthetic tactile / vision / language triplets with sensor style.

Every object instance has a class-dependent surface texture (a sinusoidal
grating whose orientation and frequency identify the material, plus a fine
cross-grating whose amplitude encodes roughness). The tactile image renders
that texture as a gel impression whose contrast depends on hardness and
then applies the capturing sensor's style: per-channel tint, gain and an
illumination ramp. The vision image shows the same texture in the object's
own colours with no sensor style. The text is a fixed template.

``style_overlap`` interpolates all sensor profiles towards one common
profile; at 1.0 every sensor renders identically.

Randomness comes from numpy's Philox counter-based generator. Each draw
uses its own key ``[seed, stream]`` where ``stream`` packs
``kind << 48 | a << 24 | b`` (kind 1: object instance (class, index),
kind 2: tactile noise (object, sensor), kind 3: vision noise (object),
kind 4: split shuffle (class)).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetFormatError

MAGIC = b"TLVD"
VERSION = 1
SPLITS = ("train", "val", "test")

_KIND_OBJECT, _KIND_TNOISE, _KIND_VNOISE, _KIND_SPLIT = 1, 2, 3, 4
_FINE_FREQ = 6.0
_ILLUM_STRENGTH = 0.3
_VISION_NOISE = 0.02


def _rng(seed: int, kind: int, a: int = 0, b: int = 0) -> np.random.Generator:
    stream = (kind << 48) | (a << 24) | b
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), stream]))


@dataclass(frozen=True)
class SensorProfile:
    sensor_id: int
    tint: tuple
    gain: float
    illum_dir: tuple
    noise_std: float
    illum_strength: float = _ILLUM_STRENGTH

    def __post_init__(self):
        if self.gain <= 0:
            raise ConfigurationError("sensor gain must be positive")
        if any(abs(t) > 1 for t in self.tint):
            raise ConfigurationError("tint components must lie in [-1, 1]")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")


@dataclass(frozen=True)
class ObjectSpec:
    label: int
    frequency: float
    orientation: float
    phase: float
    hardness: float
    roughness: float
    albedo: tuple = (0.6, 0.6, 0.6)

    @property
    def roughness_label(self) -> int:
        return int(self.roughness > 0.5)

    @property
    def hardness_label(self) -> int:
        return int(self.hardness > 0.5)

    def features(self) -> np.ndarray:
        """Ground-truth scalars; orientation enters as a doubled angle (period pi)."""
        return np.array([
            self.frequency, math.cos(2 * self.orientation), math.sin(2 * self.orientation),
            self.hardness, self.roughness,
        ])


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 4
    num_sensors: int = 2
    samples_per_cell: int = 50
    style_overlap: float = 0.0
    image_size: int = 16
    patch_size: int = 4
    noise_std: float = 0.05
    vision_from_tactile: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.num_sensors < 1:
            raise ConfigurationError("need >= 2 classes and >= 1 sensor")
        if self.num_classes > 255 or self.num_sensors > 255:
            raise ConfigurationError("labels are stored as u8")
        if not 0.0 <= self.style_overlap <= 1.0:
            raise ConfigurationError("style_overlap must lie in [0, 1]")
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigurationError("patch_size must divide image_size")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

_FIXED_WORDS = ["<pad>", "material", "roughness", "hardness", "rough", "smooth", "hard", "soft"]
TEXT_LEN = 6


def build_vocab(num_classes: int) -> list[str]:
    return _FIXED_WORDS + [f"mat{k:02d}" for k in range(num_classes)]


def describe(label: int, roughness_label: int, hardness_label: int) -> list[str]:
    return [
        "material", f"mat{label:02d}",
        "roughness", "rough" if roughness_label else "smooth",
        "hardness", "hard" if hardness_label else "soft",
    ]


def tokenize(words: list[str], vocab: list[str]) -> np.ndarray:
    index = {w: i for i, w in enumerate(vocab)}
    return np.array([index[w] for w in words], dtype=np.int64)


# ---------------------------------------------------------------------------
# profiles and objects
# ---------------------------------------------------------------------------


def base_profile(sensor_id: int, num_sensors: int, noise_std: float) -> SensorProfile:
    """Maximally distinct style of sensor ``s`` before any overlap."""
    t = sensor_id / num_sensors
    tint = tuple(0.35 * math.cos(2 * math.pi * (t + c / 3)) for c in range(3))
    gain = math.exp(0.35 * math.cos(2 * math.pi * t + 1.0))
    angle = 2 * math.pi * t + 0.3
    return SensorProfile(sensor_id, tint, gain, (math.cos(angle), math.sin(angle)), noise_std)


def common_profile(noise_std: float) -> SensorProfile:
    return SensorProfile(-1, (0.0, 0.0, 0.0), 1.0, (1.0, 0.0), noise_std)


def make_profiles(cfg: DatasetConfig) -> list[SensorProfile]:
    a = cfg.style_overlap
    common = common_profile(cfg.noise_std)
    out = []
    for s in range(cfg.num_sensors):
        b = base_profile(s, cfg.num_sensors, cfg.noise_std)
        tint = tuple((1 - a) * x + a * y for x, y in zip(b.tint, common.tint))
        gain = math.exp((1 - a) * math.log(b.gain) + a * math.log(common.gain))
        d = np.array(b.illum_dir) * (1 - a) + np.array(common.illum_dir) * a
        n = float(np.linalg.norm(d))
        direction = tuple(d / n) if n > 1e-9 else common.illum_dir
        if a == 1.0:
            tint, gain, direction = common.tint, common.gain, common.illum_dir
        out.append(SensorProfile(s, tint, gain, direction, cfg.noise_std))
    return out


def class_prototype(label: int, num_classes: int) -> tuple[float, float]:
    """(frequency in cycles per image, orientation in [0, pi)) of a material."""
    return 2.0 + 0.75 * (label % 3), math.pi * label / num_classes


def sample_object(label: int, index: int, cfg: DatasetConfig) -> ObjectSpec:
    rng = _rng(cfg.seed, _KIND_OBJECT, label, index)
    freq, theta = class_prototype(label, cfg.num_classes)
    spacing = math.pi / cfg.num_classes
    return ObjectSpec(
        label=label,
        frequency=float(freq * (1.0 + 0.03 * rng.standard_normal())),
        orientation=float(theta + spacing / 12.0 * rng.standard_normal()),
        phase=float(rng.uniform(0.0, 2 * math.pi)),
        hardness=float(rng.uniform()),
        roughness=float(rng.uniform()),
        albedo=tuple(float(x) for x in rng.uniform(0.3, 0.9, size=3)),
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(c, c, indexing="ij")  # v: row, u: column
    return u, v


def _texture(obj: ObjectSpec, size: int) -> tuple[np.ndarray, np.ndarray]:
    u, v = _coords(size)
    ct, st = math.cos(obj.orientation), math.sin(obj.orientation)
    base = np.sin(2 * math.pi * obj.frequency * (u * ct + v * st) + obj.phase)
    fine = np.sin(2 * math.pi * _FINE_FREQ * (-u * st + v * ct) + 3.0 * obj.phase)
    return base, fine


def render_tactile(obj: ObjectSpec, profile: SensorProfile, size: int, noise: np.ndarray | None) -> np.ndarray:
    base, fine = _texture(obj, size)
    u, v = _coords(size)
    height = base + 0.5 * obj.roughness * fine
    depth = 0.25 + 0.5 * obj.hardness
    shade = profile.gain * (0.5 + 0.5 * depth * height)
    ramp = profile.illum_strength * ((u - 0.5) * profile.illum_dir[0] + (v - 0.5) * profile.illum_dir[1])
    img = (shade + ramp)[..., None] + np.asarray(profile.tint)[None, None, :]
    if noise is not None:
        img = img + profile.noise_std * noise
    return img


def render_vision(obj: ObjectSpec, size: int, noise: np.ndarray | None) -> np.ndarray:
    base, fine = _texture(obj, size)
    img = np.asarray(obj.albedo)[None, None, :] * (0.55 + 0.35 * base)[..., None]
    img = img + (0.08 * obj.roughness * fine)[..., None]
    if noise is not None:
        img = img + _VISION_NOISE * noise
    return img


def _f32(x: np.ndarray) -> np.ndarray:
    # grids are stored as f32, so in-memory values are rounded the same way
    return x.astype(np.float32).astype(np.float64)


@dataclass
class Triplet:
    tactile: np.ndarray
    vision: np.ndarray
    tokens: np.ndarray
    sensor: int
    label: int
    roughness: int
    hardness: int
    object_id: int = 0


def render_triplet(obj: ObjectSpec, profile: SensorProfile, cfg: DatasetConfig, seed: int,
                   object_id: int = 0, vocab: list[str] | None = None) -> Triplet:
    """Render one triplet; a pure function of its arguments."""
    size = cfg.image_size
    tnoise = _rng(seed, _KIND_TNOISE, object_id, profile.sensor_id & 0xFFFFFF).standard_normal((size, size, 3))
    vnoise = _rng(seed, _KIND_VNOISE, object_id).standard_normal((size, size, 3))
    tactile = _f32(render_tactile(obj, profile, size, tnoise))
    vision = tactile.copy() if cfg.vision_from_tactile else _f32(render_vision(obj, size, vnoise))
    vocab = vocab or build_vocab(cfg.num_classes)
    tokens = tokenize(describe(obj.label, obj.roughness_label, obj.hardness_label), vocab)
    return Triplet(tactile, vision, tokens, profile.sensor_id, obj.label,
                   obj.roughness_label, obj.hardness_label, object_id)


# ---------------------------------------------------------------------------
# collated arrays
# ---------------------------------------------------------------------------

TASKS = ("material", "roughness", "hardness")


@dataclass
class Batch:
    tactile: np.ndarray
    vision: np.ndarray
    tokens: np.ndarray
    sensors: np.ndarray
    labels: np.ndarray
    roughness: np.ndarray
    hardness: np.ndarray
    object_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(*(getattr(self, f)[idx] for f in _BATCH_FIELDS))

    def where(self, mask) -> "Batch":
        return self.take(np.flatnonzero(mask))

    def task_labels(self, task: str) -> np.ndarray:
        if task == "material":
            return self.labels
        if task == "roughness":
            return self.roughness
        if task == "hardness":
            return self.hardness
        raise ConfigurationError(f"unknown task {task!r}")

    @classmethod
    def collate(cls, triplets: list[Triplet]) -> "Batch":
        return cls(
            np.stack([t.tactile for t in triplets]),
            np.stack([t.vision for t in triplets]),
            np.stack([t.tokens for t in triplets]),
            np.array([t.sensor for t in triplets], dtype=np.int64),
            np.array([t.label for t in triplets], dtype=np.int64),
            np.array([t.roughness for t in triplets], dtype=np.int64),
            np.array([t.hardness for t in triplets], dtype=np.int64),
            np.array([t.object_id for t in triplets], dtype=np.int64),
        )


_BATCH_FIELDS = ("tactile", "vision", "tokens", "sensors", "labels", "roughness", "hardness", "object_ids")


@dataclass
class Dataset:
    config: DatasetConfig
    splits: dict[str, Batch]
    vocab: list[str] = field(default_factory=list)

    def manifest(self) -> dict:
        counts = {}
        for name, b in self.splits.items():
            counts[name] = {
                "total": len(b),
                "per_class": np.bincount(b.labels, minlength=self.config.num_classes).tolist(),
                "per_sensor": np.bincount(b.sensors, minlength=self.config.num_sensors).tolist(),
            }
        return {
            "format": "TLVD",
            "version": VERSION,
            "config": self.config.to_dict(),
            "vocab": list(self.vocab),
            "counts": counts,
            "splits": {name: {"object_ids": b.object_ids.tolist()} for name, b in self.splits.items()},
        }


def split_sizes(n: int) -> tuple[int, int, int]:
    """8:1:1 train/val/test split of ``n`` objects."""
    n_val = n // 10
    n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def generate_dataset(cfg: DatasetConfig) -> Dataset:
    """Render every (object, sensor) pair; splits are disjoint by object.

    Each class has ``samples_per_cell`` object instances and every instance
    is touched by every sensor, so each (class, sensor) cell holds exactly
    ``samples_per_cell`` triplets.
    """
    if cfg.samples_per_cell < 10:
        raise ConfigurationError("samples_per_cell must be >= 10 for an 8:1:1 split")
    vocab = build_vocab(cfg.num_classes)
    profiles = make_profiles(cfg)
    n = cfg.samples_per_cell
    n_train, n_val, _ = split_sizes(n)
    members: dict[str, list[Triplet]] = {s: [] for s in SPLITS}
    for y in range(cfg.num_classes):
        # membership depends only on (K, n): datasets that differ by seed share a manifest
        order = _rng(0, _KIND_SPLIT, y).permutation(n)
        split_of = {}
        for rank, i in enumerate(order):
            split_of[int(i)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        for i in range(n):
            obj = sample_object(y, i, cfg)
            oid = y * n + i
            for prof in profiles:
                members[split_of[i]].append(render_triplet(obj, prof, cfg, cfg.seed, oid, vocab))
    return Dataset(cfg, {s: Batch.collate(members[s]) for s in SPLITS}, vocab)


# ---------------------------------------------------------------------------
# binary records
# ---------------------------------------------------------------------------

_HEADER = np.dtype([
    ("magic", "S4"), ("version", "<u4"), ("num_classes", "<u4"), ("num_sensors", "<u4"),
    ("height", "<u4"), ("width", "<u4"), ("channels", "<u4"), ("text_len", "<u4"), ("count", "<u4"),
])


def _record_dtype(h: int, w: int, c: int, text_len: int) -> np.dtype:
    return np.dtype([
        ("tactile", "<f4", (h, w, c)), ("vision", "<f4", (h, w, c)), ("tokens", "<u2", (text_len,)),
        ("sensor", "u1"), ("label", "u1"), ("roughness", "u1"), ("hardness", "u1"),
    ])


def write_split(path, batch: Batch, cfg: DatasetConfig) -> None:
    n = len(batch)
    h = w = cfg.image_size
    header = np.zeros(1, _HEADER)
    header[0] = (MAGIC, VERSION, cfg.num_classes, cfg.num_sensors, h, w, 3, TEXT_LEN, n)
    rec = np.zeros(n, _record_dtype(h, w, 3, TEXT_LEN))
    rec["tactile"] = batch.tactile
    rec["vision"] = batch.vision
    rec["tokens"] = batch.tokens
    rec["sensor"] = batch.sensors
    rec["label"] = batch.labels
    rec["roughness"] = batch.roughness
    rec["hardness"] = batch.hardness
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(rec.tobytes())


def read_split(path, object_ids) -> Batch:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.itemsize:
        raise DatasetFormatError(f"{path}: truncated header")
    header = np.frombuffer(raw[: _HEADER.itemsize], _HEADER)[0]
    if header["magic"] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {header['magic']!r}")
    if header["version"] != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {header['version']}")
    dt = _record_dtype(int(header["height"]), int(header["width"]), int(header["channels"]),
                       int(header["text_len"]))
    n = int(header["count"])
    body = raw[_HEADER.itemsize:]
    if len(body) != n * dt.itemsize:
        raise DatasetFormatError(f"{path}: expected {n} records, file size disagrees")
    rec = np.frombuffer(body, dt)
    ids = np.asarray(object_ids, dtype=np.int64)
    if ids.shape[0] != n:
        raise DatasetFormatError(f"{path}: manifest lists {ids.shape[0]} objects for {n} records")
    return Batch(
        rec["tactile"].astype(np.float64), rec["vision"].astype(np.float64),
        rec["tokens"].astype(np.int64), rec["sensor"].astype(np.int64),
        rec["label"].astype(np.int64), rec["roughness"].astype(np.int64),
        rec["hardness"].astype(np.int64), ids,
    )


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_dataset(ds: Dataset, directory, extra: dict | None = None) -> dict:
    """Write ``<split>.tlvd`` files plus ``manifest.json``; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = ds.manifest()
    for name, batch in ds.splits.items():
        fname = f"{name}.tlvd"
        write_split(directory / fname, batch, ds.config)
        manifest["splits"][name]["file"] = fname
        manifest["splits"][name]["sha256"] = sha256_file(directory / fname)
    if extra:
        manifest.update(extra)
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, directory / "manifest.json")
    return manifest


def load_dataset(directory, verify: bool = True) -> Dataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise DatasetFormatError(f"{directory}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "TLVD":
        raise DatasetFormatError(f"{directory}: not a TLVD dataset manifest")
    cfg = DatasetConfig(**manifest["config"])
    splits = {}
    for name in SPLITS:
        info = manifest["splits"][name]
        path = directory / info["file"]
        if verify and sha256_file(path) != info["sha256"]:
            raise DatasetFormatError(f"{path}: content hash does not match manifest")
        splits[name] = read_split(path, info["object_ids"])
    return Dataset(cfg, splits, manifest["vocab"])
