"""Feature/label file formats and the planted-offset synthetic benchmark.

Feature files (``TGMF``)::

    magic "TGMF" | u32 version=1 | u32 c | u32 d | u32 t | c*d*t float32

Label files (``TGML``)::

    magic "TGML" | u32 version=1 | u32 num_classes | u32 t | t*num_classes bytes

All integers and floats are little-endian; feature values are stored
c-major, then d, then t, and labels t-major.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

FEATURE_MAGIC = b"TGMF"
LABEL_MAGIC = b"TGML"
FORMAT_VERSION = 1


@dataclass
class FeatureSequence:
    """``c x d x t`` features; float32 on disk, float64 in memory."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3 or self.values.shape[2] < 1:
            raise ConfigError(f"features must be c x d x t with t >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("features contain non-finite values")

    @property
    def c(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def t(self) -> int:
        return self.values.shape[2]


@dataclass
class FrameLabels:
    """Multi-hot ground truth ``z`` of shape ``t x num_classes``."""

    z: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.uint8)
        if self.z.ndim != 2:
            raise ConfigError(f"labels must be t x num_classes, got {self.z.shape}")
        if self.z.size and self.z.max() > 1:
            raise ConfigError("labels must be 0 or 1")

    @property
    def t(self) -> int:
        return self.z.shape[0]

    @property
    def num_classes(self) -> int:
        return self.z.shape[1]


def _read_header(data: bytes, magic: bytes, n_fields: int, kind: str):
    size = 8 + 4 * n_fields
    if len(data) < 4 or data[:4] != magic:
        if len(data) >= 4:
            raise FormatError(f"bad {kind} magic {data[:4]!r}, expected {magic!r}", offset=0)
        raise FormatError(f"{kind} file truncated in magic", offset=len(data))
    if len(data) < size:
        raise FormatError(f"{kind} header truncated", offset=len(data))
    version, *fields = struct.unpack_from("<" + "I" * (n_fields + 1), data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported {kind} version {version}", offset=4)
    return fields, size


def save_features(path, seq: FeatureSequence) -> None:
    c, d, t = seq.values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, c, d, t))
        fh.write(np.ascontiguousarray(seq.values, dtype="<f4").tobytes())


def load_features(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        data = fh.read()
    (c, d, t), offset = _read_header(data, FEATURE_MAGIC, 3, "feature")
    n = c * d * t
    if len(data) < offset + 4 * n:
        raise FormatError(f"feature payload truncated: need {4 * n} bytes", offset=len(data))
    if len(data) > offset + 4 * n:
        raise FormatError("trailing bytes after feature payload", offset=offset + 4 * n)
    values = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(c, d, t)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
        raise FormatError("non-finite feature value", offset=offset + 4 * bad)
    return FeatureSequence(values.astype(np.float64))


def save_labels(path, labels: FrameLabels) -> None:
    t, k = labels.z.shape
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, k, t))
        fh.write(np.ascontiguousarray(labels.z, dtype=np.uint8).tobytes())


def load_labels(path) -> FrameLabels:
    with open(path, "rb") as fh:
        data = fh.read()
    (k, t), offset = _read_header(data, LABEL_MAGIC, 2, "label")
    n = k * t
    if len(data) < offset + n:
        raise FormatError(f"label payload truncated: need {n} bytes", offset=len(data))
    if len(data) > offset + n:
        raise FormatError("trailing bytes after label payload", offset=offset + n)
    z = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset)
    if n and z.max() > 1:
        bad = int(np.flatnonzero(z > 1)[0])
        raise FormatError(f"label byte {z[bad]} is not 0 or 1", offset=offset + bad)
    return FrameLabels(z.reshape(t, k).copy())


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, entries) -> None:
    """``entries`` is a list of ``(features_path, labels_path)`` relative to the manifest."""
    with open(path, "w") as fh:
        json.dump([{"features": f, "labels": l} for f, l in entries], fh, indent=1)
        fh.write("\n")


def load_dataset(manifest_path):
    """Load every pair listed in a manifest as ``(FeatureSequence, FrameLabels)``."""
    with open(manifest_path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ConfigError("manifest must be a JSON list")
    base = os.path.dirname(os.path.abspath(manifest_path))
    videos = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or set(entry) != {"features", "labels"}:
            raise ConfigError(f"manifest entry {i} must have exactly 'features' and 'labels'")
        feats = load_features(os.path.join(base, entry["features"]))
        labels = load_labels(os.path.join(base, entry["labels"]))
        if feats.t != labels.t:
            raise ConfigError(
                f"manifest entry {i}: {feats.t} feature frames but {labels.t} label frames")
        videos.append((feats, labels))
    return videos


# ---------------------------------------------------------------------------
# synthetic planted-offset data


@dataclass
class SynthSpec:
    """Continuous "videos" where class ``c`` is labelled ``delays[c]`` frames after its trigger."""

    num_videos: int = 200
    d: int = 16
    t_min: int = 80
    t_max: int = 120
    num_classes: int = 5
    delays: list = field(default_factory=lambda: [0, 2, 4, 6, 8])
    duration: int = 3
    noise_std: float = 0.5
    events_per_video: int = 6
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_videos", "d", "t_min", "t_max", "num_classes", "duration"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.events_per_video < 0 or self.noise_std < 0:
            raise ConfigError("events_per_video and noise_std must be non-negative")
        if self.t_max < self.t_min:
            raise ConfigError("t_max must be >= t_min")
        if len(self.delays) != self.num_classes:
            raise ConfigError(f"{len(self.delays)} delays for {self.num_classes} classes")
        if self.num_classes > self.d:
            raise ConfigError("orthogonal trigger directions need num_classes <= d")
        for c, delay in enumerate(self.delays):
            if delay < 0:
                raise ConfigError(f"delay of class {c} is negative")
            if delay + self.duration >= self.t_min:
                raise ConfigError(
                    f"class {c}: delay {delay} + duration {self.duration} must be < t_min {self.t_min}")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        allowed = set(cls.__dataclass_fields__)
        if not isinstance(data, dict):
            raise ConfigError("synthetic spec must be a JSON object")
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown synthetic spec field(s): {', '.join(sorted(unknown))}")
        spec = cls(**data)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    def trigger_directions(self):
        """``d x num_classes`` matrix of distinct, seeded standard basis vectors.

        Axis-aligned triggers keep each class visible in single feature rows,
        which the per-row temporal layers need to pick them up.
        """
        rng = np.random.default_rng([self.seed, 1])
        dims = rng.permutation(self.d)[:self.num_classes]
        out = np.zeros((self.d, self.num_classes))
        out[dims, np.arange(self.num_classes)] = 1.0
        return out


def gen_synthetic(spec: SynthSpec):
    """Generate ``spec.num_videos`` ``(FeatureSequence, FrameLabels)`` pairs.

    Values are rounded to float32 so that saving and reloading is lossless.
    """
    spec.validate()
    directions = spec.trigger_directions()
    rng = np.random.default_rng([spec.seed, 0])
    videos = []
    for _ in range(spec.num_videos):
        t = int(rng.integers(spec.t_min, spec.t_max + 1))
        x = rng.normal(0.0, spec.noise_std, size=(spec.d, t))
        z = np.zeros((t, spec.num_classes), dtype=np.uint8)
        for _ in range(spec.events_per_video):
            c = int(rng.integers(spec.num_classes))
            delay = spec.delays[c]
            t0 = int(rng.integers(0, t - delay - spec.duration + 1))
            x[:, t0:t0 + spec.duration] += directions[:, c:c + 1]
            z[t0 + delay:t0 + delay + spec.duration, c] = 1
        values = x.astype(np.float32).astype(np.float64)
        videos.append((FeatureSequence(values[None]), FrameLabels(z)))
    return videos


def save_dataset(videos, out_dir, prefix="video") -> str:
    """Write TGMF/TGML files and ``manifest.json``; return the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (feats, labels) in enumerate(videos):
        f_name = f"{prefix}_{i:05d}.tgmf"
        l_name = f"{prefix}_{i:05d}.tgml"
        save_features(os.path.join(out_dir, f_name), feats)
        save_labels(os.path.join(out_dir, l_name), labels)
        entries.append((f_name, l_name))
    manifest = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, entries)
    return manifest


def summarize(videos) -> dict:
    return {
        "videos": len(videos),
        "frames": int(sum(f.t for f, _ in videos)),
        "positives_per_class": [int(v) for v in
                                np.sum([l.z.sum(axis=0) for _, l in videos], axis=0)],
    }
