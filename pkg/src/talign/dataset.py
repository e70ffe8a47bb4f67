"""Dentition samples: the TALD container, a procedural generator, augmentations, splits.

A sample pairs a pre-alignment dentition (32 teeth x 128 points) with the per-tooth
rigid transforms that move each tooth to its aligned position.  Arrays are float64 in
memory; generated and decoded samples only hold float32-representable values, so the
container round-trips them bitwise.
"""

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import FormatError, InvalidArgumentError

log = logging.getLogger(__name__)

N_TEETH = 32
N_POINTS = 128

MAGIC = b"TALD"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class Dentition:
    points: np.ndarray  # (M, P, 3)
    validity: np.ndarray  # (M,) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[-1] != 3 or self.points.shape[1] == 0:
            raise InvalidArgumentError(f"dentition points must be (M, P, 3), got {self.points.shape}")
        if self.validity.shape != self.points.shape[:1]:
            raise InvalidArgumentError(
                f"validity shape {self.validity.shape} does not match {self.points.shape[0]} teeth"
            )
        if not np.all(np.isfinite(self.points)):
            raise InvalidArgumentError("dentition contains non-finite coordinates")

    @property
    def n_teeth(self):
        return self.points.shape[0]


@dataclass
class Sample:
    input: Dentition
    target: np.ndarray  # (M, 4, 4)
    id: str = ""

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.target.shape != (self.input.n_teeth, 4, 4):
            raise InvalidArgumentError(
                f"target must be ({self.input.n_teeth}, 4, 4), got {self.target.shape}"
            )

    @property
    def validity(self):
        return self.input.validity

    def aligned_points(self):
        return geo.apply_transform(self.target, self.input.points)


def identity_transforms(n=N_TEETH):
    return np.broadcast_to(np.eye(4), (n, 4, 4)).copy()


# container --------------------------------------------------------------------


def encode_sample(sample):
    """Serialise to TALD v1. Values are stored as float32."""
    m, p, _ = sample.input.points.shape
    parts = [
        _HEADER.pack(MAGIC, VERSION, m, p),
        sample.validity.astype(np.uint8).tobytes(),
        sample.input.points.astype("<f4").tobytes(),
        sample.target.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def decode_sample(blob, sample_id=""):
    blob = bytes(blob)
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} of {_HEADER.size} bytes", offset=len(blob))
    magic, version, m, p = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if m != N_TEETH or p != N_POINTS:
        raise FormatError(f"unexpected layout {m} teeth x {p} points", offset=8)
    off = _HEADER.size
    sizes = [("validity", m, np.uint8), ("points", m * p * 3, "<f4"), ("transforms", m * 16, "<f4")]
    arrays = {}
    for name, count, dtype in sizes:
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(blob):
            raise FormatError(f"truncated {name} block: need {nbytes} bytes, have {len(blob) - off}", offset=len(blob))
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += nbytes
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes", offset=off)
    validity = arrays["validity"]
    if np.any(validity > 1):
        raise FormatError("validity bytes must be 0 or 1", offset=_HEADER.size + int(np.argmax(validity > 1)))
    dent = Dentition(arrays["points"].astype(np.float64).reshape(m, p, 3), validity.astype(bool))
    return Sample(dent, arrays["transforms"].astype(np.float64).reshape(m, 4, 4), id=sample_id)


def write_sample(path, sample):
    Path(path).write_bytes(encode_sample(sample))


def read_sample(path):
    path = Path(path)
    return decode_sample(path.read_bytes(), sample_id=path.stem)


# procedural generator -------------------------------------------------------

# mesiodistal widths from the midline outwards, incisor to third molar
_UPPER_WIDTHS = np.array([8.5, 6.5, 7.5, 7.0, 6.5, 10.0, 9.0, 8.5])
_LOWER_WIDTHS = np.array([5.5, 6.0, 7.0, 7.0, 7.0, 11.0, 10.5, 10.0])


@dataclass
class GeneratorConfig:
    perturb_angle: float = np.deg2rad(10.0)  # radians, per Euler axis
    perturb_shift: float = 1.5  # arch units, per coordinate
    invalid_fraction: float = 0.05
    arch_curvature: tuple = (0.045, 0.065)  # y = -k x^2
    jaw_offset: float = 5.0  # z separation of each row from the occlusal plane


def _arch_positions(widths, curvature, rng):
    """Centres and tangent angles of 16 teeth placed by arc length along y = -k x^2."""
    xs = np.linspace(0.0, 60.0, 6001)
    ys = -curvature * xs**2
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(xs), np.diff(ys)))])
    gaps = rng.uniform(0.0, 0.4, size=len(widths))
    edges = np.cumsum(widths + gaps)
    mids = edges - (widths + gaps) / 2.0
    x_half = np.interp(mids, arc, xs)
    # right side is mirrored, ordered from the last molar to the midline
    x = np.concatenate([-x_half[::-1], x_half])
    y = -curvature * x**2
    tangent = np.arctan(-2.0 * curvature * x)
    w = np.concatenate([widths[::-1], widths])
    return x, y, tangent, w


def _tooth_cloud(width, height, tangent, centre, rng):
    """128 points on an ellipsoid surface aligned with the arch tangent."""
    d = rng.normal(size=(N_POINTS, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    axes = np.array([0.5 * width, 0.4 * width, height])
    local = d * axes
    rot = geo.euler_to_rotation(np.array([0.0, 0.0, tangent]))
    return local @ rot.T + centre


def _random_rigid_about(centre, max_angle, max_shift, rng):
    angles = rng.uniform(-max_angle, max_angle, size=3) if max_angle > 0 else np.zeros(3)
    shift = rng.uniform(-max_shift, max_shift, size=3) if max_shift > 0 else np.zeros(3)
    return _about_point(geo.euler_to_rotation(angles), centre, shift)


def _about_point(rotation, centre, shift=(0.0, 0.0, 0.0)):
    """Rotation about ``centre`` followed by a translation by ``shift``."""
    centre = np.asarray(centre, dtype=np.float64)
    return geo.make_transform(rotation, centre - rotation @ centre + np.asarray(shift))


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def generate_one(rng, config=None, sample_id=""):
    """One synthetic sample plus its ideal (aligned) point cloud."""
    config = config or GeneratorConfig()
    curvature = rng.uniform(*config.arch_curvature)
    scale = rng.uniform(0.95, 1.05)
    ideal = np.zeros((N_TEETH, N_POINTS, 3))
    for jaw, (widths, z, height) in enumerate(
        [(_UPPER_WIDTHS, config.jaw_offset, 4.5), (_LOWER_WIDTHS, -config.jaw_offset, 4.0)]
    ):
        x, y, tangent, w = _arch_positions(widths * scale, curvature, rng)
        for i in range(16):
            centre = np.array([x[i], y[i], z])
            ideal[jaw * 16 + i] = _tooth_cloud(w[i], height, tangent[i], centre, rng)

    validity = rng.random(N_TEETH) >= config.invalid_fraction
    points = np.zeros_like(ideal)
    target = identity_transforms()
    for i in np.flatnonzero(validity):
        perturb = _random_rigid_about(ideal[i].mean(axis=0), config.perturb_angle, config.perturb_shift, rng)
        points[i] = geo.apply_transform(perturb, ideal[i])
        target[i] = geo.invert(perturb)
    ideal[~validity] = 0.0
    sample = Sample(Dentition(_f32(points), validity), _f32(target), id=sample_id)
    return sample, ideal


def generate_synthetic(count, seed, config=None, return_ideal=False):
    """``count`` samples, each drawn from its own stream spawned from ``seed``."""
    if count < 1:
        raise InvalidArgumentError(f"count must be >= 1, got {count}")
    streams = np.random.SeedSequence(seed).spawn(count)
    samples, ideals = [], []
    for i, ss in enumerate(streams):
        s, ideal = generate_one(np.random.default_rng(ss), config, sample_id=f"sample_{i:04d}")
        samples.append(s)
        ideals.append(ideal)
    return (samples, ideals) if return_ideal else samples


# augmentation -----------------------------------------------------------------


@dataclass
class AugmentConfig:
    k_min: int = 5
    k_max: int = 10
    max_angle: float = np.deg2rad(15.0)
    max_shift: float = 2.0

    def __post_init__(self):
        if not 1 <= self.k_min <= self.k_max <= N_TEETH:
            raise InvalidArgumentError(f"need 1 <= k_min <= k_max <= {N_TEETH}, got {self.k_min}, {self.k_max}")
        if self.max_angle < 0 or self.max_shift < 0:
            raise InvalidArgumentError("max_angle and max_shift must be non-negative")


class AugmentationSkipped(UserWarning):
    pass


def _apply_perturbations(sample, perturbs):
    """Move teeth by ``perturbs`` ({tooth: 4x4}) and fold the inverses into the target."""
    points = sample.input.points.copy()
    target = sample.target.copy()
    for i, a in perturbs.items():
        points[i] = geo.apply_transform(a, points[i])
        target[i] = geo.compose(target[i], geo.invert(a))
    return Sample(Dentition(points, sample.validity.copy()), target, id=sample.id)


def augment_multi_rotation(sample, cfg, rng):
    """Rotate k randomly chosen valid teeth about their own centroids."""
    valid = np.flatnonzero(sample.validity)
    if len(valid) < cfg.k_min:
        warnings.warn(
            f"{sample.id or 'sample'}: {len(valid)} valid teeth < k_min={cfg.k_min}; rotation skipped",
            AugmentationSkipped,
            stacklevel=2,
        )
        return sample
    k = int(rng.integers(cfg.k_min, min(cfg.k_max, len(valid)) + 1))
    chosen = rng.choice(valid, size=k, replace=False)
    perturbs = {}
    for i in chosen:
        angles = rng.uniform(-cfg.max_angle, cfg.max_angle, size=3)
        perturbs[int(i)] = _about_point(geo.euler_to_rotation(angles), geo.centroid(sample.input.points[i]))
    return _apply_perturbations(sample, perturbs)


def augment_single_translation(sample, cfg, rng):
    """Translate one random valid tooth by a uniform offset in [-max_shift, max_shift]^3."""
    valid = np.flatnonzero(sample.validity)
    if len(valid) == 0:
        warnings.warn(f"{sample.id or 'sample'}: no valid teeth; translation skipped", AugmentationSkipped, stacklevel=2)
        return sample
    i = int(rng.choice(valid))
    shift = rng.uniform(-cfg.max_shift, cfg.max_shift, size=3)
    return _apply_perturbations(sample, {i: geo.translation(shift)})


# splits -----------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (74, 20, 30)

    def __post_init__(self):
        if len(self.ratios) != 3 or any(int(r) != r or r < 0 for r in self.ratios) or sum(self.ratios) <= 0:
            raise InvalidArgumentError(f"split ratios must be three non-negative integers with a positive sum, got {self.ratios}")


SPLIT_NAMES = ("train", "val", "test")


def split_sizes(n, spec):
    """Floor-proportional val/test sizes, remainder to train."""
    total = sum(spec.ratios)
    val = n * spec.ratios[1] // total
    test = n * spec.ratios[2] // total
    return n - val - test, val, test


def split_dataset(samples, spec, seed):
    samples = list(samples)
    n_train, n_val, _ = split_sizes(len(samples), spec)
    order = np.random.default_rng(seed).permutation(len(samples))
    picked = [samples[i] for i in order]
    return picked[:n_train], picked[n_train : n_train + n_val], picked[n_train + n_val :]


# dataset directories -----------------------------------------------------------

MANIFEST = "manifest.json"


@dataclass
class DatasetManifest:
    samples: list = field(default_factory=list)  # [{"id", "file", "split"}]
    seed: int = 0
    ratios: tuple = (74, 20, 30)

    def ids(self, split):
        return [s["id"] for s in self.samples if s["split"] == split]


def save_dataset(directory, samples, spec=SplitSpec(), seed=0):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits = split_dataset(samples, spec, seed)
    assignment = {s.id: name for name, part in zip(SPLIT_NAMES, splits) for s in part}
    entries = []
    for s in samples:
        fname = f"{s.id}.tald"
        write_sample(directory / fname, s)
        entries.append({"id": s.id, "file": fname, "split": assignment[s.id]})
    manifest = {"version": VERSION, "seed": seed, "ratios": list(spec.ratios), "samples": entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return DatasetManifest(entries, seed, tuple(spec.ratios))


def load_manifest(directory):
    path = Path(directory) / MANIFEST
    try:
        raw = json.loads(path.read_text())
        entries = raw["samples"]
        if not all({"id", "file", "split"} <= set(e) for e in entries):
            raise KeyError("id/file/split")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    return DatasetManifest(entries, raw.get("seed", 0), tuple(raw.get("ratios", (74, 20, 30))))


def load_split(directory, split):
    if split not in SPLIT_NAMES:
        raise InvalidArgumentError(f"unknown split {split!r}; expected one of {SPLIT_NAMES}")
    directory = Path(directory)
    manifest = load_manifest(directory)
    out = []
    for entry in manifest.samples:
        if entry["split"] == split:
            s = read_sample(directory / entry["file"])
            out.append(replace(s, id=entry["id"]))
    return out
