"""Synthetic phantoms, intensity preprocessing and nested label-fraction splits.

Each phantom is a 2D cross-section with four exclusive tissue classes:

0. a thin ring under the body outline (hard: few pixels, thin)
1. a thick ring inside it (bulky)
2. an offset blob in the core (bulky)
3. a few small spots inside the thick ring (hard: tiny, low contrast)

Everything else is background (air outside the body, soft tissue inside).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

N_CLASSES = 4
FRACTIONS = (1.0, 0.5, 0.25, 0.10, 0.05)

# (mean, std) per class, then background (air, soft tissue); CT in HU
CT_CLASSES = ((-100.0, 10.0), (45.0, 10.0), (-90.0, 12.0), (-40.0, 10.0))
CT_BACKGROUND = ((-1000.0, 5.0), (30.0, 10.0))
MR_CLASSES = ((620.0, 30.0), (300.0, 25.0), (460.0, 30.0), (380.0, 25.0))
MR_BACKGROUND = ((0.0, 2.0), (200.0, 20.0))


class ConfigError(ValueError):
    pass


class ChecksumError(IOError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class WindowLevel:
    width: float
    level: float

    def __post_init__(self):
        if not self.width > 0:
            raise ConfigError(f"window width must be positive, got {self.width}")


SOFT_TISSUE = WindowLevel(400, 50)
BONE = WindowLevel(1800, 40)
CUSTOM = WindowLevel(500, 50)
CT_WINDOWS = (SOFT_TISSUE, BONE, CUSTOM)


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    n_images: int = 200
    modality: str = "ct"
    class_model: Optional[tuple] = None       # ((mean, std),) * 4; None -> modality default
    background_model: Optional[tuple] = None  # ((air_mean, air_std), (tissue_mean, tissue_std))
    noise_std: Optional[float] = None
    ring_thickness: tuple = (2.5, 4.0)
    spots: tuple = (2, 4)
    spot_radius: tuple = (1.6, 2.4)
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return N_CLASSES

    def classes(self) -> tuple:
        if self.class_model is not None:
            return tuple(tuple(c) for c in self.class_model)
        return CT_CLASSES if self.modality == "ct" else MR_CLASSES

    def background(self) -> tuple:
        if self.background_model is not None:
            return tuple(tuple(c) for c in self.background_model)
        return CT_BACKGROUND if self.modality == "ct" else MR_BACKGROUND

    def noise(self) -> float:
        if self.noise_std is not None:
            return float(self.noise_std)
        return 15.0 if self.modality == "ct" else 30.0

    @property
    def channels(self) -> int:
        return 3 if self.modality == "ct" else 1

    def validate(self) -> None:
        if self.modality not in ("ct", "mr"):
            raise ConfigError(f"modality must be 'ct' or 'mr', got {self.modality!r}")
        if self.image_size < 24:
            raise ConfigError(f"image_size {self.image_size} too small for the phantom shapes")
        if self.n_images < 1:
            raise ConfigError("n_images must be positive")
        if len(self.classes()) != N_CLASSES or len(self.background()) != 2:
            raise ConfigError("class_model needs 4 (mean, std) pairs and background_model 2")
        if any(s < 0 for _, s in self.classes() + self.background()) or self.noise() < 0:
            raise ConfigError("standard deviations must be non-negative")
        lo, hi = self.ring_thickness
        if not 0 < lo <= hi:
            raise ConfigError(f"degenerate ring thickness range {self.ring_thickness}")
        if not (0 < self.spots[0] <= self.spots[1]) or not (0 < self.spot_radius[0] <= self.spot_radius[1]):
            raise ConfigError("spot count and radius ranges must be positive and ordered")


@dataclass
class Phantoms:
    images: np.ndarray   # N x S x S noisy acquisitions
    labels: np.ndarray   # N x S x S x 4 uint8, exclusive
    raw: np.ndarray      # N x S x S noiseless parameter map
    spec: PhantomSpec


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    ct, st = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * ct + dy * st) / rx
    v = (-dx * st + dy * ct) / ry
    return u * u + v * v <= 1.0


def _one_phantom(rng: np.random.Generator, spec: PhantomSpec):
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    for _ in range(100):
        cy = s / 2 + rng.uniform(-0.04, 0.04) * s
        cx = s / 2 + rng.uniform(-0.04, 0.04) * s
        ry = rng.uniform(0.30, 0.38) * s
        rx = rng.uniform(0.38, 0.45) * s
        th = rng.uniform(-0.3, 0.3)
        t = rng.uniform(*spec.ring_thickness)
        body = _ellipse(yy, xx, cy, cx, ry, rx, th)
        inner = _ellipse(yy, xx, cy, cx, ry - t, rx - t, th)
        f = rng.uniform(0.62, 0.72)
        core = _ellipse(yy, xx, cy, cx, (ry - t) * f, (rx - t) * f, th)
        by = cy + rng.uniform(-0.25, 0.25) * (ry - t) * f
        bx = cx + rng.uniform(-0.25, 0.25) * (rx - t) * f
        blob = core & _ellipse(yy, xx, by, bx, (ry - t) * f * rng.uniform(0.45, 0.65),
                               (rx - t) * f * rng.uniform(0.45, 0.65), rng.uniform(0, math.pi))
        muscle = inner & ~core
        spots = np.zeros_like(body)
        n_spots = int(rng.integers(spec.spots[0], spec.spots[1] + 1))
        ys, xs = np.nonzero(muscle)
        for _ in range(n_spots):
            k = int(rng.integers(len(ys)))
            r = rng.uniform(*spec.spot_radius)
            spots |= ((yy - ys[k] - 0.5) ** 2 + (xx - xs[k] - 0.5) ** 2 <= r * r) & muscle
        labels = np.stack([body & ~inner, muscle & ~spots, blob, spots], axis=-1)
        if labels.reshape(-1, N_CLASSES).sum(axis=0).min() > 0:
            return labels, body
    raise ConfigError("phantom shape parameters keep producing empty classes")


def gen_phantom(spec: PhantomSpec) -> Phantoms:
    """Deterministic phantom stack: (noisy images, exact labels, noiseless parameter maps)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s, n = spec.image_size, spec.n_images
    images = np.empty((n, s, s))
    raw = np.empty((n, s, s))
    labels = np.empty((n, s, s, N_CLASSES), np.uint8)
    classes, (air, tissue) = spec.classes(), spec.background()
    for i in range(n):
        lab, body = _one_phantom(rng, spec)
        mean = np.where(body, tissue[0], air[0])
        std = np.where(body, tissue[1], air[1])
        for c, (m, sd) in enumerate(classes):
            mean = np.where(lab[..., c], m, mean)
            std = np.where(lab[..., c], sd, std)
        raw[i] = mean + std * rng.standard_normal((s, s))
        images[i] = raw[i] + spec.noise() * rng.standard_normal((s, s))
        labels[i] = lab
    return Phantoms(images, labels, raw, spec)


# --------------------------------------------------------------------------
# preprocessing


def hu_window(raw, wl: WindowLevel) -> np.ndarray:
    """Map [L - W/2, L + W/2] linearly onto [0, 1], clipping outside."""
    lo = wl.level - wl.width / 2.0
    return np.clip((np.asarray(raw, dtype=np.float64) - lo) / wl.width, 0.0, 1.0)


def window_stack(raw, windows: Sequence[WindowLevel] = CT_WINDOWS) -> np.ndarray:
    """Stack windowed copies along a new last axis (soft-tissue, bone, custom by default)."""
    return np.stack([hu_window(raw, wl) for wl in windows], axis=-1)


PER_VOLUME = "per_volume"
PER_CHANNEL = "per_channel"


def normalize(stack, mode: str = PER_VOLUME) -> np.ndarray:
    """Zero-mean, unit-std normalization of an N x H x W x C stack.

    ``per_volume`` uses one mean/std per item (all pixels and channels);
    ``per_channel`` uses one per item and channel.
    """
    x = np.asarray(stack, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected N x H x W x C stack, got shape {x.shape}")
    if mode == PER_VOLUME:
        axes = (1, 2, 3)
    elif mode == PER_CHANNEL:
        axes = (1, 2)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    mu = x.mean(axis=axes, keepdims=True)
    sd = x.std(axis=axes, keepdims=True)
    if (sd == 0).any():
        bad = np.argwhere(sd.reshape(sd.shape[0], -1) == 0)[0]
        scope = f"item {bad[0]}" + (f", channel {bad[1]}" if mode == PER_CHANNEL else "")
        raise DegenerateInputError(f"zero variance in normalization scope ({mode}: {scope})")
    return (x - mu) / sd


def preprocess(images: np.ndarray, modality: str) -> np.ndarray:
    """Network inputs from acquisitions: CT -> 3 windows, per-channel norm; MR -> per-volume norm."""
    if modality == "ct":
        return normalize(window_stack(images), PER_CHANNEL)
    return normalize(np.asarray(images)[..., None], PER_VOLUME)


# --------------------------------------------------------------------------
# splits


def split_size(fraction: float, n: int, rounding: str = "ceil") -> int:
    x = fraction * n
    if rounding == "ceil":
        # guard against 0.1 * 90 = 9.000000000000002
        k = math.ceil(round(x, 9))
    elif rounding == "half_even":
        k = round(x)
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    return max(1, min(n, int(k)))


def make_splits(ids: Sequence, fractions: Sequence[float] = FRACTIONS, seed: int = 0,
                rounding: str = "ceil") -> dict:
    """Nested label-fraction subsets: each subset is a prefix of one seeded permutation."""
    ids = list(ids)
    if len(ids) < 20:
        raise ConfigError(f"need at least 20 ids for label-fraction splits, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    out = {}
    for f in fractions:
        if not 0 < f <= 1:
            raise ConfigError(f"fraction {f} outside (0, 1]")
        out[float(f)] = sorted(ids[i] for i in order[: split_size(f, len(ids), rounding)])
    return out


def partition(n: int, sizes: dict, seed: int) -> dict:
    """Disjoint named id sets (e.g. unlabeled/train/val/test) from one seeded permutation."""
    total = sum(sizes.values())
    if total > n:
        raise ConfigError(f"partition sizes sum to {total} but only {n} items exist")
    order = np.random.default_rng([seed, 1]).permutation(n)
    out, pos = {}, 0
    for name, k in sizes.items():
        out[name] = sorted(int(i) for i in order[pos:pos + k])
        pos += k
    return out


# --------------------------------------------------------------------------
# datasets on disk


@dataclass
class Dataset:
    phantoms: Phantoms
    splits: dict = field(default_factory=dict)       # name -> ids
    fractions: dict = field(default_factory=dict)    # fraction -> train ids
    _inputs: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def spec(self) -> PhantomSpec:
        return self.phantoms.spec

    @property
    def inputs(self) -> np.ndarray:
        if self._inputs is None:
            self._inputs = preprocess(self.phantoms.images, self.spec.modality)
        return self._inputs

    @property
    def targets(self) -> np.ndarray:
        return self.phantoms.labels.astype(np.float64)


DEFAULT_SIZES = {"unlabeled": 128, "train": 40, "val": 16, "test": 16}


def make_dataset(spec: PhantomSpec, sizes: Optional[dict] = None, split_seed: Optional[int] = None,
                 fractions: Sequence[float] = FRACTIONS) -> Dataset:
    sizes = dict(DEFAULT_SIZES if sizes is None else sizes)
    seed = spec.seed if split_seed is None else split_seed
    ph = gen_phantom(spec)
    splits = partition(spec.n_images, sizes, seed)
    fr = make_splits(splits["train"], fractions, seed) if "train" in splits else {}
    return Dataset(ph, splits, fr)


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def save_dataset(ds: Dataset, path) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    ph = ds.phantoms
    blobs = {
        "images.bin": (ph.images.astype("<f8"), "<f8"),
        "labels.bin": (ph.labels.astype(np.uint8), "u1"),
        "raw.bin": (ph.raw.astype("<f8"), "<f8"),
    }
    manifest = {"spec": asdict(ph.spec), "seed": ph.spec.seed, "arrays": {},
                "splits": ds.splits, "fractions": {repr(k): v for k, v in ds.fractions.items()}}
    for fname, (arr, dtype) in blobs.items():
        data = arr.tobytes()
        (d / fname).write_bytes(data)
        manifest["arrays"][fname] = {"shape": list(arr.shape), "dtype": dtype, "sha256": _sha256(data)}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path) -> Dataset:
    d = Path(path)
    manifest = json.loads((d / "manifest.json").read_text())
    arrays = {}
    for fname, meta in manifest["arrays"].items():
        data = (d / fname).read_bytes()
        if _sha256(data) != meta["sha256"]:
            raise ChecksumError(f"{fname}: checksum mismatch")
        arrays[fname] = np.frombuffer(data, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
    sd = manifest["spec"]
    for k in ("class_model", "background_model"):
        if sd.get(k) is not None:
            sd[k] = tuple(tuple(c) for c in sd[k])
    for k in ("ring_thickness", "spots", "spot_radius"):
        sd[k] = tuple(sd[k])
    spec = PhantomSpec(**sd)
    ph = Phantoms(arrays["images.bin"].astype(np.float64), arrays["labels.bin"],
                  arrays["raw.bin"].astype(np.float64), spec)
    fractions = {float(k): v for k, v in manifest["fractions"].items()}
    return Dataset(ph, manifest["splits"], fractions)
