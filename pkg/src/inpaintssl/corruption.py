"""Patch corruption masks for the two inpainting pretext tasks.

Context prediction zeroes square patches; context restoration swaps pairs of
disjoint square patches.  Patch positions are integer top-left corners
``(row, col)`` of ``K x K`` squares lying fully inside an ``H x W`` image.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .tensorcore import ShapeError

RANDOM = "random"
POISSON_DISC = "poisson_disc"
SAMPLERS = (RANDOM, POISSON_DISC)

PREDICTION = "context_prediction"
RESTORATION = "context_restoration"
TASKS = (PREDICTION, RESTORATION)

BANK_SIZE = 100
ROTATIONS = 4


@dataclass(frozen=True)
class PatchSpec:
    K: int
    H: int
    W: int
    sampler: str = POISSON_DISC

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if not 1 <= self.K <= min(self.H, self.W):
            raise ValueError(f"patch size {self.K} must lie in [1, min(H, W) = {min(self.H, self.W)}]")

    @property
    def target(self) -> int:
        """Minimum number of corrupted pixels: a quarter of the image, rounded up."""
        return -(-self.H * self.W // 4)

    @property
    def positions(self) -> tuple:
        return self.H - self.K + 1, self.W - self.K + 1


@dataclass
class PredictionMask:
    bitmap: np.ndarray          # H x W bool, True = zeroed
    corners: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    K: int = 0
    capped: bool = False

    @property
    def coverage(self) -> int:
        return int(self.bitmap.sum())


@dataclass
class RestorationMask:
    pairs: np.ndarray           # P x 2 x 2 int: pairs[p, s] = (row, col) of patch s of pair p
    K: int
    H: int
    W: int
    capped: bool = False

    @property
    def coverage(self) -> int:
        return 2 * len(self.pairs) * self.K * self.K

    @property
    def bitmap(self) -> np.ndarray:
        bm = np.zeros((self.H, self.W), bool)
        for (r, c) in self.pairs.reshape(-1, 2):
            bm[r:r + self.K, c:c + self.K] = True
        return bm


MaskSpec = Union[PredictionMask, RestorationMask]


def patch_centers(corners: np.ndarray, K: int) -> np.ndarray:
    return np.asarray(corners, dtype=np.float64) + K / 2.0


# --------------------------------------------------------------------------
# samplers


def sample_poisson_disc(spec: PatchSpec, seed, max_patches=None) -> np.ndarray:
    """Patch corners whose pairwise distance is at least ``K * sqrt(2)``.

    Dart throwing on the integer lattice of valid corners.  Instead of a
    rejection cap, an availability grid tracks which corners are still at a
    legal distance from every accepted one, and each dart is drawn uniformly
    from that set.  Sampling stops once ``max_patches`` are placed or no
    legal corner remains (a maximal packing).
    """
    rng = np.random.default_rng(seed)
    nr, nc = spec.positions
    K = spec.K
    min_d2 = 2 * K * K
    reach = int(math.ceil(K * math.sqrt(2)))
    free = np.ones((nr, nc), bool)
    offs = np.arange(-reach, reach + 1)
    disc = (offs[:, None] ** 2 + offs[None, :] ** 2) < min_d2
    out = []
    while max_patches is None or len(out) < max_patches:
        idx = np.flatnonzero(free)
        if idx.size == 0:
            break
        r, c = divmod(int(idx[rng.integers(idx.size)]), nc)
        out.append((r, c))
        r0, r1 = max(r - reach, 0), min(r + reach + 1, nr)
        c0, c1 = max(c - reach, 0), min(c + reach + 1, nc)
        free[r0:r1, c0:c1] &= ~disc[r0 - r + reach:r1 - r + reach, c0 - c + reach:c1 - c + reach]
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def sample_random(spec: PatchSpec, seed, n: int, non_overlapping: bool = False) -> np.ndarray:
    """``n`` corners drawn uniformly over the valid positions.

    With ``non_overlapping`` each new corner is drawn uniformly from the
    positions whose patch shares no pixel with any earlier patch; fewer than
    ``n`` corners come back when the image fills up.
    """
    rng = np.random.default_rng(seed)
    nr, nc = spec.positions
    if not non_overlapping:
        flat = rng.integers(nr * nc, size=n)
        return np.stack(np.divmod(flat, nc), axis=1).astype(np.int64).reshape(-1, 2)
    K = spec.K
    free = np.ones((nr, nc), bool)
    out = []
    while len(out) < n:
        idx = np.flatnonzero(free)
        if idx.size == 0:
            break
        r, c = divmod(int(idx[rng.integers(idx.size)]), nc)
        out.append((r, c))
        free[max(r - K + 1, 0):r + K, max(c - K + 1, 0):c + K] = False
    return np.array(out, dtype=np.int64).reshape(-1, 2)


# --------------------------------------------------------------------------
# mask builders


def _paint(bitmap: np.ndarray, corners: np.ndarray, K: int) -> None:
    for r, c in corners:
        bitmap[r:r + K, c:c + K] = True


def build_prediction_mask(spec: PatchSpec, seed, attempts: int = 1000) -> PredictionMask:
    """Zero-out mask whose union covers at least a quarter of the image.

    Random patches may overlap, so patches are added one by one until the
    union reaches the target.  Poisson-disc packings can saturate before the
    target on small images; layouts are then re-drawn up to ``attempts``
    times and the best one is returned with ``capped=True`` if it still
    falls short.
    """
    rng = np.random.default_rng(seed)
    H, W, K = spec.H, spec.W, spec.K
    target = spec.target
    if spec.sampler == RANDOM:
        bitmap = np.zeros((H, W), bool)
        corners = []
        nr, nc = spec.positions
        while bitmap.sum() < target:
            r, c = divmod(int(rng.integers(nr * nc)), nc)
            corners.append((r, c))
            bitmap[r:r + K, c:c + K] = True
        return PredictionMask(bitmap, np.array(corners, np.int64).reshape(-1, 2), K)
    need = -(-target // (K * K))
    best = None
    for _ in range(max(attempts, 1)):
        corners = sample_poisson_disc(spec, int(rng.integers(2 ** 63)), max_patches=need)
        if best is None or len(corners) > len(best):
            best = corners
        if len(best) >= need:
            break
    bitmap = np.zeros((H, W), bool)
    _paint(bitmap, best, K)
    return PredictionMask(bitmap, best, K, capped=bool(bitmap.sum() < target))


def fits_single_patch_only(spec: PatchSpec) -> bool:
    """True when no second patch can ever be placed next to the first one."""
    span_r, span_c = spec.H - spec.K, spec.W - spec.K
    if spec.sampler == POISSON_DISC:
        return span_r ** 2 + span_c ** 2 < 2 * spec.K ** 2
    return span_r < spec.K and span_c < spec.K


def build_restoration_mask(spec: PatchSpec, seed, attempts: int = 1000) -> RestorationMask:
    """Ordered list of disjoint patch pairs covering at least a quarter of the image.

    When the geometry cannot hold enough disjoint patches (e.g. ``K > H/2``)
    the layout with the most pairs found in ``attempts`` tries is returned
    with ``capped=True``.
    """
    rng = np.random.default_rng(seed)
    K = spec.K
    need_pairs = -(-spec.target // (2 * K * K))
    need = 2 * need_pairs
    if fits_single_patch_only(spec):
        return RestorationMask(np.zeros((0, 2, 2), np.int64), K, spec.H, spec.W, capped=True)
    best = None
    for _ in range(max(attempts, 1)):
        sub = int(rng.integers(2 ** 63))
        if spec.sampler == RANDOM:
            corners = sample_random(spec, sub, need, non_overlapping=True)
        else:
            corners = sample_poisson_disc(spec, sub, max_patches=need)
        corners = corners[: len(corners) // 2 * 2]
        if best is None or len(corners) > len(best):
            best = corners
        if len(best) >= need:
            break
    pairs = best.reshape(-1, 2, 2)
    mask = RestorationMask(pairs, K, spec.H, spec.W)
    mask.capped = mask.coverage < spec.target
    return mask


def build_mask(task: str, spec: PatchSpec, seed, attempts: int = 1000) -> MaskSpec:
    if task == PREDICTION:
        return build_prediction_mask(spec, seed, attempts)
    if task == RESTORATION:
        return build_restoration_mask(spec, seed, attempts)
    raise ValueError(f"unknown pretext task {task!r}")


# --------------------------------------------------------------------------
# applying masks


def apply(mask: MaskSpec, image: np.ndarray) -> np.ndarray:
    """Corrupt an H x W x C image; every channel is corrupted at the same pixels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
        squeeze = True
    else:
        squeeze = False
    if img.ndim != 3:
        raise ShapeError(f"expected H x W x C image, got shape {np.shape(image)}")
    if isinstance(mask, PredictionMask):
        if mask.bitmap.shape != img.shape[:2]:
            raise ShapeError(f"mask is {mask.bitmap.shape}, image is {img.shape[:2]}")
        out = np.where(mask.bitmap[:, :, None], 0.0, img)
    else:
        if (mask.H, mask.W) != img.shape[:2]:
            raise ShapeError(f"mask is {(mask.H, mask.W)}, image is {img.shape[:2]}")
        out = img.copy()
        K = mask.K
        for (r1, c1), (r2, c2) in mask.pairs:
            a = out[r1:r1 + K, c1:c1 + K].copy()
            out[r1:r1 + K, c1:c1 + K] = out[r2:r2 + K, c2:c2 + K]
            out[r2:r2 + K, c2:c2 + K] = a
    return out[:, :, 0] if squeeze else out


# --------------------------------------------------------------------------
# rotations and the mask bank


def rotate(mask: MaskSpec, quarter_turns: int) -> MaskSpec:
    """Rotate a mask counter-clockwise by ``90 * quarter_turns`` degrees (square images only)."""
    q = quarter_turns % 4
    if q == 0:
        return mask
    if isinstance(mask, PredictionMask):
        H, W = mask.bitmap.shape
        if H != W and q % 2:
            raise ShapeError("quarter-turn rotation needs a square mask")
        corners = mask.corners
        for _ in range(q):
            corners = _rot_corners(corners, mask.K, H)
        return PredictionMask(np.rot90(mask.bitmap, q).copy(), corners, mask.K, mask.capped)
    if mask.H != mask.W and q % 2:
        raise ShapeError("quarter-turn rotation needs a square mask")
    pts = mask.pairs.reshape(-1, 2)
    for _ in range(q):
        pts = _rot_corners(pts, mask.K, mask.H)
    return RestorationMask(pts.reshape(-1, 2, 2), mask.K, mask.H, mask.W, mask.capped)


def _rot_corners(corners: np.ndarray, K: int, n: int) -> np.ndarray:
    # pixel (r, c) -> (n - 1 - c, r) under np.rot90; a K x K patch's corner -> (n - K - c, r)
    corners = np.asarray(corners).reshape(-1, 2)
    return np.stack([n - K - corners[:, 1], corners[:, 0]], axis=1)


@dataclass
class MaskBank:
    task: str
    spec: PatchSpec
    seed: int
    masks: list

    @property
    def effective_size(self) -> int:
        return len(self.masks) * ROTATIONS


def make_bank(task: str, spec: PatchSpec, bank_seed: int, size: int = BANK_SIZE,
              attempts: int = 1000) -> MaskBank:
    masks = []
    for i in range(size):
        masks.append(build_mask(task, spec, [bank_seed, i], attempts))
    return MaskBank(task, spec, bank_seed, masks)


def variant_index(bank: MaskBank, iteration: int) -> int:
    """Variant (0 .. effective_size-1) used at ``iteration``.

    Iterations are grouped into blocks of ``effective_size``; each block is a
    seeded permutation of all variants, so every draw is uniform over the
    variants and every variant appears exactly once per block.
    """
    n = bank.effective_size
    block, pos = divmod(int(iteration), n)
    perm = np.random.default_rng([bank.seed, 7919, block]).permutation(n)
    return int(perm[pos])


def draw(bank: MaskBank, iteration: int) -> MaskSpec:
    v = variant_index(bank, iteration)
    base, quarter = divmod(v, ROTATIONS)
    return rotate(bank.masks[base], quarter)


# --------------------------------------------------------------------------
# bank files
#
# manifest.json: {"task", "spec", "seed", "count", "capped", "layout"}
# masks.bin, prediction: per mask, np.packbits(bitmap.ravel()) (row-major,
#   MSB-first), ceil(H*W/8) bytes each, followed by corner lists
#   (<u4 count, then count x (<i4 row, <i4 col)) per mask.
# masks.bin, restoration: per mask, <u4 pair count then pairs x (<i4 r1, c1, r2, c2).

_PRED_LAYOUT = "packbits(H*W, msb-first) per mask, then per mask <u4 n + n x (<i4 r, <i4 c)"
_REST_LAYOUT = "per mask <u4 n_pairs + n_pairs x (<i4 r1, <i4 c1, <i4 r2, <i4 c2)"


def save_bank(bank: MaskBank, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    chunks = []
    if bank.task == PREDICTION:
        for m in bank.masks:
            chunks.append(np.packbits(m.bitmap.ravel()).tobytes())
        for m in bank.masks:
            chunks.append(struct.pack("<I", len(m.corners)))
            chunks.append(np.asarray(m.corners, "<i4").tobytes())
        layout = _PRED_LAYOUT
    else:
        for m in bank.masks:
            chunks.append(struct.pack("<I", len(m.pairs)))
            chunks.append(np.asarray(m.pairs, "<i4").tobytes())
        layout = _REST_LAYOUT
    (d / "masks.bin").write_bytes(b"".join(chunks))
    manifest = {"task": bank.task, "spec": asdict(bank.spec), "seed": bank.seed,
                "count": len(bank.masks), "capped": [bool(m.capped) for m in bank.masks],
                "layout": layout}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_bank(directory) -> MaskBank:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    spec = PatchSpec(**manifest["spec"])
    blob = (d / "masks.bin").read_bytes()
    count = manifest["count"]
    masks = []
    pos = 0
    if manifest["task"] == PREDICTION:
        nbytes = -(-spec.H * spec.W // 8)
        bitmaps = []
        for _ in range(count):
            bits = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, pos))[: spec.H * spec.W]
            bitmaps.append(bits.reshape(spec.H, spec.W).astype(bool))
            pos += nbytes
        for i in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            corners = np.frombuffer(blob, "<i4", 2 * n, pos).reshape(n, 2).astype(np.int64)
            pos += 8 * n
            masks.append(PredictionMask(bitmaps[i], corners, spec.K, manifest["capped"][i]))
    else:
        for i in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            pairs = np.frombuffer(blob, "<i4", 4 * n, pos).reshape(n, 2, 2).astype(np.int64)
            pos += 16 * n
            masks.append(RestorationMask(pairs, spec.K, spec.H, spec.W, manifest["capped"][i]))
    return MaskBank(manifest["task"], spec, manifest["seed"], masks)
