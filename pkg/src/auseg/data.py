"""Data pipeline: preprocessing, patch extraction around a mass, a
deterministic synthetic dataset generator, directory IO, and fold splits.

Raw cases are 2-D grayscale intensity arrays with a binary mask and optional
category metadata. The standard preprocessing chain is
crop_background -> standardize (resize + per-image min-max + channel
triplication), producing network-ready (3, S, S) samples.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .substrate import interp_matrix

META_COLUMNS = ("id", "subtlety", "birads", "shape", "margin", "pathology")


@dataclass
class RawCase:
    """One intensity image with its binary mask and optional metadata."""

    image_id: str
    image: np.ndarray  # (H, W) float
    mask: np.ndarray   # (H, W) bool
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.image.ndim != 2 or self.mask.shape != self.image.shape:
            raise ValueError(
                f"case {self.image_id!r}: image {self.image.shape} and mask "
                f"{self.mask.shape} must be matching 2-D arrays")


@dataclass
class SegmentationSample:
    """A standardized, network-ready sample."""

    image_id: str
    image: np.ndarray  # (3, S, S) float in [0, 1]
    mask: np.ndarray   # (S, S) bool
    metadata: dict = field(default_factory=dict)
    flags: tuple = ()


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def crop_background(case: RawCase, threshold=0.05):
    """Trim border rows/columns whose maximum intensity is negligible.

    A row/column is negligible when its max is below threshold times the
    global max. Only maximal runs touching the border are removed, never
    anything overlapping the mask: if an intensity-based bound would cut
    into the mask, the bound is pushed back out and a warning is issued.
    An image that is negligible everywhere raises ValueError.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    img, mask = case.image, case.mask
    peak = float(img.max())
    if peak <= 0.0:
        raise ValueError(f"case {case.image_id!r}: image is negligible everywhere")
    cutoff = threshold * peak
    keep_rows = np.where(img.max(axis=1) >= cutoff)[0]
    keep_cols = np.where(img.max(axis=0) >= cutoff)[0]
    if keep_rows.size == 0 or keep_cols.size == 0:
        raise ValueError(f"case {case.image_id!r}: image is negligible everywhere")
    r0, r1 = int(keep_rows[0]), int(keep_rows[-1]) + 1
    c0, c1 = int(keep_cols[0]), int(keep_cols[-1]) + 1
    if mask.any():
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        mr0, mr1 = int(rows[0]), int(rows[-1]) + 1
        mc0, mc1 = int(cols[0]), int(cols[-1]) + 1
        if mr0 < r0 or mr1 > r1 or mc0 < c0 or mc1 > c1:
            warnings.warn(
                f"case {case.image_id!r}: background crop clipped to keep the mask",
                stacklevel=2)
            r0, r1 = min(r0, mr0), max(r1, mr1)
            c0, c1 = min(c0, mc0), max(c1, mc1)
    return replace(case, image=img[r0:r1, c0:c1].copy(), mask=mask[r0:r1, c0:c1].copy())


def resize_bilinear(arr, out_hw):
    """Bilinear resize of a 2-D array on the half-pixel grid."""
    h, w = arr.shape
    oh, ow = out_hw
    mh = interp_matrix(h, oh, np.float64)
    mw = interp_matrix(w, ow, np.float64)
    return mh @ np.asarray(arr, dtype=np.float64) @ mw.T


def resize_nearest(mask, out_hw):
    """Nearest-neighbor resize of a 2-D mask (stays binary)."""
    h, w = mask.shape
    oh, ow = out_hw
    ri = np.clip(np.floor((np.arange(oh) + 0.5) * (h / oh)).astype(int), 0, h - 1)
    ci = np.clip(np.floor((np.arange(ow) + 0.5) * (w / ow)).astype(int), 0, w - 1)
    return np.asarray(mask)[np.ix_(ri, ci)]


def standardize(case: RawCase, size=256):
    """Resize, normalize, and triplicate a raw case into a network sample.

    The intensity image is resized bilinearly to size x size and min-max
    scaled to [0, 1] per image (a constant image maps to zeros and sets the
    'constant_image' flag). The mask is resized nearest-neighbor so it stays
    strictly binary; if a non-empty mask vanishes under resizing a
    'mask_vanished' warning flag is set. The single gray channel is copied
    into three channels.
    """
    if size < 16 or size % 16 != 0:
        raise ValueError(f"standardized size must be a positive multiple of 16, got {size}")
    img = resize_bilinear(case.image, (size, size))
    flags = []
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        warnings.warn(f"case {case.image_id!r}: constant image, normalized to zeros",
                      stacklevel=2)
        img = np.zeros_like(img)
        flags.append("constant_image")
    else:
        img = (img - lo) / (hi - lo)
    mask = resize_nearest(case.mask, (size, size)).astype(bool)
    if case.mask.any() and not mask.any():
        warnings.warn(f"case {case.image_id!r}: mask vanished under resize", stacklevel=2)
        flags.append("mask_vanished")
    image3 = np.broadcast_to(img, (3, size, size)).copy()
    return SegmentationSample(image_id=case.image_id, image=image3, mask=mask,
                              metadata=dict(case.metadata), flags=tuple(flags))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


AREA_GROWTH = 1.2  # patch area target relative to the tight bounding box


def extract_mass_patch(case: RawCase, min_side=8):
    """Cut a patch around the mass: the tight bounding box grown 20% in area.

    Each side of the tight box is scaled by sqrt(1.2) about the box center
    (rounded half-up), then clamped to the image bounds; sides shorter than
    min_side are widened to min_side first. The patch always contains the
    full mask. Returns (patch_case, (row0, row1, col0, col1)).
    """
    mask = case.mask
    if not mask.any():
        raise ValueError(f"case {case.image_id!r}: cannot extract a patch from an empty mask")
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    h, w = case.image.shape
    side = math.sqrt(AREA_GROWTH)

    def grown(lo, hi, bound):
        length = hi - lo
        new_len = max(_round_half_up(length * side), min_side)
        pad = new_len - length
        lead = pad // 2
        new_lo = lo - lead
        new_hi = new_lo + new_len
        return max(0, new_lo), min(bound, new_hi)

    pr0, pr1 = grown(r0, r1, h)
    pc0, pc1 = grown(c0, c1, w)
    patch = RawCase(image_id=case.image_id,
                    image=case.image[pr0:pr1, pc0:pc1].copy(),
                    mask=mask[pr0:pr1, pc0:pc1].copy(),
                    metadata=dict(case.metadata))
    return patch, (pr0, pr1, pc0, pc1)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

SHAPE_FAMILIES = ("ellipse", "lobulated", "irregular")


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic generator. Everything derives from `seed`."""

    canvas_size: int = 64
    mass_count: int = 1
    area_ratio: tuple = (0.01, 0.06)
    shape: str = "ellipse"          # member of SHAPE_FAMILIES or "mixed"
    texture_amplitude: float = 0.12
    contrast_gap: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.canvas_size < 16:
            raise ValueError("canvas_size must be at least 16")
        if self.mass_count != 1:
            raise ValueError("exactly one mass per image is supported")
        lo, hi = self.area_ratio
        if not (0.0 < lo <= hi <= 0.25):
            raise ValueError(f"area_ratio must satisfy 0 < lo <= hi <= 0.25, got {self.area_ratio}")
        if self.shape not in SHAPE_FAMILIES + ("mixed",):
            raise ValueError(f"shape must be one of {SHAPE_FAMILIES + ('mixed',)}")
        if not (0.0 <= self.texture_amplitude < 0.5):
            raise ValueError("texture_amplitude must be in [0, 0.5)")
        if not (0.0 <= self.contrast_gap <= 1.0):
            raise ValueError("contrast_gap must be in [0, 1]")


def _radial_profile(rng, family):
    """Return (perturbation(theta) multiplier fn, retained family name)."""
    if family == "ellipse":
        return lambda theta: np.ones_like(theta), family
    if family == "lobulated":
        k = int(rng.integers(3, 6))
        amp = float(rng.uniform(0.12, 0.22))
        phase = float(rng.uniform(0, 2 * np.pi))
        return lambda theta: 1.0 + amp * np.sin(k * theta + phase), family
    # irregular: several random harmonics
    ks = np.arange(2, 8)
    amps = rng.uniform(0.02, 0.09, size=ks.size)
    phases = rng.uniform(0, 2 * np.pi, size=ks.size)

    def profile(theta):
        acc = np.ones_like(theta)
        for k, a, ph in zip(ks, amps, phases):
            acc = acc + a * np.cos(k * theta + ph)
        return acc

    return profile, "irregular"


def _render_blob(rng, size, target_area, family):
    """Rasterize one blob; returns (mask, family). Deterministic given rng."""
    aspect = float(rng.uniform(0.6, 1.0))
    rot = float(rng.uniform(0, np.pi))
    profile, family = _radial_profile(rng, family)
    # semi-axes from the target area, then refined against the rasterized count
    a = math.sqrt(target_area / (math.pi * aspect))
    b = a * aspect
    max_r = a * 1.35 + 1.0
    margin = min(0.45 * size, max_r + 2.0)
    cy = float(rng.uniform(margin, size - margin))
    cx = float(rng.uniform(margin, size - margin))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    cos_r, sin_r = math.cos(rot), math.sin(rot)
    u = cos_r * dx + sin_r * dy
    v = -sin_r * dx + cos_r * dy
    theta = np.arctan2(v, u)
    dist = np.hypot(u, v)
    scale = 1.0
    mask = None
    for _ in range(6):
        denom = np.hypot((b * scale) * np.cos(theta), (a * scale) * np.sin(theta))
        radius = (a * scale) * (b * scale) / np.maximum(denom, 1e-9) * profile(theta)
        mask = dist <= radius
        area = int(mask.sum())
        if area == 0:
            scale *= 1.5
            continue
        adjust = math.sqrt(target_area / area)
        if 0.97 <= adjust <= 1.03:
            break
        scale *= adjust
    return mask, family


def _texture(rng, size, amplitude):
    """Smooth random field in [-amplitude, amplitude]: a few cosine waves."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    acc = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        acc += rng.uniform(0.4, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    peak = float(np.abs(acc).max())
    if peak > 0:
        acc *= amplitude / peak
    return acc


def generate_synthetic(params: SynthParams, count):
    """Create `count` deterministic synthetic cases.

    Each case is a textured background plus one blob of the configured shape
    family with an intensity gap; the mask equals the rendered blob support
    exactly. The achieved mask area ratio always lands inside
    params.area_ratio (cases are re-drawn a bounded number of times, then an
    error is raised).
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(params.seed)
    size = params.canvas_size
    lo, hi = params.area_ratio
    cases = []
    for idx in range(count):
        family = params.shape
        if family == "mixed":
            family = SHAPE_FAMILIES[int(rng.integers(0, len(SHAPE_FAMILIES)))]
        mask = None
        for _attempt in range(8):
            target = rng.uniform(lo, hi) * size * size
            candidate, family_used = _render_blob(rng, size, target, family)
            ratio = candidate.sum() / (size * size)
            if lo <= ratio <= hi:
                mask = candidate
                break
        if mask is None:
            raise ValueError(
                f"could not render a blob with area ratio in [{lo}, {hi}] "
                f"on a {size}x{size} canvas")
        background = 0.35 + _texture(rng, size, params.texture_amplitude)
        image = background + params.contrast_gap * mask
        image = np.clip(image, 0.02, 0.98)
        metadata = {
            "subtlety": str(int(rng.integers(1, 6))),
            "birads": str(int(rng.integers(2, 6))),
            "shape": family_used,
            "margin": str(rng.choice(["circumscribed", "obscured", "ill-defined",
                                      "spiculated"])),
            "pathology": str(rng.choice(["benign", "malignant"])),
        }
        cases.append(RawCase(image_id=f"synth{idx:04d}", image=image, mask=mask,
                             metadata=metadata))
    return cases


# ---------------------------------------------------------------------------
# directory IO
# ---------------------------------------------------------------------------

def _to_uint16(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 65535.0),
                   0, 65535).astype("<u2")


def write_dataset(cases: Sequence[RawCase], root):
    """Write cases as <root>/images/<id>.png (16-bit), masks/<id>.png (8-bit),
    and a meta.csv with the category columns."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for case in cases:
        Image.fromarray(_to_uint16(case.image)).save(root / "images" / f"{case.image_id}.png")
        Image.fromarray((case.mask.astype(np.uint8) * 255)).save(
            root / "masks" / f"{case.image_id}.png")
    with open(root / "meta.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(META_COLUMNS)
        for case in cases:
            writer.writerow([case.image_id] + [case.metadata.get(c, "") for c in META_COLUMNS[1:]])
    return root


def _read_gray(path):
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if mode in ("I;16", "I;16B", "I"):
        return arr.astype(np.float64) / 65535.0
    if mode == "L":
        return arr.astype(np.float64) / 255.0
    raise ValueError(f"{path}: unsupported image mode {mode!r}, expected 8/16-bit grayscale")


def load_directory(root):
    """Load a dataset directory written by write_dataset (or hand-assembled).

    Every images/<id>.png must have a matching masks/<id>.png; meta.csv is
    optional. Cases come back sorted by id.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir}: no images directory")
    meta = {}
    meta_path = root / "meta.csv"
    if meta_path.exists():
        with open(meta_path, newline="") as fh:
            for row in csv.DictReader(fh):
                cid = row.get("id", "")
                meta[cid] = {k: v for k, v in row.items() if k != "id" and v}
    cases = []
    for img_path in sorted(img_dir.glob("*.png")):
        cid = img_path.stem
        mask_path = mask_dir / f"{cid}.png"
        if not mask_path.exists():
            raise FileNotFoundError(f"case {cid!r}: image/mask pair missing ({mask_path})")
        image = _read_gray(img_path)
        mask = np.asarray(Image.open(mask_path)) != 0
        if mask.ndim != 2:
            raise ValueError(f"case {cid!r}: mask must be single-channel")
        cases.append(RawCase(image_id=cid, image=image, mask=mask,
                             metadata=meta.get(cid, {})))
    if not cases:
        raise FileNotFoundError(f"{img_dir}: no PNG images found")
    return cases


def split_folds(ids: Sequence[str], k, seed=0):
    """Deterministically split ids into k folds with sizes differing by <= 1.

    Ids are sorted, shuffled with the seeded generator, and dealt
    round-robin. Folds are disjoint and their union is the input set.
    """
    ids = sorted(ids)
    if k < 2 or k > len(ids):
        raise ValueError(f"k must be in [2, {len(ids)}], got {k}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    return [perm[i::k] for i in range(k)]


def prepare_samples(cases: Sequence[RawCase], size, crop_threshold=0.05, crop=True):
    """Full preprocessing chain: optional background crop, then standardize."""
    samples = []
    for case in cases:
        if crop:
            case = crop_background(case, threshold=crop_threshold)
        samples.append(standardize(case, size=size))
    return samples
