"""Procedural ground-truth generator and augmentation pipeline.

Every sample is constructed, not estimated: the observed image is composited
from the generated foreground, background and alpha, so the compositing
identity holds to float precision and the generator is its own ground truth.
All operations are pure functions of (config, seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import cv2
import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .compositing import TRIMAP_BACKGROUND, TRIMAP_FOREGROUND, TRIMAP_UNKNOWN
from .errors import GenerationError, ParameterError, ShapeError

ALPHA_CORE_EPS = 1e-3


@dataclass
class AugmentConfig:
    merge_prob: float = 0.5
    resize_prob: float = 0.25
    resize_size: int = 640
    rotation_deg: float = 30.0
    scale_range: Tuple[float, float] = (0.8, 1.25)
    shear_deg: float = 10.0
    hflip_prob: float = 0.5
    dilation_range: Tuple[int, int] = (1, 29)
    crop: int = 512
    hue_jitter: float = 0.1
    sat_jitter: float = 0.2
    val_jitter: float = 0.2
    base_size: int = 800
    seed: int = 0

    def __post_init__(self):
        for name in ("merge_prob", "resize_prob", "hflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {p}")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ParameterError(f"bad scale range {self.scale_range}")
        if self.dilation_range[0] > self.dilation_range[1] or self.dilation_range[0] < 0:
            raise ParameterError(f"bad dilation range {self.dilation_range}")
        if self.crop < 16:
            raise ParameterError(f"crop must be at least 16 px, got {self.crop}")
        if self.base_size < self.crop or self.resize_size < self.crop:
            raise ParameterError(
                f"crop {self.crop} does not fit the {self.base_size}/{self.resize_size} canvas"
            )

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class MattingSample:
    """Ground-truth tuple plus the simulated initial alpha prediction."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    fg: np.ndarray  # (H, W, 3)
    bg: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    trimap: np.ndarray  # (H, W) uint8 codes
    initial_alpha: np.ndarray  # (H, W)
    seed: int = 0

    def unknown_mask(self) -> np.ndarray:
        return self.trimap == TRIMAP_UNKNOWN


def _child_seeds(seed: int, n: int) -> List[int]:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=n)]


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _bezier_points(rng: np.random.Generator, size: int, n: int) -> np.ndarray:
    ctrl = rng.uniform(0, size - 1, size=(4, 2))
    t = np.linspace(0.0, 1.0, n)[:, None]
    b = (
        (1 - t) ** 3 * ctrl[0]
        + 3 * (1 - t) ** 2 * t * ctrl[1]
        + 3 * (1 - t) * t**2 * ctrl[2]
        + t**3 * ctrl[3]
    )
    return b


def _stamp_curve(
    rng: np.random.Generator, size: int, sigma: float, gain: float, boost: float = 1.0
) -> np.ndarray:
    acc = np.zeros((size, size), dtype=np.float64)
    pts = _bezier_points(rng, size, max(64, size * 3))
    rows = np.clip(pts[:, 0].round().astype(int), 0, size - 1)
    cols = np.clip(pts[:, 1].round().astype(int), 0, size - 1)
    acc[rows, cols] = 1.0
    acc = ndimage.gaussian_filter(acc, sigma)
    peak = acc.max()
    if peak > 0:
        # boost > 1 saturates the stroke core while keeping a soft falloff rim
        acc = acc / peak * gain * boost
    return np.clip(acc, 0.0, 1.0)


def _color_field(rng: np.random.Generator, size: int) -> np.ndarray:
    k = int(rng.integers(2, 5))
    anchors = rng.uniform(0.05, 0.95, size=(k, 3))
    logits = np.stack(
        [_smooth_noise(rng, size, rng.uniform(size / 10, size / 4)) for _ in range(k)], axis=-1
    )
    weights = np.exp(4.0 * logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    color = np.einsum("hwk,kc->hwc", weights, anchors)
    grain = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), (2.0, 2.0, 0.0))
    return np.clip(color + 0.03 * grain, 0.0, 1.0).astype(np.float32)


def gen_foreground(seed: int, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Procedural foreground: soft blobs, stroked curves and hair-like strands.

    Returns (color, alpha) where at least 5% of the pixels carry an alpha
    strictly inside (0, 1); extra layers are added deterministically until
    that holds.
    """
    if size < 64:
        raise ParameterError(f"foreground canvas must be >= 64 px, got {size}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    alpha = np.zeros((size, size), dtype=np.float64)

    def overlay(layer: np.ndarray) -> None:
        nonlocal alpha
        alpha = 1.0 - (1.0 - alpha) * (1.0 - layer)

    def add_blob(r: np.random.Generator) -> None:
        fld = _smooth_noise(r, size, r.uniform(size / 14, size / 7))
        thr = np.quantile(fld, r.uniform(0.6, 0.85))
        width = r.uniform(0.015, 0.07)
        overlay(_smoothstep((fld - thr) / width))

    for _ in range(int(rng.integers(1, 3))):
        add_blob(rng)
    for _ in range(int(rng.integers(0, 2))):
        overlay(
            _stamp_curve(
                rng, size, rng.uniform(1.0, size / 32), rng.uniform(0.7, 1.0),
                boost=rng.uniform(1.5, 3.0),
            )
        )
    for _ in range(int(rng.integers(2, 8))):
        overlay(_stamp_curve(rng, size, rng.uniform(0.5, 1.0), rng.uniform(0.4, 0.9)))

    alpha = ndimage.gaussian_filter(alpha, 0.7)
    tries = 0
    while ((alpha > 0.0) & (alpha < 1.0)).mean() < 0.05 and tries < 8:
        add_blob(np.random.default_rng(np.random.SeedSequence((seed, 1000 + tries))))
        alpha = ndimage.gaussian_filter(alpha, 0.8)
        tries += 1
    alpha = np.clip(alpha, 0.0, 1.0).astype(np.float32)
    color = _color_field(rng, size)
    return color, alpha


def gen_background(seed: int, height: int, width: int) -> np.ndarray:
    """Procedural background: smooth noise, gradients or periodic texture."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    size = max(height, width)
    kind = int(rng.integers(0, 3))
    if kind == 0:
        img = _color_field(rng, size)
    elif kind == 1:
        # oriented linear gradient between two colors plus mild noise
        c0, c1 = rng.uniform(0, 1, size=(2, 3))
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
        ramp = (np.cos(theta) * xx + np.sin(theta) * yy - min(0, np.cos(theta)) - min(0, np.sin(theta)))
        ramp /= max(abs(np.cos(theta)) + abs(np.sin(theta)), 1e-9)
        img = c0[None, None] + ramp[..., None] * (c1 - c0)[None, None]
        img = img + 0.02 * rng.standard_normal((size, size, 3))
    else:
        c0, c1 = rng.uniform(0, 1, size=(2, 3))
        fy, fx = rng.uniform(2, 14, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
        wave = 0.5 + 0.25 * np.sin(2 * np.pi * fy * yy + phase[0]) + 0.25 * np.sin(
            2 * np.pi * fx * xx + phase[1]
        )
        img = c0[None, None] + wave[..., None] * (c1 - c0)[None, None]
    return np.clip(img[:height, :width], 0.0, 1.0).astype(np.float32)


def merge_foregrounds(
    a: Tuple[np.ndarray, np.ndarray], b: Tuple[np.ndarray, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    """Composite foreground a over foreground b into a new foreground object."""
    fa, aa = a
    fb, ab = b
    if fa.shape != fb.shape or aa.shape != ab.shape:
        raise ShapeError(
            f"merge_foregrounds size mismatch: {fa.shape}/{aa.shape} vs {fb.shape}/{ab.shape}"
        )
    aa3 = aa[..., None]
    ab3 = ab[..., None]
    alpha_new = aa + (1.0 - aa) * ab
    numer = aa3 * fa + (1.0 - aa3) * ab3 * fb
    denom = alpha_new[..., None]
    color = np.divide(numer, denom, out=np.zeros_like(numer), where=denom > 0)
    return color.astype(np.float32), alpha_new.astype(np.float32)


def random_affine(
    fg_alpha: Tuple[np.ndarray, np.ndarray], config: AugmentConfig, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Shared random rotation/scale/shear/flip with bilinear sampling, zeros outside."""
    color, alpha = fg_alpha
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    theta = np.deg2rad(rng.uniform(-config.rotation_deg, config.rotation_deg))
    scale = rng.uniform(*config.scale_range)
    shear = np.deg2rad(rng.uniform(-config.shear_deg, config.shear_deg))
    flip = rng.random() < config.hflip_prob
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shr = np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
    scl = np.diag([scale, scale * (-1.0 if flip else 1.0)])
    m = rot @ shr @ scl
    return apply_affine(fg_alpha, m)


def apply_affine(
    fg_alpha: Tuple[np.ndarray, np.ndarray], m: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Apply a 2x2 (row, col) linear map about the image center to color and alpha."""
    color, alpha = fg_alpha
    h, w = alpha.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    minv = np.linalg.inv(m)
    offset = center - minv @ center
    out_alpha = ndimage.affine_transform(
        alpha.astype(np.float64), minv, offset=offset, order=1, mode="constant", cval=0.0
    )
    out_color = np.stack(
        [
            ndimage.affine_transform(
                color[..., c].astype(np.float64), minv, offset=offset, order=1, mode="constant"
            )
            for c in range(color.shape[-1])
        ],
        axis=-1,
    )
    return (
        np.clip(out_color, 0.0, 1.0).astype(np.float32),
        np.clip(out_alpha, 0.0, 1.0).astype(np.float32),
    )


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion by a disk of the given radius (distance-transform based)."""
    if radius <= 0:
        return mask.copy()
    dist = ndimage.distance_transform_edt(mask)
    return dist > radius


def gen_trimap(alpha: np.ndarray, radius: int) -> np.ndarray:
    """Label pixels far inside the solid/empty cores as known, the rest unknown.

    Known-foreground is the erosion of {alpha >= 1 - eps} by ``radius``,
    known-background the erosion of {alpha <= eps}; everything else is
    unknown.  Degenerate results (no unknown pixels, or nothing known) raise
    so the caller can regenerate the sample.
    """
    fg = _erode(alpha >= 1.0 - ALPHA_CORE_EPS, radius)
    bg = _erode(alpha <= ALPHA_CORE_EPS, radius)
    trimap = np.full(alpha.shape, TRIMAP_UNKNOWN, dtype=np.uint8)
    trimap[fg] = TRIMAP_FOREGROUND
    trimap[bg] = TRIMAP_BACKGROUND
    n_unknown = int((trimap == TRIMAP_UNKNOWN).sum())
    if n_unknown == 0 or n_unknown == trimap.size:
        raise GenerationError(
            f"degenerate trimap: {n_unknown} unknown of {trimap.size} pixels at radius {radius}"
        )
    return trimap


def hsv_jitter(image: np.ndarray, config: AugmentConfig, seed: int) -> np.ndarray:
    """Random hue rotation plus saturation/value scaling in HSV space."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dh = rng.uniform(-config.hue_jitter, config.hue_jitter)
    ds = rng.uniform(1.0 - config.sat_jitter, 1.0 + config.sat_jitter)
    dv = rng.uniform(1.0 - config.val_jitter, 1.0 + config.val_jitter)
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * ds, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * dv, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0).astype(np.float32)


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    return cv2.resize(arr, (size, size), interpolation=cv2.INTER_AREA)


def _make_sample_once(config: AugmentConfig, seed: int) -> MattingSample:
    seeds = _child_seeds(seed, 8)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0FFEE)))
    color, alpha = gen_foreground(seeds[0], config.base_size)
    if rng.random() < config.merge_prob:
        color, alpha = merge_foregrounds(
            (color, alpha), gen_foreground(seeds[1], config.base_size)
        )
    if rng.random() < config.resize_prob:
        color = _resize(color, config.resize_size)
        alpha = _resize(alpha, config.resize_size)
    color, alpha = random_affine((color, alpha), config, seeds[2])

    radius = int(rng.integers(config.dilation_range[0], config.dilation_range[1] + 1))
    trimap = gen_trimap(alpha, radius)

    unknown_rows, unknown_cols = np.nonzero(trimap == TRIMAP_UNKNOWN)
    pick = int(rng.integers(0, len(unknown_rows)))
    h, w = alpha.shape
    crop = config.crop
    if h < crop or w < crop:
        raise GenerationError(f"source {h}x{w} smaller than crop {crop}")
    r0 = int(np.clip(unknown_rows[pick] - crop // 2, 0, h - crop))
    c0 = int(np.clip(unknown_cols[pick] - crop // 2, 0, w - crop))
    color = color[r0 : r0 + crop, c0 : c0 + crop]
    alpha = alpha[r0 : r0 + crop, c0 : c0 + crop]
    trimap = trimap[r0 : r0 + crop, c0 : c0 + crop]
    if not (trimap == TRIMAP_UNKNOWN).any():
        raise GenerationError("crop lost the unknown region")

    color = hsv_jitter(color, config, seeds[3])
    # snap the known cores so the trimap consistency invariant holds exactly
    alpha = alpha.copy()
    alpha[trimap == TRIMAP_FOREGROUND] = 1.0
    alpha[trimap == TRIMAP_BACKGROUND] = 0.0

    bg = gen_background(seeds[4], crop, crop)
    a3 = alpha[..., None]
    image = (a3 * color + (1.0 - a3) * bg).astype(np.float32)

    blur_sigma = rng.uniform(0.5, 2.0)
    noise_amp = rng.uniform(0.02, 0.12)
    noise_rng = np.random.default_rng(np.random.SeedSequence(seeds[5]))
    band_noise = ndimage.gaussian_filter(noise_rng.standard_normal(alpha.shape), 1.5)
    initial = ndimage.gaussian_filter(alpha.astype(np.float64), blur_sigma)
    initial = initial + noise_amp * band_noise * (trimap == TRIMAP_UNKNOWN)
    initial = np.clip(initial, 0.0, 1.0)
    initial[trimap == TRIMAP_FOREGROUND] = 1.0
    initial[trimap == TRIMAP_BACKGROUND] = 0.0

    return MattingSample(
        image=image,
        fg=color.astype(np.float32),
        bg=bg,
        alpha=alpha.astype(np.float32),
        trimap=trimap,
        initial_alpha=initial.astype(np.float32),
        seed=seed,
    )


def make_sample(config: AugmentConfig, seed: int) -> MattingSample:
    """Run the augmentation pipeline; retries with derived seeds on degenerate draws."""
    last: Optional[GenerationError] = None
    attempt_seed = seed
    for attempt in range(10):
        try:
            sample = _make_sample_once(config, attempt_seed)
            sample.seed = seed
            return sample
        except GenerationError as e:
            last = e
            attempt_seed = _child_seeds(attempt_seed, 1)[0] ^ (attempt + 1)
    raise GenerationError(f"no usable sample for seed {seed} after 10 attempts: {last}")


def sample_seed_for(base_seed: int, index: int) -> int:
    rng = np.random.default_rng(np.random.SeedSequence((base_seed, index)))
    return int(rng.integers(0, 2**63 - 1))


def iter_samples(config: AugmentConfig, count: int, base_seed: Optional[int] = None) -> Iterator[MattingSample]:
    base = config.seed if base_seed is None else base_seed
    for i in range(count):
        yield make_sample(config, sample_seed_for(base, i))


MANIFEST_NAME = "manifest.jsonl"
CONFIG_NAME = "config.json"


def export_dataset(config: AugmentConfig, count: int, out_dir: str | Path) -> List[Dict]:
    """Materialize samples plus a manifest; see :mod:`invcomp.images` for rasters."""
    from . import images

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: List[Dict] = []
    cfg_hash = config.hash()
    for i in range(count):
        seed = sample_seed_for(config.seed, i)
        sample = make_sample(config, seed)
        sample_id = f"sample_{i:05d}"
        sdir = out / sample_id
        sdir.mkdir(exist_ok=True)
        images.save_rgb(sdir / "image.png", sample.image, bits=16)
        images.save_rgb(sdir / "fg.png", sample.fg, bits=16)
        images.save_rgb(sdir / "bg.png", sample.bg, bits=16)
        images.save_gray(sdir / "alpha.png", sample.alpha, bits=16)
        images.save_gray(sdir / "initial_alpha.png", sample.initial_alpha, bits=16)
        images.save_trimap(sdir / "trimap.png", sample.trimap)
        rows.append({"id": sample_id, "seed": seed, "config_hash": cfg_hash})
    with open(out / MANIFEST_NAME, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    with open(out / CONFIG_NAME, "w") as f:
        json.dump(asdict(config), f, indent=2, sort_keys=True)
    return rows


def load_manifest(dataset_dir: str | Path) -> Tuple[AugmentConfig, List[Dict]]:
    root = Path(dataset_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    with open(root / CONFIG_NAME) as f:
        raw = json.load(f)
    raw["scale_range"] = tuple(raw["scale_range"])
    raw["dilation_range"] = tuple(raw["dilation_range"])
    config = AugmentConfig(**raw)
    rows = []
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    expected = config.hash()
    for row in rows:
        if row.get("config_hash") != expected:
            raise ParameterError(
                f"manifest row {row.get('id')} was generated with a different config "
                f"({row.get('config_hash')} != {expected})"
            )
    return config, rows


def load_sample(config: AugmentConfig, row: Dict) -> MattingSample:
    """Regenerate a manifest row from its seed (float-exact, no quantization)."""
    return make_sample(config, int(row["seed"]))
