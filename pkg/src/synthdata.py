from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import DataError
from .imagecore import ChannelPair, Image2D, load_mask, load_pair, save_image, save_mask
from .reporting import write_json_atomic
from .validation import validate_document


logger = logging.getLogger(__name__)

SCENE_MANIFEST_FORMAT = "carbseg-scenes/1"
EDGE_MARGIN = 2


@dataclass(frozen=True)
class SceneConfig:
    """
    Recipe for one synthetic two-detector micrograph.

    Carbides are bright rotated ellipses on a matrix with a linear
    illumination gradient and a smooth texture. The texture is shared between
    the channels with correlation `channel_correlation`; noise is independent.
    """
    height: int = 512
    width: int = 512
    carbide_count: Tuple[int, int] = (20, 40)
    semi_axis_range: Tuple[float, float] = (5.0, 12.0)
    matrix_level: float = 0.35
    se_contrast: float = 0.30
    inlens_contrast: float = 0.45
    contrast_jitter: float = 0.1
    texture_amplitude: float = 0.02
    texture_length: float = 24.0
    gradient_amplitude: float = 0.1
    channel_correlation: float = 0.8
    noise_sigma: float = 0.02
    blur_sigma: float = 0.7
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 8 or self.width < 8:
            raise DataError(f"Scene must be at least 8x8, got {self.height}x{self.width}")
        lo, hi = self.carbide_count
        if not 0 <= lo <= hi:
            raise DataError(f"carbide_count must be ordered and non-negative, got {self.carbide_count}")
        alo, ahi = self.semi_axis_range
        if not 0 < alo <= ahi:
            raise DataError(f"semi_axis_range must be positive and ordered, got {self.semi_axis_range}")
        if not 0.0 <= self.matrix_level <= 1.0:
            raise DataError(f"matrix_level must lie in [0, 1], got {self.matrix_level}")
        for name in ("se_contrast", "inlens_contrast"):
            level = self.matrix_level + getattr(self, name)
            if not 0.0 <= level <= 1.0:
                raise DataError(f"matrix_level + {name} = {level} falls outside [0, 1]")
        if not 0.0 <= self.channel_correlation <= 1.0:
            raise DataError(f"channel_correlation must lie in [0, 1], got {self.channel_correlation}")
        for name in ("contrast_jitter", "texture_amplitude", "gradient_amplitude", "noise_sigma", "blur_sigma"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.texture_length <= 0:
            raise DataError(f"texture_length must be > 0, got {self.texture_length}")
        if self.max_retries < 1:
            raise DataError(f"max_retries must be >= 1, got {self.max_retries}")

    @classmethod
    def from_dict(cls, doc: Dict[str, Any], base: Optional["SceneConfig"] = None) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise DataError(f"Unknown scene keys: {', '.join(unknown)}")
        values = asdict(base) if base is not None else {}
        for k, v in doc.items():
            values[k] = tuple(v) if isinstance(v, list) else v
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def derive_seed(seed: int, index: int) -> int:
    """Independent 32-bit seed for scene `index` of a dataset."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


# -----------------------------
# Geometry
# -----------------------------

def _ellipse_patch(cy: float, cx: float, a: float, b: float, theta: float) -> Tuple[int, int, np.ndarray]:
    """Boolean patch of pixels whose centers fall inside the ellipse, with its top-left corner."""
    r = int(math.ceil(max(a, b)))
    top, left = int(math.floor(cy)) - r, int(math.floor(cx)) - r
    yy, xx = np.mgrid[top:top + 2 * r + 2, left:left + 2 * r + 2]
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return top, left, (u * u + v * v) <= 1.0


def place_ellipses(cfg: SceneConfig, rng: np.random.Generator) -> Tuple[np.ndarray, List[Dict[str, float]]]:
    """
    Rasterize `carbide_count` non-touching ellipses fully inside the frame.
    Each carbide gets `max_retries` placement attempts before giving up.
    """
    h, w = cfg.height, cfg.width
    mask = np.zeros((h, w), dtype=bool)
    labels = np.zeros((h, w), dtype=np.int32)
    n = int(rng.integers(cfg.carbide_count[0], cfg.carbide_count[1] + 1))
    placed: List[Dict[str, float]] = []
    halo = np.ones((3, 3), dtype=bool)
    for k in range(n):
        for _ in range(cfg.max_retries):
            a = float(rng.uniform(*cfg.semi_axis_range))
            b = float(rng.uniform(*cfg.semi_axis_range))
            theta = float(rng.uniform(0.0, math.pi))
            r = math.ceil(max(a, b)) + EDGE_MARGIN
            if 2 * r + 1 > min(h, w):
                raise DataError(f"Ellipse with semi-axis {max(a, b):.1f} does not fit a {h}x{w} scene")
            cy = float(rng.uniform(r, h - 1 - r))
            cx = float(rng.uniform(r, w - 1 - r))
            top, left, patch = _ellipse_patch(cy, cx, a, b, theta)
            rows = slice(max(top, 0), min(top + patch.shape[0], h))
            cols = slice(max(left, 0), min(left + patch.shape[1], w))
            patch = patch[rows.start - top:rows.stop - top, cols.start - left:cols.stop - left]
            # One-pixel halo keeps neighbours from merging under 8-connectivity.
            grown = ndimage.binary_dilation(np.pad(patch, 1), structure=halo)[1:-1, 1:-1]
            if np.any(mask[rows, cols] & grown):
                continue
            mask[rows, cols] |= patch
            labels[rows, cols][patch] = k + 1
            placed.append({"cy": cy, "cx": cx, "a": a, "b": b, "theta": theta})
            break
        else:
            raise DataError(
                f"Could not place carbide {k + 1} of {n} without overlap after {cfg.max_retries} attempts"
            )
    return labels, placed


# -----------------------------
# Rendering
# -----------------------------

def _smooth_field(rng: np.random.Generator, shape: Tuple[int, int], length: float) -> np.ndarray:
    """Gaussian-correlated noise with unit standard deviation."""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=length, mode="wrap")
    std = field.std()
    return field / std if std > 0 else field


def generate_scene(cfg: SceneConfig) -> Tuple[ChannelPair, np.ndarray]:
    """(SE/InLens pair, exact carbide mask), fully determined by cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    labels, placed = place_ellipses(cfg, rng)
    mask = labels > 0

    # Per-carbide brightness factor, shared by both detectors.
    factors = np.ones(len(placed) + 1)
    if placed:
        factors[1:] = np.clip(1.0 + cfg.contrast_jitter * rng.standard_normal(len(placed)), 0.0, None)
    particle = factors[labels] * mask

    phi = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    gradient = cfg.gradient_amplitude * ((yy / h - 0.5) * math.cos(phi) + (xx / w - 0.5) * math.sin(phi))

    shared = _smooth_field(rng, (h, w), cfg.texture_length)
    rho = cfg.channel_correlation
    channels = []
    for contrast in (cfg.se_contrast, cfg.inlens_contrast):
        own = _smooth_field(rng, (h, w), cfg.texture_length)
        texture = cfg.texture_amplitude * (rho * shared + math.sqrt(1.0 - rho * rho) * own)
        img = cfg.matrix_level + gradient + texture + contrast * particle
        if cfg.blur_sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=cfg.blur_sigma, mode="nearest")
        if cfg.noise_sigma > 0:
            img = img + rng.normal(0.0, cfg.noise_sigma, size=(h, w))
        channels.append(np.clip(img, 0.0, 1.0))

    pair = ChannelPair(se=Image2D(channels[0]), inlens=Image2D(channels[1]))
    return pair, mask


# -----------------------------
# Datasets on disk
# -----------------------------

def _write_scene(cfg: SceneConfig, index: int, out_dir: Path) -> Dict[str, Any]:
    scene_cfg = SceneConfig(**{**asdict(cfg), "seed": derive_seed(cfg.seed, index)})
    pair, mask = generate_scene(scene_cfg)
    sid = f"scene_{index:03d}"
    files = {
        "se": f"images/{sid}_se.png",
        "inlens": f"images/{sid}_inlens.png",
        "mask": f"masks/{sid}_mask.png",
    }
    save_image(out_dir / files["se"], pair.se.data)
    save_image(out_dir / files["inlens"], pair.inlens.data)
    save_mask(out_dir / files["mask"], mask)
    _, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    return {
        "id": sid,
        "seed": scene_cfg.seed,
        "height": cfg.height,
        "width": cfg.width,
        "files": files,
        "carbide_count": int(count),
        "foreground_fraction": float(mask.mean()),
    }


def generate_dataset(cfg: SceneConfig, n_images: int, out_dir: str | Path, threads: int = 1,
                     pixel_size_nm: Optional[float] = None) -> Path:
    """Write n scenes (16-bit channels, 8-bit masks) with distinct derived seeds plus a manifest."""
    if n_images < 1:
        raise DataError(f"n_images must be >= 1, got {n_images}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out_dir}: {e}") from e
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        scenes = list(pool.map(lambda i: _write_scene(cfg, i, out_dir), range(n_images)))
    manifest = {
        "format": SCENE_MANIFEST_FORMAT,
        "config": cfg.to_dict(),
        "pixel_size_nm": pixel_size_nm,
        "scenes": scenes,
    }
    logger.info("Generated %d scenes in %s", n_images, out_dir)
    return write_json_atomic(manifest, out_dir / "manifest.json")


def read_dataset_manifest(data_dir: str | Path) -> Dict[str, Any]:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise DataError(f"No scene manifest at {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    issues = [i for i in validate_document(manifest, "scene_manifest") if i.severity == "error"]
    if issues:
        raise DataError(f"{path}: invalid scene manifest: " + "; ".join(i.message for i in issues[:5]))
    return manifest


def load_dataset(data_dir: str | Path) -> List[Tuple[str, ChannelPair, np.ndarray]]:
    """(scene id, pair, mask) for every scene listed in a generated dataset."""
    data_dir = Path(data_dir)
    manifest = read_dataset_manifest(data_dir)
    px = manifest.get("pixel_size_nm")
    out = []
    for s in manifest["scenes"]:
        pair = load_pair(data_dir / s["files"]["se"], data_dir / s["files"]["inlens"], pixel_size_nm=px)
        out.append((s["id"], pair, load_mask(data_dir / s["files"]["mask"])))
    return out
