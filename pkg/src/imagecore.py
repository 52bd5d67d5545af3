from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError
from .reporting import write_bytes_atomic, write_json_atomic
from .validation import validate_document


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TILESET_FORMAT = "carbseg-tiles/1"
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class Image2D:
    """Single-channel raster, row-major, shape (height, width)."""
    data: np.ndarray
    pixel_size_nm: Optional[float] = None

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise DataError(f"Image2D expects a 2-D array, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])


@dataclass(frozen=True, eq=False)
class ChannelPair:
    """SE and InLens renderings of the same field of view."""
    se: Image2D
    inlens: Image2D

    def __post_init__(self) -> None:
        if self.se.data.shape != self.inlens.data.shape:
            raise DataError(
                f"Channel shapes differ: se={self.se.data.shape} inlens={self.inlens.data.shape}"
            )
        if self.se.pixel_size_nm != self.inlens.pixel_size_nm:
            raise DataError(
                f"Channel pixel sizes differ: se={self.se.pixel_size_nm} inlens={self.inlens.pixel_size_nm}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.se.data.shape  # type: ignore[return-value]

    @property
    def pixel_size_nm(self) -> Optional[float]:
        return self.se.pixel_size_nm

    def stacked(self) -> np.ndarray:
        """(2, H, W) float32 network input, SE first."""
        return np.stack([self.se.data, self.inlens.data]).astype(np.float32)


@dataclass(frozen=True, eq=False)
class Tile:
    inputs: np.ndarray          # (2, T, T) float32
    target: np.ndarray          # (T, T) bool
    origin: Tuple[int, int]     # (row, col) in the source image
    source_id: str

    @property
    def tile_id(self) -> str:
        return f"{self.source_id}_r{self.origin[0]:05d}_c{self.origin[1]:05d}"

    @property
    def size(self) -> int:
        return int(self.target.shape[0])


@dataclass(eq=False)
class TileSet:
    tiles: List[Tile] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)

    def __getitem__(self, idx: int) -> Tile:
        return self.tiles[idx]

    def extend(self, other: "TileSet") -> None:
        self.tiles.extend(other.tiles)

    def stack_inputs(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        idx = range(len(self.tiles)) if indices is None else indices
        return np.stack([self.tiles[i].inputs for i in idx]).astype(np.float32)

    def stack_targets(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        idx = range(len(self.tiles)) if indices is None else indices
        return np.stack([self.tiles[i].target for i in idx])[:, None, :, :].astype(np.float32)

    def source_ids(self) -> List[str]:
        seen: Dict[str, None] = {}
        for t in self.tiles:
            seen.setdefault(t.source_id, None)
        return list(seen)


@dataclass(frozen=True)
class AugmentationSpec:
    """
    Random geometric and photometric perturbations for training tiles.

    Geometric transforms (rotation, flips) hit inputs and mask alike; noise and
    blur only touch the input channels.
    """
    rotations: FrozenSet[int] = frozenset({0, 90, 180, 270})
    hflip: bool = True
    vflip: bool = True
    noise_sigma: float = 0.03
    blur_sigma_range: Tuple[float, float] = (0.5, 1.5)
    p_rotate: float = 0.5
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_noise: float = 0.5
    p_blur: float = 0.5

    def __post_init__(self) -> None:
        for name in ("p_rotate", "p_hflip", "p_vflip", "p_noise", "p_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {p}")
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        lo, hi = self.blur_sigma_range
        if lo < 0 or hi < lo:
            raise DataError(f"blur_sigma_range must be non-negative and ordered, got {self.blur_sigma_range}")
        bad = [r for r in self.rotations if r % 90 != 0]
        if bad:
            raise DataError(f"Rotations must be multiples of 90 degrees, got {sorted(bad)}")

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(p_rotate=0.0, p_hflip=0.0, p_vflip=0.0, p_noise=0.0, p_blur=0.0)

    @property
    def rotates(self) -> bool:
        return self.p_rotate > 0 and any(r % 360 for r in self.rotations)


# -----------------------------
# I/O
# -----------------------------

def _bit_depth_max(im: Image.Image, arr: np.ndarray, path: Path) -> int:
    mode = im.mode
    if mode == "L":
        return 255
    if mode.startswith("I;16"):
        return 65535
    if mode == "I":
        # 16-bit PNGs decode to 32-bit integer mode in some Pillow versions.
        if arr.size and (arr.min() < 0 or arr.max() > 65535):
            raise DataError(f"{path}: integer image outside the 16-bit range")
        return 65535
    raise DataError(f"{path}: unsupported bit depth / mode {mode!r} (expected 8- or 16-bit grayscale)")


def load_image(path: str | Path, normalize: bool = True, pixel_size_nm: Optional[float] = None) -> Image2D:
    """
    Read an 8- or 16-bit single-channel PNG/TIFF.

    With `normalize`, intensities are divided by the bit-depth maximum
    (255 or 65535); otherwise the raw integer levels are returned as floats.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            bands = im.getbands()
            if len(bands) != 1:
                raise DataError(f"{path}: expected a single-channel image, got bands {bands}")
            arr = np.asarray(im)
            max_value = _bit_depth_max(im, arr, path)
    except DataError:
        raise
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: unreadable image ({e})") from e

    data = arr.astype(np.float64)
    if normalize:
        data = data / float(max_value)
    return Image2D(data=data, pixel_size_nm=pixel_size_nm)


def load_mask(path: str | Path) -> np.ndarray:
    """8-bit mask, 0 = background, anything else = carbide."""
    img = load_image(path, normalize=False)
    return img.data > 0


def _encode(arr: np.ndarray, suffix: str) -> bytes:
    fmt = "TIFF" if suffix.lower() in {".tif", ".tiff"} else "PNG"
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format=fmt)
    return buf.getvalue()


def save_image(path: str | Path, data: np.ndarray, bit_depth: int = 16) -> Path:
    """Quantize [0, 1] intensities to 8 or 16 bits and write atomically."""
    if bit_depth not in (8, 16):
        raise DataError(f"Unsupported bit depth {bit_depth}")
    path = Path(path)
    top = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    q = np.rint(np.clip(data, 0.0, 1.0) * top).astype(dtype)
    return write_bytes_atomic(_encode(q, path.suffix), path)


def save_mask(path: str | Path, mask: np.ndarray) -> Path:
    path = Path(path)
    q = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    return write_bytes_atomic(_encode(q, path.suffix), path)


def load_pair(se_path: str | Path, inlens_path: str | Path, pixel_size_nm: Optional[float] = None) -> ChannelPair:
    return ChannelPair(
        se=load_image(se_path, pixel_size_nm=pixel_size_nm),
        inlens=load_image(inlens_path, pixel_size_nm=pixel_size_nm),
    )


# -----------------------------
# Preprocessing
# -----------------------------

def crop_rows(img: Image2D, top: int = 0, bottom: int = 0) -> Image2D:
    """Drop `top` rows and `bottom` rows (metadata bars). Retained pixels are untouched."""
    if top < 0 or bottom < 0:
        raise DataError(f"Crop counts must be non-negative, got top={top} bottom={bottom}")
    if top + bottom >= img.height:
        raise DataError(f"Crop of {top}+{bottom} rows exceeds image height {img.height}")
    return Image2D(data=img.data[top:img.height - bottom].copy(), pixel_size_nm=img.pixel_size_nm)


def crop_pair(pair: ChannelPair, top: int = 0, bottom: int = 0) -> ChannelPair:
    return ChannelPair(se=crop_rows(pair.se, top, bottom), inlens=crop_rows(pair.inlens, top, bottom))


def merge_channels(pair: ChannelPair, ratio: float = 0.5) -> Image2D:
    """Convex blend ratio*SE + (1-ratio)*InLens, clamped to [0, 1]."""
    if not 0.0 <= ratio <= 1.0:
        raise DataError(f"Merge ratio must lie in [0, 1], got {ratio}")
    if pair.se.data.shape != pair.inlens.data.shape:
        raise DataError("Channel dimensions differ")
    out = ratio * pair.se.data + (1.0 - ratio) * pair.inlens.data
    return Image2D(data=np.clip(out, 0.0, 1.0), pixel_size_nm=pair.pixel_size_nm)


# -----------------------------
# Tiling and splitting
# -----------------------------

def tile(pair: ChannelPair, mask: np.ndarray, tile_size: int = 128, source_id: str = "image") -> TileSet:
    """
    Cut the pair and its mask into non-overlapping tile_size squares on a grid
    anchored at the top-left corner. Partial border strips are discarded.
    """
    if tile_size < 1:
        raise DataError(f"tile_size must be >= 1, got {tile_size}")
    h, w = pair.shape
    if mask.shape != (h, w):
        raise DataError(f"Mask shape {mask.shape} does not match image shape {(h, w)}")
    if tile_size > h and tile_size > w:
        raise DataError(f"tile_size {tile_size} exceeds both image dimensions {(h, w)}")

    stacked = pair.stacked()
    target = np.asarray(mask, dtype=bool)
    tiles: List[Tile] = []
    for r in range(0, (h // tile_size) * tile_size, tile_size):
        for c in range(0, (w // tile_size) * tile_size, tile_size):
            tiles.append(Tile(
                inputs=stacked[:, r:r + tile_size, c:c + tile_size].copy(),
                target=target[r:r + tile_size, c:c + tile_size].copy(),
                origin=(r, c),
                source_id=source_id,
            ))
    logger.debug("Tiled %s (%dx%d) into %d tiles of %d px", source_id, w, h, len(tiles), tile_size)
    return TileSet(tiles)


def reassemble(tiles: Iterable[Tile], shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Place tiles back at their origins. Returns ((2, H, W) inputs, (H, W) mask)."""
    inputs = np.zeros((2,) + tuple(shape), dtype=np.float32)
    target = np.zeros(shape, dtype=bool)
    for t in tiles:
        r, c = t.origin
        s = t.size
        inputs[:, r:r + s, c:c + s] = t.inputs
        target[r:r + s, c:c + s] = t.target
    return inputs, target


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _partition_sizes(n: int, fractions: Tuple[float, float, float]) -> Tuple[int, int, int]:
    n_val = _round_half_up(n * fractions[1])
    n_test = _round_half_up(n * fractions[2])
    return n - n_val - n_test, n_val, n_test


def split(
    tiles: TileSet,
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    per_image: bool = False,
) -> Tuple[TileSet, TileSet, TileSet]:
    """
    Seeded random partition into (train, val, test).

    Validation and test sizes are round(n*f); the remainder goes to train.
    With `per_image`, whole source images are assigned instead of tiles.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError(f"Split fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"Split fractions must sum to 1, got {sum(fractions)}")

    rng = np.random.default_rng(seed)
    if per_image:
        sources = tiles.source_ids()
        if len(sources) < 3:
            raise DataError(f"Per-image split needs at least 3 source images, got {len(sources)}")
        perm = rng.permutation(len(sources))
        n_train, n_val, _ = _partition_sizes(len(sources), fractions)
        owner: Dict[str, int] = {}
        for rank, i in enumerate(perm):
            owner[sources[i]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
        parts: List[List[Tile]] = [[], [], []]
        for t in tiles:
            parts[owner[t.source_id]].append(t)
        return TileSet(parts[0]), TileSet(parts[1]), TileSet(parts[2])

    n = len(tiles)
    if n < 3:
        raise DataError(f"Cannot split {n} tiles into 3 partitions")
    n_train, n_val, _ = _partition_sizes(n, fractions)
    perm = rng.permutation(n)
    groups = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    train, val, test = (TileSet([tiles[int(i)] for i in np.sort(g)]) for g in groups)
    return train, val, test


# -----------------------------
# Augmentation
# -----------------------------

def tile_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, tile index, ...) so worker scheduling never matters."""
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])


def augment(t: Tile, spec: AugmentationSpec, rng: np.random.Generator) -> Tile:
    x = t.inputs
    y = t.target
    if spec.rotates and x.shape[-1] != x.shape[-2]:
        raise DataError(f"90-degree rotations need square tiles, got {x.shape[-2:]}")

    if rng.random() < spec.p_rotate:
        k = int(rng.choice(sorted(spec.rotations))) // 90
        x = np.rot90(x, k, axes=(1, 2))
        y = np.rot90(y, k)
    if spec.hflip and rng.random() < spec.p_hflip:
        x = x[:, :, ::-1]
        y = y[:, ::-1]
    if spec.vflip and rng.random() < spec.p_vflip:
        x = x[:, ::-1, :]
        y = y[::-1, :]

    photometric = False
    if spec.noise_sigma > 0 and rng.random() < spec.p_noise:
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
        photometric = True
    if rng.random() < spec.p_blur:
        s = float(rng.uniform(*spec.blur_sigma_range))
        if s > 0:
            x = ndimage.gaussian_filter(np.asarray(x, dtype=np.float64), sigma=(0.0, s, s), mode="nearest", truncate=3.0)
            photometric = True
    if photometric:
        x = np.clip(x, 0.0, 1.0)

    return replace(
        t,
        inputs=np.ascontiguousarray(x, dtype=np.float32),
        target=np.ascontiguousarray(y, dtype=bool),
    )


# -----------------------------
# Tile sets on disk
# -----------------------------

def write_tileset(out_dir: str | Path, tiles: TileSet, splits: Optional[Dict[str, str]] = None) -> Path:
    """
    Write tiles as paired 16-bit PNGs plus an 8-bit mask each, and a manifest
    recording origins, sources and (optionally) split membership by tile id.
    """
    out_dir = Path(out_dir)
    tile_dir = out_dir / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    tile_size = tiles[0].size if len(tiles) else 0
    for t in tiles:
        tid = t.tile_id
        files = {"se": f"tiles/{tid}_se.png", "inlens": f"tiles/{tid}_inlens.png", "mask": f"tiles/{tid}_mask.png"}
        save_image(out_dir / files["se"], t.inputs[0])
        save_image(out_dir / files["inlens"], t.inputs[1])
        save_mask(out_dir / files["mask"], t.target)
        entries.append({
            "id": tid,
            "source_id": t.source_id,
            "origin": [int(t.origin[0]), int(t.origin[1])],
            "files": files,
            "split": (splits or {}).get(tid),
        })
    manifest = {"format": TILESET_FORMAT, "tile_size": int(tile_size), "tiles": entries}
    return write_json_atomic(manifest, out_dir / MANIFEST_NAME)


def read_manifest(tile_dir: str | Path) -> Dict:
    tile_dir = Path(tile_dir)
    path = tile_dir / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"No tile manifest at {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    issues = [i for i in validate_document(manifest, "tile_manifest") if i.severity == "error"]
    if issues:
        raise DataError(f"{path}: invalid manifest: " + "; ".join(i.message for i in issues[:5]))
    return manifest


def read_tileset(tile_dir: str | Path, split_name: Optional[str] = None) -> TileSet:
    """Load all tiles, or only those whose manifest split equals `split_name`."""
    tile_dir = Path(tile_dir)
    manifest = read_manifest(tile_dir)
    tiles: List[Tile] = []
    for e in manifest["tiles"]:
        if split_name is not None and e.get("split") != split_name:
            continue
        files = e["files"]
        se = load_image(tile_dir / files["se"]).data
        inlens = load_image(tile_dir / files["inlens"]).data
        tiles.append(Tile(
            inputs=np.stack([se, inlens]).astype(np.float32),
            target=load_mask(tile_dir / files["mask"]),
            origin=(int(e["origin"][0]), int(e["origin"][1])),
            source_id=str(e["source_id"]),
        ))
    if split_name is not None and not tiles:
        raise DataError(f"{tile_dir}: no tiles assigned to split {split_name!r}")
    return TileSet(tiles)


def assign_splits(tile_dir: str | Path, parts: Dict[str, TileSet]) -> Path:
    """Rewrite the manifest's split membership from named partitions."""
    tile_dir = Path(tile_dir)
    manifest = read_manifest(tile_dir)
    membership = {t.tile_id: name for name, part in parts.items() for t in part}
    for e in manifest["tiles"]:
        e["split"] = membership.get(e["id"])
    return write_json_atomic(manifest, tile_dir / MANIFEST_NAME)
