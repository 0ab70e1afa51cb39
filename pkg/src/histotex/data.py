"""Dataset indexing, stratified splitting, preprocessing and augmentation.

Expected layout: one directory per class under the dataset root, images as
.png/.tif/.jpg. Images are decoded to RGB, optionally colour-normalized,
scaled to [0,1], resized bilinearly, augmented in memory during training,
then channel-normalized into NCHW float32 batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .rng import RngStream
from .stain import StainModel, normalize_image

IMAGE_EXTENSIONS = (".png", ".tif", ".jpg")

CRC_CLASS_NAMES = (
    "tumour_epithelium", "simple_stroma", "complex_stroma", "immune_cell",
    "debris", "mucosal_glands", "adipose_tissue", "background",
)

IMAGENET_MEANS = (0.485, 0.456, 0.406)
IMAGENET_STDS = (0.229, 0.224, 0.225)

EXPECTED_TILE_SIZE = 150
SPLIT_NAMES = ("train", "val", "test")
_SPLIT_FILE_HEADER = "HTXSPLIT 1"


class DatasetError(ValueError):
    pass


@dataclass
class DatasetIndex:
    root: Path
    class_names: tuple[str, ...]
    files: dict[str, list[str]]            # class -> sorted relative paths
    splits: dict[str, str] = field(default_factory=dict)  # relpath -> split
    seed: Optional[int] = None
    warnings: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.files.values())

    def split_items(self, split: str) -> list[tuple[str, int]]:
        """(relpath, label) pairs of one split, in deterministic order."""
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        out = []
        for label, cls in enumerate(self.class_names):
            for rel in self.files[cls]:
                if self.splits.get(rel) == split:
                    out.append((rel, label))
        return out

    def split_counts(self) -> dict[str, int]:
        return {s: len(self.split_items(s)) for s in SPLIT_NAMES}


def scan_dataset(root: str | Path) -> DatasetIndex:
    """Index a class-per-directory tree, validating that images decode."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} contains no class directories")
    warnings: list[str] = []
    files: dict[str, list[str]] = {}
    odd_sizes = 0
    for cdir in class_dirs:
        kept = []
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(f) as img:
                    w, h = img.size
            except Exception as exc:  # undecodable: skip, keep a note
                warnings.append(f"skipped undecodable file {f}: {exc}")
                continue
            if (w, h) != (EXPECTED_TILE_SIZE, EXPECTED_TILE_SIZE):
                odd_sizes += 1
            kept.append(str(f.relative_to(root)))
        if not kept:
            raise DatasetError(f"class directory {cdir} has no decodable images")
        files[cdir.name] = kept
    if odd_sizes:
        warnings.append(f"{odd_sizes} images are not "
                        f"{EXPECTED_TILE_SIZE}x{EXPECTED_TILE_SIZE}")
    if len(class_dirs) != len(CRC_CLASS_NAMES):
        warnings.append(f"expected {len(CRC_CLASS_NAMES)} classes, "
                        f"found {len(class_dirs)}")
    return DatasetIndex(root=root, class_names=tuple(d.name for d in class_dirs),
                        files=files, warnings=warnings)


def stratified_split(index: DatasetIndex,
                     ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
                     seed: int = 0) -> DatasetIndex:
    """Assign train/val/test per class: seeded shuffle, contiguous slices."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    stream = RngStream(seed)
    splits: dict[str, str] = {}
    for ci, cls in enumerate(index.class_names):
        names = list(index.files[cls])
        if len(names) < 5:
            raise DatasetError(
                f"class {cls!r} has only {len(names)} samples; cannot stratify")
        order = stream.generator("split", index=ci).permutation(len(names))
        n = len(names)
        n_train = int(round(n * ratios[0]))
        n_val = int(round(n * ratios[1]))
        for pos, j in enumerate(order):
            split = ("train" if pos < n_train
                     else "val" if pos < n_train + n_val else "test")
            splits[names[j]] = split
    return replace(index, splits=splits, seed=seed)


def save_split_file(index: DatasetIndex, path: str | Path) -> None:
    if not index.splits:
        raise ValueError("index has no split assignment")
    lines = [f"{_SPLIT_FILE_HEADER} seed={index.seed}"]
    for rel in sorted(index.splits):
        lines.append(f"{rel}\t{index.splits[rel]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_split_file(index: DatasetIndex, path: str | Path) -> DatasetIndex:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(_SPLIT_FILE_HEADER):
        raise ValueError(f"not a split file: {path}")
    seed = None
    if "seed=" in lines[0]:
        tail = lines[0].split("seed=")[1]
        seed = int(tail) if tail != "None" else None
    splits: dict[str, str] = {}
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rel, split = line.split("\t")
        except ValueError:
            raise ValueError(f"{path}:{i}: malformed line {line!r}")
        if split not in SPLIT_NAMES:
            raise ValueError(f"{path}:{i}: unknown split {split!r}")
        splits[rel] = split
    known = {rel for names in index.files.values() for rel in names}
    unknown = set(splits) - known
    if unknown:
        raise ValueError(f"split file names {len(unknown)} files missing from "
                         f"the dataset, e.g. {sorted(unknown)[:3]}")
    return replace(index, splits=splits, seed=seed)


# ---------------------------------------------------------------------------
# pixel transforms
# ---------------------------------------------------------------------------

def resize_bilinear(image: np.ndarray, out_hw: tuple[int, int] = (224, 224)) -> np.ndarray:
    """Bilinear resize with half-pixel (corner-aligned=false) sampling."""
    img = np.asarray(image, dtype=np.float32)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, _ = img.shape
    oh, ow = out_hw
    if h < 2 or w < 2:
        raise ValueError(f"resize needs at least a 2x2 image, got {h}x{w}")

    def axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (src - lo).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, oh)
    x0, x1, fx = axis_coords(w, ow)
    top = img[y0][:, x0] * (1 - fx[None, :, None]) + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx[None, :, None]) + img[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy[:, None, None]) + bot * fy[:, None, None]
    return out[:, :, 0] if squeeze else out


def normalize_channels(image: np.ndarray, means: Sequence[float],
                       stds: Sequence[float]) -> np.ndarray:
    """(x - mean) / std per channel on an (H,W,3) image scaled to [0,1]."""
    means = np.asarray(means, dtype=np.float32)
    stds = np.asarray(stds, dtype=np.float32)
    if (stds <= 0).any():
        raise ValueError(f"channel stds must be positive, got {stds}")
    return (np.asarray(image, dtype=np.float32) - means) / stds


def denormalize_channels(image: np.ndarray, means: Sequence[float],
                         stds: Sequence[float]) -> np.ndarray:
    means = np.asarray(means, dtype=np.float32)
    stds = np.asarray(stds, dtype=np.float32)
    return np.asarray(image, dtype=np.float32) * stds + means


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    """Per-transform switches and magnitudes; each fires with ``prob``."""

    hflip: bool = True
    vflip: bool = True
    rotations: tuple[int, ...] = (90, 180, 270)
    zoom_range: tuple[float, float] = (1.0, 1.1)
    jitter_px: int = 4
    brightness: float = 0.1
    contrast: float = 0.1
    warp_magnitude: float = 0.08
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    elastic_alpha: float = 10.0
    elastic_sigma: float = 4.0
    prob: float = 0.5

    def __post_init__(self):
        if not set(self.rotations) <= {90, 180, 270}:
            raise ValueError(f"rotations must be multiples of 90: {self.rotations}")
        for name in ("jitter_px", "brightness", "contrast", "warp_magnitude",
                     "elastic_alpha", "elastic_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob must be in [0,1], got {self.prob}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(hflip=False, vflip=False, rotations=(), zoom_range=(1.0, 1.0),
                   jitter_px=0, brightness=0.0, contrast=0.0, warp_magnitude=0.0,
                   blur_sigma=(0.0, 0.0), elastic_alpha=0.0, prob=0.0)

    @classmethod
    def geometric(cls) -> "AugmentConfig":
        """Flips and right-angle rotations only (cheap, lossless)."""
        return cls(zoom_range=(1.0, 1.0), jitter_px=0, brightness=0.0,
                   contrast=0.0, warp_magnitude=0.0, blur_sigma=(0.0, 0.0),
                   elastic_alpha=0.0)


def _zoom_crop(img: np.ndarray, zoom: float, gen: np.random.Generator) -> np.ndarray:
    h, w, _ = img.shape
    ch, cw = max(2, int(round(h / zoom))), max(2, int(round(w / zoom)))
    if ch >= h and cw >= w:
        return img
    top = int(gen.integers(0, h - ch + 1))
    left = int(gen.integers(0, w - cw + 1))
    return resize_bilinear(img[top:top + ch, left:left + cw], (h, w))


def _homography(src_pts: np.ndarray, dst_pts: np.ndarray) -> np.ndarray:
    """3x3 projective transform mapping dst -> src (for inverse sampling)."""
    A, b = [], []
    for (xs, ys), (xd, yd) in zip(src_pts, dst_pts):
        A.append([xd, yd, 1, 0, 0, 0, -xs * xd, -xs * yd])
        b.append(xs)
        A.append([0, 0, 0, xd, yd, 1, -ys * xd, -ys * yd])
        b.append(ys)
    coeff = np.linalg.solve(np.asarray(A, dtype=np.float64),
                            np.asarray(b, dtype=np.float64))
    return np.append(coeff, 1.0).reshape(3, 3)


def _warp_perspective(img: np.ndarray, magnitude: float,
                      gen: np.random.Generator) -> np.ndarray:
    h, w, _ = img.shape
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float)
    jolt = gen.uniform(-magnitude, magnitude, (4, 2)) * [w, h]
    H = _homography(corners + jolt, corners)
    ys, xs = np.mgrid[0:h, 0:w]
    ones = np.ones_like(xs, dtype=np.float64)
    coords = H @ np.stack([xs.ravel(), ys.ravel(), ones.ravel()])
    sx = coords[0] / coords[2]
    sy = coords[1] / coords[2]
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(
            img[:, :, c], [sy.reshape(h, w), sx.reshape(h, w)],
            order=1, mode="reflect").astype(np.float32)
    return out


def _jitter(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    if dx == 0 and dy == 0:
        return img
    pad = max(abs(dx), abs(dy))
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    h, w, _ = img.shape
    return padded[pad + dy:pad + dy + h, pad + dx:pad + dx + w]


def _elastic(img: np.ndarray, alpha: float, sigma: float,
             gen: np.random.Generator) -> np.ndarray:
    h, w, _ = img.shape
    dx = ndimage.gaussian_filter(gen.uniform(-1, 1, (h, w)), sigma) * alpha
    dy = ndimage.gaussian_filter(gen.uniform(-1, 1, (h, w)), sigma) * alpha
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(
            img[:, :, c], [ys + dy, xs + dx], order=1, mode="reflect").astype(np.float32)
    return out


def augment_sample(image: np.ndarray, cfg: AugmentConfig,
                   gen: np.random.Generator) -> np.ndarray:
    """Randomly transform one (H,W,3) image in [0,1]; dims are unchanged.

    Composition order: flips, rotation, zoom crop, warp, jitter, lighting,
    blur, elastic. Deterministic given the generator state.
    """
    img = np.asarray(image, dtype=np.float32)
    p = cfg.prob
    if cfg.hflip and gen.random() < p:
        img = img[:, ::-1]
    if cfg.vflip and gen.random() < p:
        img = img[::-1]
    if cfg.rotations and gen.random() < p:
        k = int(gen.choice(len(cfg.rotations)))
        img = np.rot90(img, k=cfg.rotations[k] // 90)
    if cfg.zoom_range[1] > 1.0 and gen.random() < p:
        img = _zoom_crop(img, float(gen.uniform(*cfg.zoom_range)), gen)
    if cfg.warp_magnitude > 0 and gen.random() < p:
        img = _warp_perspective(img, cfg.warp_magnitude, gen)
    if cfg.jitter_px > 0 and gen.random() < p:
        dx = int(gen.integers(-cfg.jitter_px, cfg.jitter_px + 1))
        dy = int(gen.integers(-cfg.jitter_px, cfg.jitter_px + 1))
        img = _jitter(img, dx, dy)
    if (cfg.brightness > 0 or cfg.contrast > 0) and gen.random() < p:
        b = float(gen.uniform(-cfg.brightness, cfg.brightness))
        c = float(gen.uniform(-cfg.contrast, cfg.contrast))
        img = (img - 0.5) * (1.0 + c) + 0.5 + b
    if cfg.blur_sigma[1] > 0 and gen.random() < p:
        sigma = float(gen.uniform(*cfg.blur_sigma))
        if sigma > 1e-3:
            img = ndimage.gaussian_filter(img, (sigma, sigma, 0)).astype(np.float32)
    if cfg.elastic_alpha > 0 and gen.random() < p:
        img = _elastic(img, cfg.elastic_alpha, cfg.elastic_sigma, gen)
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0), dtype=np.float32)


# ---------------------------------------------------------------------------
# batch streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 32
    image_size: int = 224
    means: tuple[float, float, float] = IMAGENET_MEANS
    stds: tuple[float, float, float] = IMAGENET_STDS
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


class BatchProvider:
    """Streams normalized NCHW batches from per-split item lists.

    Items are ``(loader, label)`` pairs where ``loader()`` yields an (H,W,3)
    float image in [0,1] already at the target size. Training epochs are
    reshuffled per epoch; augmentation draws are keyed by (epoch, item id) so
    results do not depend on iteration order. Items that fail to load are
    reported on ``errors`` and their whole batch is skipped.
    """

    def __init__(self, items: dict[str, list[tuple[Callable[[], np.ndarray], int]]],
                 class_names: Sequence[str], spec: BatchSpec,
                 augment: Optional[AugmentConfig] = None):
        self.items = items
        self.class_names = tuple(class_names)
        self.spec = spec
        self.augment = augment
        self.rng = RngStream(spec.seed)
        self.errors: list[tuple[str, int, str]] = []

    def n(self, split: str) -> int:
        return len(self.items.get(split, []))

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.n("train") / self.spec.batch_size)

    def _finalize(self, img: np.ndarray) -> np.ndarray:
        img = normalize_channels(img, self.spec.means, self.spec.stds)
        return img.transpose(2, 0, 1)

    def _stream(self, split: str, order: np.ndarray,
                epoch: Optional[int]) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        items = self.items[split]
        bs = self.spec.batch_size
        for start in range(0, len(order), bs):
            chunk = order[start:start + bs]
            xs, ys = [], []
            failed = False
            for item_id in chunk:
                loader, label = items[item_id]
                try:
                    img = loader()
                except Exception as exc:
                    self.errors.append((split, int(item_id), str(exc)))
                    failed = True
                    break
                if epoch is not None and self.augment is not None:
                    gen = self.rng.generator("augment", epoch, int(item_id))
                    img = augment_sample(img, self.augment, gen)
                xs.append(self._finalize(img))
                ys.append(label)
            if failed:
                continue
            yield np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64)

    def train_batches(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        if self.n("train") == 0:
            raise DatasetError("train split is empty")
        order = self.rng.generator("shuffle", epoch).permutation(self.n("train"))
        return self._stream("train", order, epoch)

    def eval_batches(self, split: str) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        if self.n(split) == 0:
            raise DatasetError(f"{split} split is empty")
        return self._stream(split, np.arange(self.n(split)), None)

    def val_batches(self):
        return self.eval_batches("val")

    def test_batches(self):
        return self.eval_batches("test")


def folder_provider(index: DatasetIndex, spec: BatchSpec,
                    augment: Optional[AugmentConfig] = None,
                    stain_model: Optional[StainModel] = None,
                    cache: bool = True) -> BatchProvider:
    """Provider over an indexed image tree; stain-normalizes before scaling."""
    memo: dict[str, np.ndarray] = {}

    def make_loader(rel: str) -> Callable[[], np.ndarray]:
        def load() -> np.ndarray:
            if cache and rel in memo:
                return memo[rel]
            with Image.open(index.root / rel) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
            if stain_model is not None:
                rgb, _ = normalize_image(rgb, stain_model)
            arr = rgb.astype(np.float32) / 255.0
            if arr.shape[:2] != (spec.image_size, spec.image_size):
                arr = resize_bilinear(arr, (spec.image_size, spec.image_size))
            if cache:
                memo[rel] = arr
            return arr
        return load

    items = {split: [(make_loader(rel), label)
                     for rel, label in index.split_items(split)]
             for split in SPLIT_NAMES}
    return BatchProvider(items, index.class_names, spec, augment)


def array_provider(arrays: dict[str, tuple[np.ndarray, np.ndarray]],
                   class_names: Sequence[str], spec: BatchSpec,
                   augment: Optional[AugmentConfig] = None) -> BatchProvider:
    """Provider over in-memory (N,H,W,3) [0,1] arrays keyed by split."""
    items: dict[str, list] = {s: [] for s in SPLIT_NAMES}
    for split, (x, y) in arrays.items():
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[3] != 3:
            raise ValueError(f"{split}: expected (N,H,W,3) array, got {x.shape}")
        if x.shape[1:3] != (spec.image_size, spec.image_size):
            x = np.stack([resize_bilinear(img, (spec.image_size, spec.image_size))
                          for img in x])
        items[split] = [(lambda img=img: img, int(label))
                        for img, label in zip(x, y)]
    return BatchProvider(items, class_names, spec, augment)


def make_batches(index: DatasetIndex, split: str, spec: BatchSpec,
                 augment: Optional[AugmentConfig] = None,
                 stain_model: Optional[StainModel] = None,
                 epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One-shot batch stream over a split (training streams get augmented)."""
    provider = folder_provider(index, spec, augment, stain_model)
    if split == "train":
        return provider.train_batches(epoch)
    return provider.eval_batches(split)
