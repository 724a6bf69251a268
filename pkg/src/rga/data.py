"""Dataset ingestion, augmentation, manifests, and batch iteration.

Expected directory layout::

    <root>/train/images/*.png   <root>/train/masks/*.png
    <root>/test/images/*.png    <root>/test/masks/*.png

Image and mask files pair up by identical filename stem. Training records are
expanded with deterministic flip/rotation descriptors; transforms are applied
lazily when a batch is materialized, so repeated materialization of the same
record is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import ops
from .errors import DataError
from .tensor import Tensor

TARGET_SIZE = 512
LAYOUTS = ("drive", "chase", "stare")

# records per training image: identity + hflip + vflip + one rotation per
# degree; the stare rule additionally flips every rotated copy
EXPANSION_PER_IMAGE = {"drive": 363, "chase": 363, "stare": 1083}


# ---------------------------------------------------------------------------
# PNG i/o

def _open_8bit(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode not in ("RGB", "L"):
        raise DataError(f"{path}: unsupported mode {img.mode!r}; need 8-bit RGB or grayscale")
    return img


def load_image(path) -> Tensor:
    """Read an 8-bit PNG as a [1,3,H,W] tensor scaled to [0,1].

    Grayscale files are replicated across the three channels.
    """
    img = _open_8bit(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=-1)
    return Tensor(arr.transpose(2, 0, 1)[None])


def load_mask(path) -> Tensor:
    """Read a mask PNG as a binary [1,1,H,W] tensor (threshold 0.5)."""
    img = _open_8bit(path)
    if img.mode != "L":
        img = img.convert("L")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return Tensor((arr >= 0.5).astype(np.float32)[None, None])


def write_png(path, arr: np.ndarray) -> None:
    """Write a uint8 array ((H,W) grayscale or (H,W,3) RGB) as PNG."""
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# geometric transforms

def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of the trailing two axes (half-pixel centers)."""
    h, w = arr.shape[-2], arr.shape[-1]
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)), 0, h - 1).astype(int)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)), 0, w - 1).astype(int)
    return arr[..., ys[:, None], xs[None, :]]


def resize_to_target(image: Tensor, mask: Tensor, out_h: int = TARGET_SIZE,
                     out_w: int = TARGET_SIZE) -> tuple[Tensor, Tensor]:
    """Bilinear for the image, nearest-neighbor (re-binarized) for the mask."""
    img = ops.resize_bilinear(image, out_h, out_w)
    m = nearest_resize(mask.data, out_h, out_w)
    return img, Tensor((m >= 0.5).astype(np.float32))


def _rotation_sources(h: int, w: int, degrees: float):
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    sy = cy + np.cos(theta) * dy + np.sin(theta) * dx
    sx = cx - np.sin(theta) * dy + np.cos(theta) * dx
    return sy, sx


def rotate(arr: np.ndarray, degrees: int, interp: str) -> np.ndarray:
    """Rotate the trailing two axes about the center, zero-filled outside.

    Angles are taken mod 360; right-angle rotations of square arrays are
    lossless index permutations. ``interp`` is ``"bilinear"`` or ``"nearest"``.
    """
    d = degrees % 360
    if d == 0:
        return arr.copy()
    h, w = arr.shape[-2], arr.shape[-1]
    if h == w and d in (90, 180, 270):
        return np.ascontiguousarray(np.rot90(arr, k=d // 90, axes=(-2, -1)))
    sy, sx = _rotation_sources(h, w, d)
    if interp == "nearest":
        iy = np.floor(sy + 0.5).astype(int)
        ix = np.floor(sx + 0.5).astype(int)
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = arr[..., np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
        return np.where(valid, out, 0).astype(arr.dtype)
    if interp != "bilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    pad = [(0, 0)] * (arr.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(arr, pad)
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = (sy - y0).astype(arr.dtype)
    fx = (sx - x0).astype(arr.dtype)
    y0i = np.clip(y0, -1, h).astype(int) + 1
    y1i = np.clip(y0 + 1, -1, h).astype(int) + 1
    x0i = np.clip(x0, -1, w).astype(int) + 1
    x1i = np.clip(x0 + 1, -1, w).astype(int) + 1
    out = (
        padded[..., y0i, x0i] * (1 - fy) * (1 - fx)
        + padded[..., y0i, x1i] * (1 - fy) * fx
        + padded[..., y1i, x0i] * fy * (1 - fx)
        + padded[..., y1i, x1i] * fy * fx
    )
    inside = (sy > -1) & (sy < h) & (sx > -1) & (sx < w)
    return np.where(inside, out, 0).astype(arr.dtype)


# ---------------------------------------------------------------------------
# augmentation descriptors

def parse_descriptor(descriptor: str) -> tuple[int, str | None]:
    """Return ``(rotation_degrees, flip)`` for a descriptor string.

    Grammar: ``identity`` | ``hflip`` | ``vflip`` | ``rot<d>`` |
    ``rot<d>+hflip`` | ``rot<d>+vflip`` with ``d`` in 1..360. Composed forms
    rotate first, then flip.
    """
    if descriptor == "identity":
        return 0, None
    if descriptor in ("hflip", "vflip"):
        return 0, descriptor
    parts = descriptor.split("+")
    if parts[0].startswith("rot") and len(parts) <= 2:
        try:
            deg = int(parts[0][3:])
        except ValueError:
            raise ValueError(f"invalid descriptor {descriptor!r}") from None
        if not 1 <= deg <= 360:
            raise ValueError(f"rotation degree out of range in {descriptor!r}")
        flip = None
        if len(parts) == 2:
            if parts[1] not in ("hflip", "vflip"):
                raise ValueError(f"invalid descriptor {descriptor!r}")
            flip = parts[1]
        return deg, flip
    raise ValueError(f"invalid descriptor {descriptor!r}")


def _flip(arr: np.ndarray, flip: str) -> np.ndarray:
    if flip == "hflip":
        return np.ascontiguousarray(arr[..., ::-1])
    return np.ascontiguousarray(arr[..., ::-1, :])


def augment(image: Tensor, mask: Tensor, descriptor: str) -> tuple[Tensor, Tensor]:
    """Apply one deterministic transform to an image/mask pair.

    Flips mirror both identically; rotations are bilinear for the image and
    nearest for the mask, with zero fill outside the frame.
    """
    deg, flip = parse_descriptor(descriptor)
    img = image.data
    m = mask.data
    if deg % 360 != 0:
        img = rotate(img, deg, "bilinear")
        m = rotate(m, deg, "nearest")
    if flip is not None:
        img = _flip(img, flip)
        m = _flip(m, flip)
    if deg % 360 == 0 and flip is None:
        img = img.copy()
        m = m.copy()
    return Tensor(img), Tensor(m)


def training_descriptors(layout: str) -> list[str]:
    """The deterministic expansion applied to every training image."""
    if layout not in LAYOUTS:
        raise DataError(f"unknown dataset layout {layout!r}; expected one of {LAYOUTS}")
    out = ["identity", "hflip", "vflip"]
    for d in range(1, 361):
        out.append(f"rot{d}")
        if layout == "stare":
            out.append(f"rot{d}+hflip")
            out.append(f"rot{d}+vflip")
    return out


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class SampleRecord:
    image: str  # path relative to the dataset root
    mask: str
    descriptor: str
    split: str  # train | val | test


@dataclass(frozen=True)
class Manifest:
    name: str
    root: str
    records: tuple[SampleRecord, ...]
    target_h: int = TARGET_SIZE
    target_w: int = TARGET_SIZE
    seed: int = 0

    def split(self, tag: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == tag]

    def save(self, path) -> None:
        lines = [
            f"{r.image}\t{r.mask}\t{r.descriptor}\t{r.split}" for r in self.records
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, root, name="dataset", target_h=TARGET_SIZE,
             target_w=TARGET_SIZE, seed=0) -> "Manifest":
        records = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
            records.append(SampleRecord(*parts))
        return cls(name, str(root), tuple(records), target_h, target_w, seed)


def _collect_pairs(root: Path, subset: str) -> list[tuple[str, str]]:
    img_dir = root / subset / "images"
    mask_dir = root / subset / "masks"
    if not img_dir.is_dir():
        return []
    pairs = []
    orphans = []
    for img in sorted(img_dir.glob("*.png")):
        mask = mask_dir / img.name
        if not mask.is_file():
            orphans.append(str(img))
            continue
        pairs.append(
            (str(img.relative_to(root)), str(mask.relative_to(root)))
        )
    if orphans:
        raise DataError(f"images without a matching mask under {mask_dir}: {orphans}")
    return pairs


def build_manifest(root, layout: str = "drive", seed: int = 0,
                   target_h: int = TARGET_SIZE, target_w: int = TARGET_SIZE) -> Manifest:
    """Scan a dataset root and expand training records per the layout rule.

    Every training pair yields one record per descriptor (363 for drive/chase,
    1083 for stare); test pairs get a single identity record.
    """
    root = Path(root)
    train_pairs = _collect_pairs(root, "train")
    test_pairs = _collect_pairs(root, "test")
    if not train_pairs and not test_pairs:
        raise DataError(f"no image/mask pairs found under {root}")
    if not train_pairs:
        raise DataError(f"no training pairs under {root / 'train'}")
    descriptors = training_descriptors(layout)
    records = []
    for image, mask in train_pairs:
        for desc in descriptors:
            records.append(SampleRecord(image, mask, desc, "train"))
    for image, mask in test_pairs:
        records.append(SampleRecord(image, mask, "identity", "test"))
    return Manifest(layout, str(root), tuple(records), target_h, target_w, seed)


def split_validation(manifest: Manifest, fraction: float, seed: int) -> Manifest:
    """Re-tag a seeded selection of training records as the validation split."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"validation fraction must be in [0, 1), got {fraction}")
    train_idx = [i for i, r in enumerate(manifest.records) if r.split == "train"]
    n_val = int(round(fraction * len(train_idx)))
    if n_val == 0:
        return manifest
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(train_idx), size=n_val, replace=False).tolist())
    records = list(manifest.records)
    for j, i in enumerate(train_idx):
        if j in chosen:
            records[i] = replace(records[i], split="val")
    return replace(manifest, records=tuple(records))


# ---------------------------------------------------------------------------
# batch iteration

class PairCache:
    """Caches base pairs after resize; materialization stays pure."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache: dict[tuple[str, str], tuple[Tensor, Tensor]] = {}

    def base(self, record: SampleRecord) -> tuple[Tensor, Tensor]:
        key = (record.image, record.mask)
        if key not in self._cache:
            root = Path(self.manifest.root)
            img = load_image(root / record.image)
            mask = load_mask(root / record.mask)
            self._cache[key] = resize_to_target(
                img, mask, self.manifest.target_h, self.manifest.target_w
            )
        return self._cache[key]

    def materialize(self, record: SampleRecord) -> tuple[Tensor, Tensor]:
        img, mask = self.base(record)
        return augment(img, mask, record.descriptor)


def materialize_record(manifest: Manifest, record: SampleRecord) -> tuple[Tensor, Tensor]:
    """Load, resize and transform one record."""
    return PairCache(manifest).materialize(record)


def batch_iter(manifest: Manifest, batch_size: int, seed: int, epoch: int,
               split: str = "train", cache: PairCache | None = None):
    """Yield ``(images, masks)`` batches in a (seed, epoch)-determined order.

    The record permutation depends only on ``(seed, epoch)``; the final short
    batch is kept. Validation and test splits are iterated in manifest order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    records = manifest.split(split)
    if cache is None:
        cache = PairCache(manifest)
    if split == "train":
        order = np.random.default_rng([seed, epoch]).permutation(len(records))
    else:
        order = np.arange(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        pairs = [cache.materialize(r) for r in chunk]
        images = Tensor(np.concatenate([p[0].data for p in pairs], axis=0))
        masks = Tensor(np.concatenate([p[1].data for p in pairs], axis=0))
        yield images, masks


# ---------------------------------------------------------------------------
# synthetic fixtures

def make_synthetic_pair(size: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """A vessel-like fundus image and its binary mask, fully seeded.

    Returns ``(image (H,W,3) uint8, mask (H,W) uint8 in {0, 255})``. Vessels
    are dark curved strokes on a reddish background, mimicking the statistics
    the segmentation task cares about at desk scale.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cy, cx = (size - 1) / 2.0, (size - 1) / 2.0
    radius = np.hypot(yy - cy, xx - cx) / (size / 2.0)
    base = 0.70 - 0.25 * radius**2 + 0.03 * np.sin(xx / size * 6.0)

    mask = np.zeros((size, size), dtype=bool)
    n_vessels = 4
    for v in range(n_vessels):
        amp = rng.uniform(0.08, 0.22) * size
        freq = rng.uniform(0.8, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(0.2, 0.8) * size
        thickness = rng.uniform(1.0, 2.2) * size / 64.0
        ts = np.linspace(0, size - 1, size * 4)
        ys = offset + amp * np.sin(freq * ts / size * 2 * np.pi + phase)
        pts = np.stack([ys, ts], axis=1) if v % 2 == 0 else np.stack([ts, ys], axis=1)
        for py, px in pts:
            dist = np.hypot(yy - py, xx - px)
            mask |= dist <= thickness

    img = np.zeros((size, size, 3), dtype=np.float32)
    img[..., 0] = base
    img[..., 1] = base * 0.55
    img[..., 2] = base * 0.35
    img[mask] *= 0.45
    img += rng.normal(0.0, 0.01, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    return (img * 255).round().astype(np.uint8), mask.astype(np.uint8) * 255


def make_synthetic_dataset(root, n_train: int = 2, n_test: int = 1,
                           size: int = 64, seed: int = 0) -> Path:
    """Write a tiny synthetic dataset in the expected directory layout."""
    root = Path(root)
    idx = 0
    for subset, count in (("train", n_train), ("test", n_test)):
        (root / subset / "images").mkdir(parents=True, exist_ok=True)
        (root / subset / "masks").mkdir(parents=True, exist_ok=True)
        for i in range(count):
            img, mask = make_synthetic_pair(size, seed + idx)
            write_png(root / subset / "images" / f"{subset}_{i:02d}.png", img)
            write_png(root / subset / "masks" / f"{subset}_{i:02d}.png", mask)
            idx += 1
    return root
