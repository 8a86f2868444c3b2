"""Fundus-style preprocessing, augmentation, ground-truth fusion and a
synthetic dataset generator.

Images travel as :class:`RawImage` (``uint8``, ``(H, W, C)``) until
:func:`standardize` turns them into float tensors in ``(C, H, W)`` layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .metrics import LESION_TYPES, GroundTruthRegion
from .proposals import connected_components

__all__ = [
    "RawImage",
    "PreprocessedImage",
    "DatasetItem",
    "LabeledDataset",
    "DegenerateImageError",
    "crop_black_margins",
    "resize",
    "resize_mask",
    "standardize",
    "standardize_array",
    "preprocess",
    "AugmentParams",
    "augment",
    "rotate",
    "fuse_expert_masks",
    "SynthConfig",
    "generate_synthetic",
    "read_image",
    "write_png",
    "write_dataset",
    "read_manifest",
    "load_item",
    "prepare_item",
]

NRDR, RDR = 0, 1


class DegenerateImageError(ValueError):
    """Image has a single intensity value, so it cannot be standardised."""


@dataclass
class RawImage:
    data: np.ndarray  # uint8 (H, W, C)
    id: str = ""

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[..., None]
        if d.ndim != 3 or d.shape[2] not in (1, 3) or min(d.shape[:2]) < 1:
            raise ValueError(f"raw image must be (H, W, 1|3), got {d.shape}")
        self.data = d.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class PreprocessedImage:
    tensor: np.ndarray  # float32 (C, S, S)
    crop_box: Tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive) in source
    mean: float
    std: float
    id: str = ""


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def crop_black_margins(img: RawImage, intensity_threshold: int = 10):
    """Crop to the bounding box of pixels brighter than the threshold."""
    bright = img.data.max(axis=2) > intensity_threshold
    if not bright.any():
        return img, (0, 0, img.height, img.width)
    rows = np.flatnonzero(bright.any(axis=1))
    cols = np.flatnonzero(bright.any(axis=0))
    box = (int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)
    return RawImage(img.data[box[0] : box[2], box[1] : box[3]], img.id), box


def _center_aligned_matrix(src: int, dst: int) -> np.ndarray:
    """Linear resampling weights with pixel centres aligned, shape (dst, src)."""
    m = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * src / dst - 0.5
    pos = np.clip(pos, 0, src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    rows = np.arange(dst)
    m[rows, i0] += 1.0 - frac
    m[rows, i1] += frac
    return m


def _resample(data: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resample of (H, W, C) float data."""
    rm = _center_aligned_matrix(data.shape[0], h)
    cm = _center_aligned_matrix(data.shape[1], w)
    return np.einsum("ij,jkc,lk->ilc", rm, data, cm)


def resize(img: RawImage, size: int = 512) -> RawImage:
    """Bilinear resample to ``size x size`` (aspect ratio not kept)."""
    if size < 8:
        raise ValueError("target size must be >= 8")
    if img.height == size and img.width == size:
        return RawImage(img.data.copy(), img.id)
    out = _resample(img.data.astype(np.float64), size, size)
    return RawImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8), img.id)


def resize_mask(mask: np.ndarray, crop_box, size: int) -> np.ndarray:
    """Carry a source-resolution mask through crop and nearest-neighbour resize."""
    r0, c0, r1, c1 = crop_box
    m = np.asarray(mask)[r0:r1, c0:c1]
    if m.shape == (size, size):
        return m.copy()
    rows = np.minimum(((np.arange(size) + 0.5) * m.shape[0] / size).astype(int), m.shape[0] - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * m.shape[1] / size).astype(int), m.shape[1] - 1)
    return m[np.ix_(rows, cols)]


def standardize_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    if std == 0:
        raise DegenerateImageError("image has zero standard deviation")
    return ((x - x.mean()) / std).astype(np.float32)


def standardize(img) -> PreprocessedImage:
    """Subtract the mean and divide by the std over all pixels and channels.

    Accepts a :class:`RawImage`, a :class:`PreprocessedImage` or a
    ``(C, H, W)`` array.
    """
    if isinstance(img, RawImage):
        x = img.data.transpose(2, 0, 1).astype(np.float64)
        box, ident = (0, 0, img.height, img.width), img.id
    elif isinstance(img, PreprocessedImage):
        x, box, ident = img.tensor.astype(np.float64), img.crop_box, img.id
    else:
        x = np.asarray(img, dtype=np.float64)
        box, ident = (0, 0, x.shape[-2], x.shape[-1]), ""
    mean, std = float(x.mean()), float(x.std())
    if std == 0:
        raise DegenerateImageError(f"image {ident!r} has zero standard deviation")
    return PreprocessedImage(((x - mean) / std).astype(np.float32), box, mean, std, ident)


def preprocess(img: RawImage, size: int = 512, intensity_threshold: int = 10) -> PreprocessedImage:
    cropped, box = crop_black_margins(img, intensity_threshold)
    out = standardize(resize(cropped, size))
    out.crop_box = box
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    brightness: float = 0.2  # max additive shift, fraction of dynamic range
    contrast: Tuple[float, float] = (0.8, 1.25)
    rotation: Tuple[float, float] = (0.0, 360.0)  # degrees, uniform
    flip_h: float = 0.5
    flip_v: float = 0.5

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(0.0, (1.0, 1.0), (0.0, 0.0), 0.0, 0.0)


def rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate ``(C, H, W)`` counter-clockwise about the centre, zero fill.

    Multiples of 90 degrees are exact index permutations.
    """
    quarter = degrees / 90.0
    if quarter == round(quarter):
        return np.rot90(x, k=int(round(quarter)) % 4, axes=(1, 2)).copy()
    c, h, w = x.shape
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map of a counter-clockwise turn (rows grow downward)
    sy = cy + cos * dy + sin * dx
    sx = cx - sin * dy + cos * dx
    # round-off just past the border would otherwise zero-fill edge pixels
    for coord, n in ((sy, h), (sx, w)):
        inside = np.clip(coord, 0, n - 1)
        near = np.abs(coord - inside) < 1e-6
        coord[near] = inside[near]
    return np.stack([ndimage.map_coordinates(ch, [sy, sx], order=1, mode="constant", cval=0.0) for ch in x]).astype(x.dtype)


def augment(img: np.ndarray, rng_seed: int, params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Random brightness, contrast, rotation and flips of a ``(C, H, W)`` array."""
    rng = np.random.default_rng(rng_seed)
    x = np.asarray(img, dtype=np.float64)
    span = float(x.max() - x.min())
    shift = rng.uniform(-params.brightness, params.brightness) * span
    factor = rng.uniform(*params.contrast)
    angle = rng.uniform(*params.rotation) if params.rotation[1] > params.rotation[0] else params.rotation[0]
    flip_h = rng.random() < params.flip_h
    flip_v = rng.random() < params.flip_v
    if shift:
        x = x + shift
    if factor != 1.0:
        m = x.mean()
        x = (x - m) * factor + m
    if angle:
        x = rotate(x, angle)
    if flip_h:
        x = x[:, :, ::-1]
    if flip_v:
        x = x[:, ::-1, :]
    return np.ascontiguousarray(x).astype(np.asarray(img).dtype, copy=False)


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def fuse_expert_masks(masks: Sequence[np.ndarray], lesion_type: str, min_confidence: float = 0.75) -> List[GroundTruthRegion]:
    """Average expert masks; keep pixels with confidence >= ``min_confidence``."""
    if len(masks) == 0:
        return []
    arrs = [np.asarray(m).astype(bool) for m in masks]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("expert masks differ in dimensions")
    confidence = np.mean(arrs, axis=0)
    keep = confidence >= min_confidence
    return [
        GroundTruthRegion(comp, lesion_type, confidence[comp[:, 0], comp[:, 1]])
        for comp in connected_components(keep)
    ]


@dataclass
class DatasetItem:
    image: object  # RawImage or PreprocessedImage
    label: int
    regions: List[GroundTruthRegion] = field(default_factory=list)
    expert_masks: Optional[Dict[str, List[np.ndarray]]] = None
    background: Optional[np.ndarray] = None  # synthetic only: render without lesions


@dataclass
class LabeledDataset:
    items: List[DatasetItem]
    provenance: str = "synthetic"

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def arrays(self, size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Stack standardised tensors for training; raw images are preprocessed."""
        xs = []
        for it in self.items:
            img = it.image
            if isinstance(img, RawImage):
                img = preprocess(img, size or img.height)
            xs.append(img.tensor)
        return np.stack(xs), self.labels


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LesionStyle:
    radius: Tuple[float, float]  # semi-axis range in pixels at 64x64
    amplitude: float  # signed intensity change at the centre
    softness: float  # 0 flat, 1 falls to zero at the rim


LESION_STYLES = {
    "Hemorrhage": LesionStyle((5.5, 7.5), -70.0, 0.3),
    "HardExudate": LesionStyle((4.0, 5.5), 80.0, 0.1),
    "SoftExudate": LesionStyle((5.5, 7.5), 55.0, 0.15),
    "RedSmallDot": LesionStyle((1.0, 2.0), -60.0, 0.0),
}


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 200
    size: int = 64
    healthy_fraction: float = 0.5
    lesion_types: Tuple[str, ...] = LESION_TYPES
    lesions_per_image: Tuple[int, int] = (1, 5)
    expert_noise: bool = False
    n_experts: int = 4
    id_prefix: str = "img"

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.size < 16:
            raise ValueError("synthetic images need size >= 16")
        unknown = set(self.lesion_types) - set(LESION_TYPES)
        if unknown:
            raise ValueError(f"unknown lesion types {sorted(unknown)}")


def _background(rng: np.random.Generator, size: int):
    """Smooth textured disc on black; returns (float image, disc mask, radius)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    radius = 0.5 * size  # touches the frame: already margin-cropped
    r = np.hypot(yy - c, xx - c) / radius
    disc = r <= 1.0
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 5.0, mode="reflect")
    texture *= 8.0 / max(texture.std(), 1e-9)
    base = rng.uniform(110.0, 140.0)
    vignette = 1.0 - 0.2 * r**2
    img = (base + texture) * vignette
    img = np.clip(img, 70.0, 180.0)
    # soft rim: a hard disc edge reads as lesion-like contrast
    rim = np.clip((1.0 - r) * radius / 4.0, 0.0, 1.0)
    img *= rim * rim * (3.0 - 2.0 * rim)
    img[~disc] = 0.0
    return img, disc, radius


def _ellipse(size, cy, cx, ay, ax, angle):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (ca * dx + sa * dy) / ax
    v = (-sa * dx + ca * dy) / ay
    return np.sqrt(u * u + v * v)


def _noisy_experts(rng, mask, n):
    out = []
    for _ in range(n):
        m = mask.copy()
        roll = rng.random()
        if roll < 0.25:
            m = ndimage.binary_erosion(m) if ndimage.binary_erosion(m).any() else m
        elif roll < 0.5:
            m = ndimage.binary_dilation(m)
        out.append(m)
    return out


def _synth_one(rng: np.random.Generator, cfg: SynthConfig, index: int) -> DatasetItem:
    size = cfg.size
    scale = size / 64.0
    img, disc, radius = _background(rng, size)
    background = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    healthy = not cfg.lesion_types or rng.random() < cfg.healthy_fraction
    regions: List[GroundTruthRegion] = []
    expert_masks: Dict[str, List[np.ndarray]] = {}
    if not healthy:
        lt = cfg.lesion_types[rng.integers(len(cfg.lesion_types))]
        style = LESION_STYLES[lt]
        count = int(rng.integers(cfg.lesions_per_image[0], cfg.lesions_per_image[1] + 1))
        occupied = np.zeros((size, size), dtype=bool)
        c = (size - 1) / 2.0
        masks = []
        for _ in range(count):
            for _attempt in range(50):
                ay = rng.uniform(*style.radius) * scale
                ax = rng.uniform(*style.radius) * scale
                reach = max(ay, ax)
                rho = math.sqrt(rng.random()) * (radius - reach - 5.0)
                phi = rng.uniform(0, 2 * math.pi)
                cy, cx = c + rho * math.sin(phi), c + rho * math.cos(phi)
                dist = _ellipse(size, cy, cx, ay, ax, rng.uniform(0, math.pi))
                lesion = (dist <= 1.0) & disc
                if lesion.sum() < 1:
                    continue
                if (ndimage.binary_dilation(lesion, iterations=max(1, round(8 * scale))) & occupied).any():
                    continue
                break
            else:
                continue
            profile = 1.0 - style.softness * np.clip(dist, 0, 1) ** 2
            img = np.where(lesion, img + style.amplitude * profile, img)
            occupied |= lesion
            masks.append(lesion)
        if masks:
            for m in masks:
                comp = np.argwhere(m)
                regions.append(GroundTruthRegion(comp, lt))
            union = np.any(masks, axis=0)
            if cfg.expert_noise:
                experts = _noisy_experts(rng, union, cfg.n_experts)
                expert_masks[lt] = experts
                regions = fuse_expert_masks(experts, lt)
            else:
                expert_masks[lt] = [union]
        healthy = not masks
    data = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return DatasetItem(
        RawImage(data, f"{cfg.id_prefix}{index:05d}"),
        NRDR if healthy else RDR,
        regions,
        expert_masks,
        background,
    )


def generate_synthetic(config: SynthConfig = SynthConfig(), seed: int = 0) -> LabeledDataset:
    """Textured fundus-like discs; diseased images carry 1-5 lesions of one type."""
    rng = np.random.default_rng(seed)
    items = [_synth_one(rng, config, i) for i in range(config.n_images)]
    return LabeledDataset(items, "synthetic")


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_image(path, image_id: Optional[str] = None) -> RawImage:
    """Read an 8-bit PNG or PPM/PGM image."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        data = np.asarray(im, dtype=np.uint8)
    return RawImage(data, image_id if image_id is not None else Path(path).stem)


def write_png(path, data: np.ndarray) -> None:
    from PIL import Image

    arr = np.asarray(data)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr.astype(np.uint8), mode="L" if arr.ndim == 2 else "RGB").save(path)


def write_dataset(dataset: LabeledDataset, out_dir) -> Path:
    """Write images, per-expert masks and ``manifest.jsonl``.

    Layout::

        manifest.jsonl
        images/<id>.png
        masks/<id>/<LesionType>_<k>.png     one per expert, 255 = marked
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for item in dataset.items:
        img = item.image
        rel_img = f"images/{img.id}.png"
        write_png(out / rel_img, img.data)
        masks = {}
        for lt, experts in sorted((item.expert_masks or {}).items()):
            (out / "masks" / img.id).mkdir(parents=True, exist_ok=True)
            paths = []
            for k, m in enumerate(experts):
                rel = f"masks/{img.id}/{lt}_{k}.png"
                write_png(out / rel, m)
                paths.append(rel)
            masks[lt] = paths
        lines.append(json.dumps({"id": img.id, "image": rel_img, "label": item.label, "masks": masks}))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out / "manifest.jsonl"


def read_manifest(path) -> List[dict]:
    """Parse ``manifest.jsonl``; paths are resolved against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entry = {
                    "id": str(rec["id"]),
                    "image": base / rec["image"],
                    "label": int(rec["label"]),
                    "masks": {lt: [base / p for p in ps] for lt, ps in rec.get("masks", {}).items()},
                }
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest entry ({exc})") from None
            if entry["label"] not in (NRDR, RDR):
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1")
            unknown = set(entry["masks"]) - set(LESION_TYPES)
            if unknown:
                raise ValueError(f"{path}:{lineno}: unknown lesion types {sorted(unknown)}")
            entries.append(entry)
    return entries


def _regions_from_experts(expert_masks, crop_box, size) -> List[GroundTruthRegion]:
    regions: List[GroundTruthRegion] = []
    for lt, experts in sorted(expert_masks.items()):
        regions.extend(fuse_expert_masks([resize_mask(m, crop_box, size) for m in experts], lt))
    return regions


def prepare_item(item: DatasetItem, size: int, intensity_threshold: int = 10):
    """Preprocess an in-memory item; its expert masks follow the crop and resize.

    Gives the same regions as writing the item to disk and calling
    :func:`load_item`.
    """
    pre = preprocess(item.image, size, intensity_threshold)
    return pre, _regions_from_experts(item.expert_masks or {}, pre.crop_box, size)


def load_item(entry: dict, size: int, intensity_threshold: int = 10):
    """Preprocess one manifest entry; masks follow the same crop and resize."""
    raw = read_image(entry["image"], entry["id"])
    pre = preprocess(raw, size, intensity_threshold)
    experts = {lt: [read_image(p).data[..., 0] > 127 for p in paths] for lt, paths in entry["masks"].items()}
    return pre, _regions_from_experts(experts, pre.crop_box, size)
