"""Class activation maps and their export."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .proposals import normalize

__all__ = [
    "Heatmap",
    "compute_cam",
    "upsample_bilinear",
    "class_score_from_cam",
    "heatmap_for_image",
    "to_uint8",
    "write_heatmap_png",
    "write_heatmap_bin",
    "read_heatmap_bin",
    "overlay",
    "write_overlay_png",
]

RDR = 1


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W)
    class_index: int = RDR
    normalized: bool = False

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def normalize(self) -> "Heatmap":
        return Heatmap(normalize(self.values), self.class_index, True)


def compute_cam(feature_maps, weights, class_index: int = RDR) -> np.ndarray:
    """Weighted sum of the feature maps ``A[K,u,v]`` with ``w[c, :]``."""
    a = np.asarray(feature_maps)
    w = np.asarray(weights)
    if not 0 <= class_index < w.shape[0]:
        raise ValueError(f"class index {class_index} out of range [0, {w.shape[0]})")
    if a.ndim != 3 or a.shape[0] != w.shape[1]:
        raise ValueError(f"feature maps {a.shape} do not match weights {w.shape}")
    return np.tensordot(w[class_index], a, axes=(0, 0))


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (dst, src)."""
    m = np.zeros((dst, src))
    if src == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1) if dst > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - i0
    rows = np.arange(dst)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def upsample_bilinear(cam, target) -> np.ndarray:
    """Corner-aligned bilinear upsampling of a 2-D map to ``(H, W)``."""
    cam = np.asarray(cam, dtype=np.float64)
    u, v = cam.shape
    h, w = target
    if h < u or w < v:
        raise ValueError(f"target {target} smaller than source {cam.shape}; downsampling unsupported")
    out = _interp_matrix(u, h) @ cam @ _interp_matrix(v, w).T
    # a convex combination cannot leave [min, max]; clip the rounding residue
    return np.clip(out, cam.min(), cam.max())


def class_score_from_cam(cam, bias: float) -> float:
    """Mean of the raw (not upsampled) map plus the class bias: the logit."""
    return float(np.mean(cam) + bias)


def heatmap_for_image(net, image, class_index: int = RDR) -> Heatmap:
    """Forward one ``[ch, H, W]`` image and return its upsampled raw CAM."""
    _, fmaps = net.forward(image[None], "infer")
    cam = compute_cam(fmaps[0], net.classifier_weights, class_index)
    h, w, _ = net.spec.input_size
    return Heatmap(upsample_bilinear(cam, (h, w)), class_index, False)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

BIN_MAGIC = b"CAMH"
BIN_VERSION = 1


def to_uint8(values) -> np.ndarray:
    """Normalise and quantise with round-half-up."""
    return np.floor(normalize(values) * 255.0 + 0.5).astype(np.uint8)


def write_heatmap_png(path, heatmap: Heatmap) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(heatmap.values), mode="L").save(path)


def write_heatmap_bin(path, heatmap: Heatmap) -> None:
    """magic(4) version(u16) class(u16) height(u32) width(u32) float32 LE row-major."""
    header = BIN_MAGIC + struct.pack("<HHII", BIN_VERSION, heatmap.class_index, heatmap.height, heatmap.width)
    Path(path).write_bytes(header + np.ascontiguousarray(heatmap.values, dtype="<f4").tobytes())


def read_heatmap_bin(path) -> Heatmap:
    data = Path(path).read_bytes()
    if data[:4] != BIN_MAGIC:
        raise ValueError(f"{path}: not a heatmap file")
    version, cls, h, w = struct.unpack("<HHII", data[4:16])
    if version != BIN_VERSION:
        raise ValueError(f"{path}: unsupported heatmap version {version}")
    if len(data) != 16 + 4 * h * w:
        raise ValueError(f"{path}: payload size does not match {h}x{w}")
    values = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
    return Heatmap(values, cls, False)


def overlay(image, heatmap: Heatmap, colormap: str = "jet", alpha: float = 0.5) -> np.ndarray:
    """Blend a colour-mapped heatmap over an image; returns (H, W, 3) uint8.

    ``image`` may be (H, W), (H, W, C) or (C, H, W) with any value range;
    it is min-max scaled for display.
    """
    import matplotlib

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] in (1, 3) and img.shape[-1] not in (1, 3):
        img = img.transpose(1, 2, 0)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = normalize(img)
    cmap = matplotlib.colormaps[colormap]
    colored = cmap(normalize(heatmap.values))[..., :3]
    out = (1 - alpha) * img + alpha * colored
    return np.floor(out * 255.0 + 0.5).astype(np.uint8)


def write_overlay_png(path, image, heatmap: Heatmap, colormap: str = "jet", alpha: float = 0.5) -> None:
    from PIL import Image

    Image.fromarray(overlay(image, heatmap, colormap, alpha), mode="RGB").save(path)
