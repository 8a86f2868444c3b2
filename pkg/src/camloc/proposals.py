"""Heatmap to scored region proposals.

Normalise to [0, 1], threshold, split the mask into 8-connected
components and score every component by its maximum heatmap value.
Pixel sets are ``(n, 2)`` integer arrays of ``(row, col)`` coordinates in
raster order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "RegionProposal",
    "normalize",
    "threshold",
    "connected_components",
    "propose",
    "encode_rle",
    "decode_rle",
    "proposal_record",
    "write_jsonl",
    "read_jsonl",
    "proposals_mask",
]

DEFAULT_TAU = 0.65
DEFAULT_MIN_AREA = 4

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class RegionProposal:
    pixels: np.ndarray  # (n, 2) row, col
    score: float

    @property
    def area(self) -> int:
        return len(self.pixels)

    @property
    def bounding_box(self):
        """(row_min, col_min, row_max, col_max), inclusive."""
        lo = self.pixels.min(axis=0)
        hi = self.pixels.max(axis=0)
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])

    def mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.pixels[:, 0], self.pixels[:, 1]] = True
        return out


def normalize(heatmap) -> np.ndarray:
    """Min-max map to [0, 1]; a constant map becomes all zeros."""
    h = np.asarray(heatmap, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise ValueError("heatmap contains non-finite values")
    lo, hi = h.min(), h.max()
    if hi <= lo:
        return np.zeros_like(h)
    out = (h - lo) / (hi - lo)
    # pin the extremes exactly; (hi - lo) / (hi - lo) is not always 1.0
    out[h == hi] = 1.0
    return out


def threshold(normalized, tau: float = DEFAULT_TAU) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"threshold tau must lie in [0, 1], got {tau}")
    return np.asarray(normalized) >= tau


def connected_components(mask) -> List[np.ndarray]:
    """Maximal 8-connected components, ordered by their first raster pixel."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        return []
    # ndimage.label numbers components in raster order of first pixel
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    bounds = np.searchsorted(lab[order], np.arange(1, count + 2))
    coords = np.stack([rows[order], cols[order]], axis=1)
    return [coords[bounds[k] : bounds[k + 1]] for k in range(count)]


def propose(heatmap, tau: float = DEFAULT_TAU, min_area: int = DEFAULT_MIN_AREA) -> List[RegionProposal]:
    """Scored regions of ``heatmap``, best first; a constant map has none."""
    norm = normalize(heatmap)
    if not norm.any():
        return []
    comps = connected_components(threshold(norm, tau))
    props = [
        RegionProposal(c, float(norm[c[:, 0], c[:, 1]].max()))
        for c in comps
        if len(c) >= min_area
    ]
    # stable: equal scores keep raster order
    return sorted(props, key=lambda p: -p.score)


def proposals_mask(proposals: Iterable[RegionProposal], shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for p in proposals:
        out[p.pixels[:, 0], p.pixels[:, 1]] = True
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def encode_rle(pixels: np.ndarray) -> List[List[int]]:
    """Row runs ``[row, col_start, length]`` in raster order."""
    if len(pixels) == 0:
        return []
    px = pixels[np.lexsort((pixels[:, 1], pixels[:, 0]))]
    runs = []
    r0, c0 = int(px[0, 0]), int(px[0, 1])
    length = 1
    for r, c in px[1:]:
        r, c = int(r), int(c)
        if r == r0 and c == c0 + length:
            length += 1
        else:
            runs.append([r0, c0, length])
            r0, c0, length = r, c, 1
    runs.append([r0, c0, length])
    return runs


def decode_rle(runs: Sequence[Sequence[int]]) -> np.ndarray:
    out = [(r, c0 + k) for r, c0, n in runs for k in range(n)]
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def proposal_record(image_id: str, proposal: RegionProposal) -> dict:
    """One line of the proposal file; key order is part of the format."""
    return {
        "image_id": image_id,
        "score": proposal.score,
        "bbox": list(proposal.bounding_box),
        "area": proposal.area,
        "rle": encode_rle(proposal.pixels),
    }


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
