"""Image-level and lesion-level evaluation of region proposals.

Image level: an image with lesions of a type counts as detected either when
some proposal covers at least half of some ground-truth region of that type
(``overlap50``), or when some proposal shares one ground-truth pixel of
fused expert confidence 0.75 or more (``onepixel``).

Lesion level: a ground-truth region is detected when an active proposal
covers at least half of it. An active proposal is a false positive when it
touches no ground truth at all, or when its IoU averaged over the regions
it touches is below 0.5, so one oversized blob spanning several lesions is
not rewarded. Proposals carry no lesion type, so the false-positive test
looks at every region of the image while sensitivity is counted per type.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "LESION_TYPES",
    "GroundTruthRegion",
    "ImageResult",
    "FrocCurve",
    "EvalReport",
    "iou",
    "overlap_fraction",
    "image_tp_50",
    "image_tp_onepixel",
    "lesion_level_label",
    "froc",
    "roc_auc",
    "roc_curve",
    "report",
    "write_report",
    "write_roc_csv",
    "CRITERIA",
    "REFERENCE_IMAGE_LEVEL",
    "REFERENCE_LESION_LEVEL",
    "REFERENCE_CLASSIFICATION",
]

LESION_TYPES = ("Hemorrhage", "HardExudate", "SoftExudate", "RedSmallDot")
SHORT_NAMES = {"Hemorrhage": "H", "HardExudate": "HE", "SoftExudate": "SE", "RedSmallDot": "RSD"}

CRITERIA = ("overlap50", "onepixel")

COVERAGE_MIN = 0.5
MIOU_MIN = 0.5
CONFIDENCE_MIN = 0.75

# Published DiaretDB1 numbers, shown as static reference rows only.
# Image-level sensitivity (%): H, HE, SE, RSD.
REFERENCE_IMAGE_LEVEL = {
    "Ours (50% Overlap)": (97.2, 93.3, 81.8, 50.0),
    "Ours (OnePixel Overlap)": (97.2, 100.0, 90.9, 50.0),
}
# Lesion level (SE%, FPs/image) per type: H, HE, SE, RSD.
REFERENCE_LESION_LEVEL = {
    "Quellec et al.": ((71, 10), (80, 10), (90, 10), (61, 10)),
    "Ours (50% Overlap)": ((72, 2.25), (47, 1.9), (71, 1.45), (21, 2.0)),
    "Ours (OnePixel Overlap)": ((91, 1.5), (87, 1.5), (89, 1.5), (52, 1.5)),
}
REFERENCE_CLASSIFICATION = {"sensitivity": 0.936, "specificity": 0.976, "auc": 0.954}


@dataclass(eq=False)
class GroundTruthRegion:
    pixels: np.ndarray  # (n, 2) row, col
    lesion_type: str
    confidence: Optional[np.ndarray] = None  # per pixel, aligned with ``pixels``

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if len(self.pixels) == 0:
            raise ValueError("ground-truth region must be non-empty")
        if self.lesion_type not in LESION_TYPES:
            raise ValueError(f"unknown lesion type {self.lesion_type!r}; expected one of {LESION_TYPES}")
        if self.confidence is None:
            self.confidence = np.ones(len(self.pixels))
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.confidence.shape != (len(self.pixels),):
            raise ValueError("confidence must have one value per pixel")
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ValueError("confidence values must lie in [0, 1]")


def _pixels(obj) -> np.ndarray:
    px = getattr(obj, "pixels", obj)
    if isinstance(px, (set, frozenset)):
        px = sorted(px)
    return np.asarray(px, dtype=np.int64).reshape(-1, 2)


def _keys(pixels: np.ndarray) -> np.ndarray:
    return np.unique((pixels[:, 0] << 32) + pixels[:, 1])


def iou(a, b) -> float:
    ka, kb = _keys(_pixels(a)), _keys(_pixels(b))
    if len(ka) == 0 or len(kb) == 0:
        raise ValueError("iou needs two non-empty pixel sets")
    inter = len(np.intersect1d(ka, kb, assume_unique=True))
    return inter / (len(ka) + len(kb) - inter)


def overlap_fraction(gt, proposal) -> float:
    """Fraction of the ground-truth region covered by the proposal."""
    kg, kp = _keys(_pixels(gt)), _keys(_pixels(proposal))
    if len(kg) == 0:
        raise ValueError("ground-truth region must be non-empty")
    return len(np.intersect1d(kg, kp, assume_unique=True)) / len(kg)


def _of_type(gts, lesion_type):
    if lesion_type is None:
        return list(gts)
    return [g for g in gts if g.lesion_type == lesion_type]


def image_tp_50(proposals, gts, lesion_type: Optional[str] = None) -> bool:
    gts = _of_type(gts, lesion_type)
    return any(overlap_fraction(g, p) >= COVERAGE_MIN for p in proposals for g in gts)


def image_tp_onepixel(proposals, gts, lesion_type: Optional[str] = None) -> bool:
    gts = _of_type(gts, lesion_type)
    confident = [_keys(g.pixels[g.confidence >= CONFIDENCE_MIN]) for g in gts]
    confident = [k for k in confident if len(k)]
    if not confident:
        return False
    pool = np.unique(np.concatenate(confident))
    return any(np.intersect1d(pool, _keys(_pixels(p)), assume_unique=True).size for p in proposals)


def _proposal_stats(proposals, gts, lesion_type=None) -> Tuple[np.ndarray, np.ndarray]:
    """Per proposal FP flag over all ``gts``, and the coverage matrix
    ``cov[i, j] = |G_j & P_i| / |G_j|`` over the regions of ``lesion_type``."""
    typed = [j for j, g in enumerate(gts) if lesion_type is None or g.lesion_type == lesion_type]
    gkeys = [_keys(g.pixels) for g in gts]
    cov = np.zeros((len(proposals), len(typed)))
    is_fp = np.zeros(len(proposals), dtype=bool)
    for i, p in enumerate(proposals):
        pk = _keys(_pixels(p))
        inter = np.array([len(np.intersect1d(pk, gk, assume_unique=True)) for gk in gkeys], dtype=float)
        sizes = np.array([len(gk) for gk in gkeys], dtype=float)
        touched = inter > 0
        ious = inter[touched] / (len(pk) + sizes[touched] - inter[touched])
        is_fp[i] = not touched.any() or float(np.mean(ious)) < MIOU_MIN
        if typed:
            cov[i] = inter[typed] / sizes[typed]
    return is_fp, cov


def _score(p) -> float:
    return float(getattr(p, "score"))


def lesion_level_label(proposals, gts, t: float, lesion_type: Optional[str] = None) -> Tuple[int, int, int]:
    """``(tp_count, fp_count, detected_gt_count)`` using proposals scored >= ``t``.

    ``tp_count`` counts active proposals that are not false positives.
    """
    active = [p for p in proposals if _score(p) >= t]
    is_fp, cov = _proposal_stats(active, gts, lesion_type)
    detected = int((cov >= COVERAGE_MIN).any(axis=0).sum()) if len(active) else 0
    fp = int(is_fp.sum())
    return len(active) - fp, fp, detected


@dataclass
class FrocCurve:
    lesion_type: str
    thresholds: np.ndarray  # ascending, last is +inf
    fps_per_image: np.ndarray
    sensitivity: np.ndarray

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fps_per_image.tolist(), self.sensitivity.tolist()))

    def sensitivity_at(self, max_fps: float) -> float:
        """Best sensitivity among points with at most ``max_fps`` FPs/image."""
        ok = self.fps_per_image <= max_fps + 1e-12
        return float(self.sensitivity[ok].max()) if ok.any() else 0.0


def froc(images, lesion_type: str) -> FrocCurve:
    """Sweep the proposal score threshold over a dataset.

    ``images`` is a sequence of ``(proposals, gts)`` pairs, one per image,
    healthy images included. Each proposal's FP status does not depend on
    the threshold, and a region is detected at ``t`` iff the best score of
    the proposals covering it reaches ``t``; both are computed once.
    """
    if len(images) == 0:
        raise ValueError("froc needs at least one image")
    fp_scores: List[float] = []
    best: List[float] = []
    all_scores: List[float] = []
    for proposals, gts in images:
        is_fp, cov = _proposal_stats(proposals, gts, lesion_type)
        scores = np.array([_score(p) for p in proposals])
        all_scores.extend(scores.tolist())
        fp_scores.extend(scores[is_fp].tolist())
        for j in range(cov.shape[1]):
            hit = scores[cov[:, j] >= COVERAGE_MIN] if len(proposals) else scores[:0]
            best.append(float(hit.max()) if hit.size else -math.inf)
    if not best:
        raise ValueError(f"no ground truth of type {lesion_type!r} in the dataset")
    thresholds = np.append(np.unique(all_scores), math.inf)
    fp_sorted = np.sort(fp_scores)
    best_sorted = np.sort(best)
    fp_at = len(fp_sorted) - np.searchsorted(fp_sorted, thresholds, side="left")
    det_at = len(best_sorted) - np.searchsorted(best_sorted, thresholds, side="left")
    return FrocCurve(lesion_type, thresholds, fp_at / len(images), det_at / len(best))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve from the Mann-Whitney rank statistic; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """``(thresholds, fpr, tpr)`` for thresholds descending from +inf."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    thresholds = np.concatenate([[math.inf], np.unique(scores)[::-1]])
    pred = scores[None, :] >= thresholds[:, None]
    tpr = (pred & labels).sum(axis=1) / max(labels.sum(), 1)
    fpr = (pred & ~labels).sum(axis=1) / max((~labels).sum(), 1)
    return thresholds, fpr, tpr


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class ImageResult:
    image_id: str
    label: int  # 0 NRDR, 1 RDR
    score: float  # classifier probability of RDR
    proposals: list
    gts: List[GroundTruthRegion] = field(default_factory=list)


@dataclass
class EvalReport:
    n_images: int
    operating_threshold: float
    score_threshold: float
    image_sensitivity: Dict[str, Dict[str, Optional[float]]]  # criterion -> type -> SE
    image_counts: Dict[str, int]  # type -> images containing it
    specificity: Optional[float]
    classification: Dict[str, Optional[float]]
    froc: Dict[str, FrocCurve]
    lesion_operating_point: Dict[str, Tuple[float, float]]  # type -> (SE, FPs/image)

    def to_dict(self) -> dict:
        """Plain structure in the documented key order."""
        return {
            "n_images": self.n_images,
            "operating_threshold": self.operating_threshold,
            "score_threshold": self.score_threshold,
            "classification": dict(self.classification),
            "specificity": self.specificity,
            "image_level_sensitivity": {c: dict(v) for c, v in self.image_sensitivity.items()},
            "image_counts": dict(self.image_counts),
            "lesion_level": {
                t: {"sensitivity": se, "fps_per_image": fp} for t, (se, fp) in self.lesion_operating_point.items()
            },
            "reference": {
                "classification": REFERENCE_CLASSIFICATION,
                "image_level_sensitivity_percent": {k: list(v) for k, v in REFERENCE_IMAGE_LEVEL.items()},
                "lesion_level": {k: [list(x) for x in v] for k, v in REFERENCE_LESION_LEVEL.items()},
            },
        }


def report(results: Sequence[ImageResult], operating_threshold: float = 0.5, score_threshold: float = 0.0) -> EvalReport:
    """Aggregate image-level, classification and lesion-level metrics.

    ``operating_threshold`` splits classifier scores into RDR / NRDR;
    ``score_threshold`` is the proposal score at which the lesion-level
    operating point is read off.
    """
    labels = np.array([r.label for r in results], dtype=int)
    scores = np.array([r.score for r in results], dtype=float)
    predicted = scores >= operating_threshold

    healthy = labels == 0
    diseased = labels == 1
    specificity = float((~predicted[healthy]).mean()) if healthy.any() else None
    sensitivity = float(predicted[diseased].mean()) if diseased.any() else None
    auc = roc_auc(scores, labels) if healthy.any() and diseased.any() else None

    criteria = {"overlap50": image_tp_50, "onepixel": image_tp_onepixel}
    image_sens: Dict[str, Dict[str, Optional[float]]] = {c: {} for c in criteria}
    counts: Dict[str, int] = {}
    curves: Dict[str, FrocCurve] = {}
    op_point: Dict[str, Tuple[float, float]] = {}
    for lt in LESION_TYPES:
        with_type = [r for r in results if any(g.lesion_type == lt for g in r.gts)]
        counts[lt] = len(with_type)
        for name, fn in criteria.items():
            hits = [fn(r.proposals, r.gts, lt) for r in with_type]
            image_sens[name][lt] = float(np.mean(hits)) if hits else None
        if with_type:
            pairs = [(r.proposals, r.gts) for r in results]
            curves[lt] = froc(pairs, lt)
            tp = fp = det = total = 0
            for props, gts in pairs:
                a, b, c = lesion_level_label(props, gts, score_threshold, lt)
                tp, fp, det = tp + a, fp + b, det + c
                total += len(_of_type(gts, lt))
            op_point[lt] = (det / total, fp / len(results))
    return EvalReport(
        n_images=len(results),
        operating_threshold=operating_threshold,
        score_threshold=score_threshold,
        image_sensitivity=image_sens,
        image_counts=counts,
        specificity=specificity,
        classification={"sensitivity": sensitivity, "specificity": specificity, "auc": auc},
        froc=curves,
        lesion_operating_point=op_point,
    )


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def _csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return "" if x is None else x


def write_report(rep: EvalReport, out_dir, criteria: Sequence[str] = CRITERIA) -> List[Path]:
    """Write ``report.json``, the two table CSVs and one FROC CSV per type.

    ``table1_lesion_level.csv`` has one row per lesion type with the
    operating point next to the published rows; ``table2_image_level.csv``
    has one row per type and one column per requested criterion.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "report.json"
    path.write_text(json.dumps(rep.to_dict(), indent=2) + "\n", encoding="utf-8")
    written.append(path)

    rows = []
    for i, lt in enumerate(LESION_TYPES):
        se, fp = rep.lesion_operating_point.get(lt, (None, None))
        row = [lt, _fmt(se), _fmt(fp)]
        for ref in REFERENCE_LESION_LEVEL.values():
            row += [round(ref[i][0] / 100.0, 6), ref[i][1]]
        rows.append(row)
    header = ["lesion_type", "sensitivity", "fps_per_image"]
    for name in REFERENCE_LESION_LEVEL:
        header += [f"ref_sensitivity[{name}]", f"ref_fps_per_image[{name}]"]
    path = out / "table1_lesion_level.csv"
    _csv(path, header, rows)
    written.append(path)

    rows = []
    for i, lt in enumerate(LESION_TYPES):
        row = [lt, rep.image_counts.get(lt, 0)]
        row += [_fmt(rep.image_sensitivity[c].get(lt)) for c in criteria]
        row += [round(ref[i] / 100.0, 6) for ref in REFERENCE_IMAGE_LEVEL.values()]
        rows.append(row)
    header = ["lesion_type", "images"] + [f"sensitivity[{c}]" for c in criteria]
    header += [f"ref_sensitivity[{name}]" for name in REFERENCE_IMAGE_LEVEL]
    path = out / "table2_image_level.csv"
    _csv(path, header, rows)
    written.append(path)

    for lt, curve in rep.froc.items():
        path = out / f"froc_{lt}.csv"
        _csv(
            path,
            ["threshold", "fps_per_image", "sensitivity"],
            zip(curve.thresholds.tolist(), curve.fps_per_image.tolist(), curve.sensitivity.tolist()),
        )
        written.append(path)
    return written


def write_roc_csv(path, scores, labels) -> None:
    t, fpr, tpr = roc_curve(scores, labels)
    _csv(path, ["threshold", "fpr", "tpr"], zip(t.tolist(), fpr.tolist(), tpr.tolist()))
