"""End-to-end runs: classify, map, propose, score.

:func:`benchmark` is the desk-scale synthetic experiment: train the toy
network on generated discs and evaluate both levels on a held-out set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import cam, imaging, metrics, nn, proposals
from . import net as cn

__all__ = ["localize", "evaluate_dataset", "BenchmarkConfig", "BenchmarkResult", "benchmark", "BLOB_TYPES"]

BLOB_TYPES = ("Hemorrhage", "HardExudate", "SoftExudate")


def localize(net: cn.Network, tensor: np.ndarray, tau: float = proposals.DEFAULT_TAU,
             min_area: int = proposals.DEFAULT_MIN_AREA, class_index: int = cam.RDR):
    """Return ``(probability of class, heatmap, proposals)`` for one ``(C, H, W)`` tensor."""
    logits, fmaps = net.forward(tensor[None], "infer")
    prob = float(nn.softmax(logits)[0, class_index])
    raw = cam.compute_cam(fmaps[0], net.classifier_weights, class_index)
    h, w, _ = net.spec.input_size
    # float32 like the .cam.bin sidecar, so both proposal routes agree exactly
    heat = cam.Heatmap(cam.upsample_bilinear(raw, (h, w)).astype(np.float32), class_index)
    return prob, heat, proposals.propose(heat.values, tau, min_area)


def evaluate_dataset(net: cn.Network, tensors, labels, regions, ids=None, tau=proposals.DEFAULT_TAU,
                     min_area=proposals.DEFAULT_MIN_AREA) -> List[metrics.ImageResult]:
    ids = ids if ids is not None else [str(i) for i in range(len(tensors))]
    out = []
    for x, y, gts, ident in zip(tensors, labels, regions, ids):
        prob, _, props = localize(net, x, tau, min_area)
        out.append(metrics.ImageResult(ident, int(y), prob, props, list(gts)))
    return out


@dataclass(frozen=True)
class BenchmarkConfig:
    n_train: int = 2000
    n_test: int = 500
    size: int = 64
    train_seed: int = 11
    test_seed: int = 12
    init_seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    max_fps: float = 2.0


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    auc: float
    onepixel: dict  # type -> image-level sensitivity
    froc_at: dict  # type -> lesion sensitivity at <= max_fps FPs/image
    froc_pooled_blob: float
    report: metrics.EvalReport
    history: list = field(default_factory=list)
    results: list = field(default_factory=list)  # per test image ImageResult
    seconds: float = 0.0

    @property
    def onepixel_blob_mean(self) -> float:
        return float(np.mean([self.onepixel[t] for t in BLOB_TYPES]))


def _pooled_sensitivity(results, types: Sequence[str], max_fps: float) -> float:
    """FROC over the union of several lesion types, read at ``max_fps``.

    Regions of ``types`` are relabelled to the first of them so one curve
    covers them all; other regions stay, so hitting them is no false positive.
    """
    label = types[0]
    pooled = []
    for r in results:
        gts = [metrics.GroundTruthRegion(g.pixels, label, g.confidence) if g.lesion_type in types else g for g in r.gts]
        pooled.append((r.proposals, gts))
    return metrics.froc(pooled, label).sensitivity_at(max_fps)


def benchmark(config: BenchmarkConfig = BenchmarkConfig(), callback: Optional[Callable] = None) -> BenchmarkResult:
    t0 = time.perf_counter()
    train_ds = imaging.generate_synthetic(
        imaging.SynthConfig(n_images=config.n_train, size=config.size, id_prefix="tr"), config.train_seed)
    test_ds = imaging.generate_synthetic(
        imaging.SynthConfig(n_images=config.n_test, size=config.size, id_prefix="te"), config.test_seed)
    x, y = train_ds.arrays(config.size)
    net = cn.build(cn.toy_spec(config.size), seed=config.init_seed)
    tc = cn.TrainConfig(epochs=config.epochs, batch_size=config.batch_size, seed=config.init_seed,
                        optimizer=nn.OptimizerState(base_lr=config.lr))
    net, history = cn.train(net, (x, y), tc, callback=callback)

    prepared = [imaging.prepare_item(it, config.size) for it in test_ds.items]
    results = evaluate_dataset(
        net,
        [p.tensor for p, _ in prepared],
        test_ds.labels,
        [r for _, r in prepared],
        [it.image.id for it in test_ds.items],
    )
    rep = metrics.report(results)
    froc_at = {t: c.sensitivity_at(config.max_fps) for t, c in rep.froc.items()}
    return BenchmarkResult(
        config=config,
        auc=rep.classification["auc"],
        onepixel=dict(rep.image_sensitivity["onepixel"]),
        froc_at=froc_at,
        froc_pooled_blob=_pooled_sensitivity(results, BLOB_TYPES, config.max_fps),
        report=rep,
        history=history,
        results=results,
        seconds=time.perf_counter() - t0,
    )
