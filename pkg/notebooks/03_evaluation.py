"""
Evaluating localisation at image and lesion level
=================================================

Runs the synthetic benchmark (set ``CAMLOC_FULL=1`` for the full 2000/500
image, 30 epoch configuration; the default is a quick reduced run), prints
the report next to the published reference rows, and plots FROC and ROC
curves.
"""

# %%
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from camloc import metrics, pipeline

out = Path(os.environ.get("CAMLOC_OUT_DIR", "camloc-out")) / "notebooks"
out.mkdir(parents=True, exist_ok=True)

full = os.environ.get("CAMLOC_FULL") == "1"
cfg = pipeline.BenchmarkConfig() if full else pipeline.BenchmarkConfig(n_train=400, n_test=120, epochs=8)
print(cfg)

# %% run
res = pipeline.benchmark(cfg)
print(f"{res.seconds:.0f} s, AUC {res.auc:.4f}")

# %% image level: both criteria per lesion type
rep = res.report
for lt in metrics.LESION_TYPES:
    vals = [rep.image_sensitivity[c][lt] for c in metrics.CRITERIA]
    print(f"{lt:12s} images {rep.image_counts[lt]:3d}  " + "  ".join(
        f"{c} {'-' if v is None else f'{v:.3f}'}" for c, v in zip(metrics.CRITERIA, vals)))
print("reference rows (percent):")
for name, row in metrics.REFERENCE_IMAGE_LEVEL.items():
    print(f"  {name}: {row}")

# %% lesion level: sensitivity at 2 FPs per image, and the full curves
for lt, v in res.froc_at.items():
    print(f"{lt:12s} FROC sensitivity at <= {cfg.max_fps} FPs/image: {v:.3f}")
print("pooled blob types:", round(res.froc_pooled_blob, 3))

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
for lt, curve in rep.froc.items():
    ax1.step(curve.fps_per_image, curve.sensitivity, where="post", label=metrics.SHORT_NAMES[lt])
ax1.axvline(cfg.max_fps, color="k", lw=0.6, ls="--")
ax1.set_xlabel("false positives per image")
ax1.set_ylabel("sensitivity")
ax1.set_xlim(0, 8)
ax1.legend()

# %% classification ROC
scores = [r.score for r in res.results]
labels = [r.label for r in res.results]
_, fpr, tpr = metrics.roc_curve(scores, labels)
ax2.plot(fpr, tpr)
ax2.plot([0, 1], [0, 1], color="k", lw=0.6, ls="--")
ax2.set_xlabel("1 - specificity")
ax2.set_ylabel("sensitivity")
ax2.set_title(f"AUC {res.auc:.3f}")
fig.tight_layout()
fig.savefig(out / "froc_roc.png", dpi=100)

# %% where the false positives come from
# min-max normalisation gives every map a maximum of 1, so healthy images
# always carry at least one proposal above any threshold
for label, name in ((0, "healthy"), (1, "diseased")):
    counts = [len(r.proposals) for r in res.results if r.label == label]
    print(f"{name:9s} images: proposals per image mean {np.mean(counts):.2f}, min {min(counts)}")

# %% write the report files the eval subcommand produces
metrics.write_report(rep, out / "report")
metrics.write_roc_csv(out / "report" / "roc.csv", scores, labels)
print(sorted(p.name for p in (out / "report").iterdir()))
