"""
Synthetic fundus discs
======================

Generates a small dataset, shows one image per lesion type with its ground
truth, and walks an item through crop, resize and standardisation. Figures
go to ``$CAMLOC_OUT_DIR/notebooks`` (default ``camloc-out/notebooks``).
"""

# %%
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from camloc import imaging
from camloc.metrics import LESION_TYPES

out = Path(os.environ.get("CAMLOC_OUT_DIR", "camloc-out")) / "notebooks"
out.mkdir(parents=True, exist_ok=True)

# %% one image per lesion type, ground truth outlined in the second row
ds = imaging.generate_synthetic(imaging.SynthConfig(n_images=60), seed=0)
print(len(ds), "images,", int(ds.labels.sum()), "with lesions")

first = {}
for it in ds.items:
    if it.regions and it.regions[0].lesion_type not in first:
        first[it.regions[0].lesion_type] = it

fig, axes = plt.subplots(2, 4, figsize=(10, 5))
for col, lt in enumerate(LESION_TYPES):
    it = first[lt]
    mask = np.zeros(it.image.data.shape[:2], bool)
    for r in it.regions:
        mask[r.pixels[:, 0], r.pixels[:, 1]] = True
    axes[0, col].imshow(it.image.data[..., 0], cmap="gray", vmin=0, vmax=255)
    axes[0, col].set_title(f"{lt} ({len(it.regions)})")
    axes[1, col].imshow(it.image.data[..., 0], cmap="gray", vmin=0, vmax=255)
    axes[1, col].contour(mask, levels=[0.5], colors="r", linewidths=0.8)
for ax in axes.ravel():
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "synthetic_types.png", dpi=100)

# %% lesion size per type (pixels at 64x64)
for lt in LESION_TYPES:
    areas = [len(r.pixels) for it in ds.items for r in it.regions if r.lesion_type == lt]
    print(f"{lt:12s} n={len(areas):3d}  area median {np.median(areas):5.1f}  range {min(areas)}-{max(areas)}")

# %% preprocessing: the crop box, then a standardised tensor with mean 0 and std 1
pre, regions = imaging.prepare_item(first["Hemorrhage"], 64)
print("crop box", pre.crop_box, "source mean/std", round(pre.mean, 2), round(pre.std, 2))
print("tensor mean", float(pre.tensor.mean()), "std", float(pre.tensor.std()))

# %% augmentation: same seed, same result
x = pre.tensor
views = [imaging.augment(x, s) for s in range(4)]
fig, axes = plt.subplots(1, 5, figsize=(11, 2.4))
for ax, v, title in zip(axes, [x] + views, ["input"] + [f"seed {s}" for s in range(4)]):
    ax.imshow(v[0], cmap="gray")
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "augmentation.png", dpi=100)
assert np.array_equal(imaging.augment(x, 3), views[3])

# %% expert fusion: four noisy experts, keep pixels marked by at least three
noisy = imaging.generate_synthetic(imaging.SynthConfig(n_images=8, healthy_fraction=0.0, expert_noise=True), seed=1)
it = noisy.items[0]
lt, experts = next(iter(it.expert_masks.items()))
votes = np.sum(experts, axis=0)
print("vote counts present:", sorted(set(votes[votes > 0].tolist())))
fused = imaging.fuse_expert_masks(experts, lt)
print(len(fused), "fused regions, confidences", sorted({c for r in fused for c in r.confidence.tolist()}))
