"""
Training a small CAM network and reading its maps
=================================================

Trains the toy network for a few epochs on image labels only, then draws
class activation maps, overlays and thresholded proposals for held-out
images. Takes about a minute on one core.
"""

# %%
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from camloc import cam, imaging, pipeline, proposals
from camloc import net as cn

out = Path(os.environ.get("CAMLOC_OUT_DIR", "camloc-out")) / "notebooks"
out.mkdir(parents=True, exist_ok=True)

# %% data and network
train = imaging.generate_synthetic(imaging.SynthConfig(n_images=400, id_prefix="tr"), seed=11)
test = imaging.generate_synthetic(imaging.SynthConfig(n_images=12, healthy_fraction=0.25, id_prefix="te"), seed=12)
x, y = train.arrays(64)
net = cn.build(cn.toy_spec(), seed=0)
print(net.spec.to_text())
print("feature maps", net.spec.feature_shape)

# %% training: the log follows lr = 0.01 * 0.99**epoch
net, history = cn.train(net, (x, y), cn.TrainConfig(epochs=8, batch_size=32, seed=0))
for h in history:
    print(f"epoch {h.epoch}  lr {h.lr:.5f}  loss {h.loss:.4f}  acc {h.accuracy:.3f}")

# %% the class score is the mean of the map plus the bias
pre, regions = imaging.prepare_item(test.items[0], 64)
logits, fmaps = net.forward(pre.tensor[None])
raw = cam.compute_cam(fmaps[0], net.classifier_weights, cam.RDR)
print("logit", float(logits[0, 1]), "from map", cam.class_score_from_cam(raw, net.classifier_bias[1]))

# %% maps, overlays and proposals for the held-out images
fig, axes = plt.subplots(3, 6, figsize=(13, 6.6))
for col, it in enumerate(test.items[:6]):
    pre, regions = imaging.prepare_item(it, 64)
    prob, heat, props = pipeline.localize(net, pre.tensor)
    gt = np.zeros((64, 64), bool)
    for r in regions:
        gt[r.pixels[:, 0], r.pixels[:, 1]] = True
    axes[0, col].imshow(pre.tensor[0], cmap="gray")
    axes[0, col].contour(gt, levels=[0.5], colors="r", linewidths=0.7)
    axes[0, col].set_title(f"p(RDR)={prob:.2f}")
    axes[1, col].imshow(cam.overlay(pre.tensor, heat))
    axes[2, col].imshow(proposals.proposals_mask(props, (64, 64)), cmap="gray")
    axes[2, col].contour(gt, levels=[0.5], colors="r", linewidths=0.7)
    axes[2, col].set_title(f"{len(props)} proposals")
for ax in axes.ravel():
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "cam_overlays.png", dpi=100)

# %% the threshold trades area for precision; higher tau keeps a subset
heat = pipeline.localize(net, imaging.prepare_item(test.items[1], 64)[0].tensor)[1]
for tau in (0.5, 0.65, 0.8, 0.95):
    props = proposals.propose(heat.values, tau)
    print(f"tau {tau:.2f}: {len(props)} regions, {sum(p.area for p in props)} pixels")

cn.save(net, out / "toy_model.bin")
