"""Lesion localisation with class activation maps, built on numpy.

Modules:

``nn``         layer kernels with hand-written backward passes, SGD
``net``        network spec, training loop, model file format
``cam``        class activation maps, upsampling, heatmap export
``proposals``  heatmap to scored connected regions
``metrics``    image-level and lesion-level evaluation, FROC, ROC/AUC
``imaging``    preprocessing, augmentation, expert fusion, synthetic data
``pipeline``   end-to-end localisation and the synthetic benchmark
``cli``        the ``camloc`` command
"""

from .cam import Heatmap, compute_cam, upsample_bilinear
from .metrics import EvalReport, FrocCurve, GroundTruthRegion, froc, report, roc_auc
from .net import Network, NetworkSpec, build, load, save, toy_spec, train
from .proposals import RegionProposal, propose

__version__ = "0.1.0"

__all__ = [
    "Heatmap",
    "compute_cam",
    "upsample_bilinear",
    "EvalReport",
    "FrocCurve",
    "GroundTruthRegion",
    "froc",
    "report",
    "roc_auc",
    "Network",
    "NetworkSpec",
    "build",
    "load",
    "save",
    "toy_spec",
    "train",
    "RegionProposal",
    "propose",
]
