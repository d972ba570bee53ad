"""Promptable image segmentation with a linear-time bidirectional RWKV
backbone, built on a small numpy autodiff core."""

from .backbone import BackboneConfig, Backbone, FeaturePyramid, backbone_forward, build_backbone, param_count
from .head import Prompt, SegmentationModel, mask_record
from .metrics import boundary_iou, iou
from .scenes import SyntheticScene, gen_scene
from .training import TrainConfig, distill_loss, distill_session, fit, seg_loss, train_step
from .wkv import WkvParams, bi_wkv, bi_wkv_reference, bi_wkv_scan

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "FeaturePyramid", "Prompt", "SegmentationModel",
    "SyntheticScene", "TrainConfig", "WkvParams", "backbone_forward", "bi_wkv",
    "bi_wkv_reference", "bi_wkv_scan", "boundary_iou", "build_backbone", "distill_loss",
    "distill_session", "fit", "gen_scene", "iou", "mask_record", "param_count",
    "seg_loss", "train_step",
]
