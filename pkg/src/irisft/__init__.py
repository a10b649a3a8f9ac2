"""Prompt-conditioned iris segmentation fine-tuning toolkit."""

__version__ = "0.1.0"

from .errors import IrisFtError
from .geometry import (BoundingBox, PerturbSpec, binarize, full_box,
                       mask_to_bbox, perturb_bbox, read_mask, write_mask)
from .losses import (FocalParams, PixelBatch, TripletSpec, ce_loss,
                     dice_loss, focal_loss, focal_weights, sigmoid,
                     triplet_loss)
from .model import (ResizeTransform, TinyRefNet, infer_box, load_checkpoint,
                    predict_mask, preprocess, resize_mask, save_checkpoint)
from .data import (DatasetManifest, LayoutSpec, SampleRecord, SynthSpec,
                   build_manifest, generate_synthetic, load_sample)
from .train import TrainConfig, TrainLog, compare_losses, sweep_gamma, train
from .evaluate import (BASELINES, EvalReport, cross_evaluate, emit_overlays,
                       evaluate, iou)

__all__ = [
    "__version__", "IrisFtError",
    "BoundingBox", "PerturbSpec", "binarize", "full_box", "mask_to_bbox",
    "perturb_bbox", "read_mask", "write_mask",
    "FocalParams", "PixelBatch", "TripletSpec", "ce_loss", "dice_loss",
    "focal_loss", "focal_weights", "sigmoid", "triplet_loss",
    "ResizeTransform", "TinyRefNet", "infer_box", "load_checkpoint",
    "predict_mask", "preprocess", "resize_mask", "save_checkpoint",
    "DatasetManifest", "LayoutSpec", "SampleRecord", "SynthSpec",
    "build_manifest", "generate_synthetic", "load_sample",
    "TrainConfig", "TrainLog", "compare_losses", "sweep_gamma", "train",
    "BASELINES", "EvalReport", "cross_evaluate", "emit_overlays",
    "evaluate", "iou",
]
