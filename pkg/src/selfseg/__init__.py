"""Weakly supervised segmentation by iterative self-training.

Image-level labels train a classifier whose class activation maps, after
thresholding and dense CRF refinement, become pixel pseudo-labels for a
jointly trained encoder-decoder.  Everything runs on numpy in float64.
"""

from .camops import cams_to_mask, generate_pseudo_label, multiscale_cams
from .dataio import ShapesConfig, generate_shapes_dataset, load_dataset_dir
from .dcrf import CrfParams, mean_field_refine
from .metrics import classification_accuracy, mean_iou
from .model import DecoderConfig, EncoderConfig, build_model, forward
from .pipeline import TrainConfig, train
from .structures import CamStack, PseudoMask

__version__ = "0.1.0"

__all__ = [
    "CamStack",
    "CrfParams",
    "DecoderConfig",
    "EncoderConfig",
    "PseudoMask",
    "ShapesConfig",
    "TrainConfig",
    "build_model",
    "cams_to_mask",
    "classification_accuracy",
    "forward",
    "generate_pseudo_label",
    "generate_shapes_dataset",
    "load_dataset_dir",
    "mean_field_refine",
    "mean_iou",
    "multiscale_cams",
    "train",
]
