"""Interpretable prototype classifier on a small receptive-field backbone.

Every prototype's evidence is a set of fixed-size input boxes, so explanations
are the exact regions the classifier pooled.
"""

from .backbone import BackboneConfig, Box, LayerSpec, RFGeometry, build_backbone, feature_to_input_box, preset_config
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import LabeledSample, SynthConfig, generate_synthetic_dataset, load_image_folder
from .estimator import ProtoBagNetClassifier
from .explain import ExplanationReport, global_explanation, local_explanation, percentile_bbox, render_overlay
from .evalx import localization_precision, occlusion_faithfulness, prototype_importance
from .losses import LossWeights
from .model import ProtoBagNet
from .prototypes import PrototypeBank, push_prototypes
from .trainer import TrainConfig, Trainer, evaluate_classification, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "Box",
    "Checkpoint",
    "ExperimentConfig",
    "ExplanationReport",
    "LabeledSample",
    "LayerSpec",
    "LossWeights",
    "ProtoBagNet",
    "ProtoBagNetClassifier",
    "PrototypeBank",
    "RFGeometry",
    "SynthConfig",
    "TrainConfig",
    "Trainer",
    "build_backbone",
    "evaluate_classification",
    "feature_to_input_box",
    "generate_synthetic_dataset",
    "global_explanation",
    "load_image_folder",
    "local_explanation",
    "localization_precision",
    "occlusion_faithfulness",
    "percentile_bbox",
    "preset_config",
    "prototype_importance",
    "push_prototypes",
    "render_overlay",
    "train",
]
