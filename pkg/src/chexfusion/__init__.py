"""Multimodal chest X-ray classifier: a DenseNet backbone whose pooled
features are fused with patient metadata through a skip-connected head."""

from .backbone import BackboneConfig, build_backbone, extract_features
from .data import PATHOLOGIES, encode_labels, encode_metadata, load_image, parse_manifest, split_dataset
from .evaluation import BASELINE_TABLE, auroc, compare_baseline, evaluate_model, render_report
from .head import FusionModel, HeadConfig, HeadParams, baseline_forward, build_model, fuse_forward, head_init
from .kernels import BACKEND
from .training import TrainConfig, fit

__version__ = "0.1.0"
