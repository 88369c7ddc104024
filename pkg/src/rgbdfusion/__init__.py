"""Toy asymmetric RGB-D segmentation with attention-based multi-modal fusion."""

from .tensor import Tensor
from .fusion import FusionBlock, FusionBlockConfig, VARIANTS
from .network import ModelConfig, SegmentationModel, model_forward, multi_scale_infer
from .data import Sample, SceneSpec, AugmentPolicy, generate_sample, augment_sample
from .train import AdamW, MetricAccumulator, cross_entropy, poly_lr, train_loop

__version__ = "0.1.0"
