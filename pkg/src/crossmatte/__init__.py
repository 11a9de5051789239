"""Portrait matting with mixed-resolution cross-attention.

A from-scratch numpy stack: reverse-mode autodiff tensors, a convolutional
pyramid encoder, decoder blocks that cascade cross-attention over two
feature resolutions with self-attention, contour/semantic extraction
branches, a fusion head producing alpha mattes, plus the compositing data
pipeline, matting metrics, trainer, and CLI tooling around them.
"""

from .blocks import (
    BlockOutput,
    DecoderBlock,
    DecoderStack,
    EmbeddingPair,
    FeatureProjector,
    flatten_tokens,
    unflatten_tokens,
)
from .checkpoint import CheckpointData, load_checkpoint, restore_model, save_checkpoint
from .config import ABLATIONS, LEVEL_PAIRS, ModelConfig
from .data import (
    Batch,
    DatasetManifest,
    Sample,
    SyntheticDataset,
    build_manifest,
    composite,
    hflip,
    load_split,
    parse_manifest,
    synth_dataset,
    write_manifest,
)
from .encoder import ConvEncoder, FeaturePyramid, ResolutionError, select_levels
from .metrics import MetricsReport, conn_metric, evaluate, grad_metric, mad, mse
from .predictor import FusionStage, MatteHead, MattePrediction, MattingModel
from .tensor import (
    DomainError,
    GradCheckReport,
    ParamStore,
    ShapeError,
    Tensor,
    backward,
    grad_check,
    no_grad,
)
from .train import (
    AdamW,
    TrainConfig,
    bce_loss,
    evaluate_model,
    fit,
    lr_at,
    run_ablation_matrix,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "AdamW",
    "Batch",
    "BlockOutput",
    "CheckpointData",
    "ConvEncoder",
    "DatasetManifest",
    "DecoderBlock",
    "DecoderStack",
    "DomainError",
    "EmbeddingPair",
    "FeaturePyramid",
    "FeatureProjector",
    "FusionStage",
    "GradCheckReport",
    "LEVEL_PAIRS",
    "MatteHead",
    "MattePrediction",
    "MattingModel",
    "MetricsReport",
    "ModelConfig",
    "ParamStore",
    "ResolutionError",
    "Sample",
    "ShapeError",
    "SyntheticDataset",
    "Tensor",
    "TrainConfig",
    "backward",
    "bce_loss",
    "build_manifest",
    "composite",
    "conn_metric",
    "evaluate",
    "evaluate_model",
    "fit",
    "flatten_tokens",
    "grad_check",
    "grad_metric",
    "hflip",
    "load_checkpoint",
    "load_split",
    "lr_at",
    "mad",
    "mse",
    "no_grad",
    "parse_manifest",
    "restore_model",
    "run_ablation_matrix",
    "save_checkpoint",
    "select_levels",
    "synth_dataset",
    "train_step",
    "unflatten_tokens",
    "write_manifest",
]
