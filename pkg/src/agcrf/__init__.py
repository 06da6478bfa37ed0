"""Attention-gated CRF fusion for multi-scale contour detection.

A self-contained float64 stack: tensor ops with reverse-mode autodiff,
gated mean-field inference over multi-scale features (reference and
unrolled forms), a two-level hierarchical contour network, deep-supervised
training, brute-force verification oracles, and an edge-detection
evaluation kit, all behind a scikit-learn style estimator and a CLI.
"""

from .tensor import (ConvKernel, ShapeError, Tape, Tensor, add, add_bias,
                     concat_channels, conv2d, deconv2d, maxpool, mul, relu,
                     sigmoid, smul, tanh, tsum)
from .crf import (FLAG, PLAG, PLAIN_CRF, VARIANTS, AgCrfParams, GateAssignment,
                  MeanFieldState, compare_variants, expected_pairwise_potential,
                  gate_expectation, run_reference_inference,
                  run_unrolled_inference, total_energy)
from .network import (ABLATIONS, ContourNet, ModelConfig, PredictionSet,
                      build_ablation, level1_fuse, level2_fuse,
                      three_way_decompose)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .training import (LossConfig, OptimState, TrainConfig, TrainingDiverged,
                       balanced_bce, deep_supervised_loss, sgd_step, train_loop)
from .evaluation import (DEFAULT_TOLERANCE, EvalResult, correspond, evaluate,
                         nms_thin)
from .datagen import (PgmError, Sample, SceneSpec, ShapeSpec, generate,
                      generate_dataset, load_pgm, random_scene, save_pgm,
                      save_png_gray)
from .estimator import ContourDetector
from .oracle import OracleReport, run_suites

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ConvKernel", "Tape", "ShapeError",
    "conv2d", "deconv2d", "maxpool", "sigmoid", "tanh", "relu",
    "mul", "add", "add_bias", "smul", "concat_channels", "tsum",
    "AgCrfParams", "MeanFieldState", "GateAssignment",
    "FLAG", "PLAG", "PLAIN_CRF", "VARIANTS",
    "run_reference_inference", "run_unrolled_inference",
    "expected_pairwise_potential", "gate_expectation", "total_energy",
    "compare_variants",
    "ModelConfig", "ContourNet", "PredictionSet", "ABLATIONS",
    "build_ablation", "three_way_decompose", "level1_fuse", "level2_fuse",
    "CheckpointError", "save_checkpoint", "load_checkpoint",
    "LossConfig", "OptimState", "TrainConfig", "TrainingDiverged",
    "balanced_bce", "deep_supervised_loss", "sgd_step", "train_loop",
    "EvalResult", "DEFAULT_TOLERANCE", "nms_thin", "correspond", "evaluate",
    "SceneSpec", "ShapeSpec", "Sample", "PgmError",
    "generate", "random_scene", "generate_dataset",
    "save_pgm", "load_pgm", "save_png_gray",
    "ContourDetector",
    "OracleReport", "run_suites",
    "__version__",
]
