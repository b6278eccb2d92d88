"""Depthwise-separable CNN engine and experiment harness for multi-class chest X-ray classification."""
from .data import AugmentConfig, ClassLabel, DatasetManifest, FoldPlan, load_manifest, plan_folds, preprocess
from .estimator import LetterboxTransformer, MobileNetClassifier, StratifiedDealKFold
from .harness import Hyperparams, evaluate, run_cross_validation, train
from .metrics import ConfusionMatrix, CVReport, MetricsBundle, aggregate, collapse_binary, emit_report
from .model import ModelConfig, StrategyConfig, apply_strategy, build_model, count_parameters
from .tensor import Tape, Tensor, tensor_from
from .weights import load_weights, save_weights

__version__ = "0.1.0"
