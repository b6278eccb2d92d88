"""Optimizers, the training loop, evaluation and k-fold cross-validation."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import AugmentConfig, BatchLoader, DatasetManifest, FoldPlan, ImageSet, load_image_set, plan_folds
from .data import CONTRAST_THRESHOLD
from .errors import ConfigError, EmptyDataset, NonFiniteLoss, NonFiniteResult, ShapeMismatch
from .layers import softmax_cross_entropy
from .metrics import ConfusionMatrix, CVReport, FoldResult, MetricsBundle
from .model import Model, ModelConfig, StrategyConfig, apply_strategy, build_model, MOBILENET_V2_BLOCKS
from .tensor import Tape, Tensor
from .weights import save_weights

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Hyperparams:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


def optimizer_step(params: dict, grads: dict, state: dict, h: Hyperparams):
    """One update of every parameter that has a gradient in ``grads``.

    ``params`` and ``grads`` map names to arrays; ``state`` carries Adam
    moments between calls. Returns ``(params, state)``; arrays are replaced,
    never mutated, so callers can keep snapshots.
    """
    lr = h.learning_rate
    if h.optimizer == "adam":
        t = state.get("t", 0) + 1
        state["t"] = t
        m_all = state.setdefault("m", {})
        v_all = state.setdefault("v", {})
        c1 = 1 - ADAM_BETA1**t
        c2 = 1 - ADAM_BETA2**t
    out = dict(params)
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if h.optimizer == "sgd":
            out[name] = (p - lr * g).astype(p.dtype)
        else:
            m = ADAM_BETA1 * m_all.get(name, 0.0) + (1 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v_all.get(name, 0.0) + (1 - ADAM_BETA2) * (g * g)
            m_all[name], v_all[name] = m, v
            out[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)
    return out, state


class Optimizer:
    """Applies :func:`optimizer_step` to a model's trainable parameters."""

    def __init__(self, h: Hyperparams):
        self.h = h
        self.state: dict = {}

    def step(self, model: Model):
        grads = {n: t.grad for n, t in model.params.items() if t.requires_grad and t.grad is not None}
        if not grads:
            return
        current = {n: model.params[n].data for n in grads}
        updated, self.state = optimizer_step(current, grads, self.state, self.h)
        for n in grads:
            model.params[n].data = updated[n]


@dataclass
class TrainResult:
    model: Model
    losses: list
    best_epoch: int = 0


def _as_image_set(data) -> ImageSet:
    if isinstance(data, ImageSet):
        return data
    images, labels = data
    return ImageSet(np.asarray(images, dtype=np.float32), np.asarray(labels, dtype=np.int64))


def train(
    model: Model,
    data: Union[ImageSet, tuple],
    h: Hyperparams,
    augment_cfg: Optional[AugmentConfig] = None,
    checkpoint_path=None,
) -> TrainResult:
    """Mini-batch training with online augmentation; returns per-epoch mean losses.

    The learning strategy must already be applied: only parameters with
    ``requires_grad`` are updated. ``h.seed`` fixes shuffling, augmentation
    and dropout masks.
    """
    data = _as_image_set(data)
    if len(data) == 0:
        raise EmptyDataset("training set is empty")
    loader_seq, dropout_seq = np.random.SeedSequence(h.seed).spawn(2)
    loader = BatchLoader(
        data.images,
        data.labels,
        h.batch_size,
        model.config.input_channels,
        mode="train",
        augment_cfg=augment_cfg or AugmentConfig(),
        rng=np.random.default_rng(loader_seq),
    )
    dropout_rng = np.random.default_rng(dropout_seq)
    opt = Optimizer(h)
    model.train()
    model.zero_grad()
    losses = []
    best, best_state, best_epoch = np.inf, None, 0
    for epoch in range(h.epochs):
        total, seen = 0.0, 0
        for step, (xb, yb) in enumerate(loader):
            try:
                with Tape():
                    logits = model.forward(Tensor(xb), rng=dropout_rng)
                    loss, _ = softmax_cross_entropy(logits, yb)
            except NonFiniteResult as exc:
                raise NonFiniteLoss(f"non-finite values in epoch {epoch} batch {step}: {exc}") from None
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(f"loss is {value} in epoch {epoch} batch {step}")
            if loss.tape is not None:
                loss.backward()
                opt.step(model)
                model.zero_grad()
            total += value * len(yb)
            seen += len(yb)
        losses.append(total / seen)
        logger.debug("epoch %d loss %.5f", epoch, losses[-1])
        if checkpoint_path is not None and losses[-1] < best:
            best, best_epoch = losses[-1], epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
    if checkpoint_path is not None and best_state is not None:
        save_weights(best_state, checkpoint_path)
    return TrainResult(model, losses, best_epoch)


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    if images.shape[1] != model.config.input_channels:
        images = np.repeat(images, model.config.input_channels, axis=1)
    return np.argmax(model.predict_proba(images, batch_size), axis=1)


def evaluate(model: Model, data: Union[ImageSet, tuple], batch_size: int = 64) -> ConfusionMatrix:
    """Eval-mode confusion matrix ``[predicted][actual]``; never augments."""
    data = _as_image_set(data)
    if len(data) == 0:
        raise EmptyDataset("test set is empty")
    model.eval()
    loader = BatchLoader(data.images, data.labels, batch_size, model.config.input_channels, mode="eval")
    preds = []
    for xb, _ in loader:
        preds.append(np.argmax(model.predict_proba(xb, batch_size), axis=1))
    assert loader.augmentations == 0
    return ConfusionMatrix.from_predictions(np.concatenate(preds), data.labels, model.config.num_classes)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(fold)]).generate_state(1)[0])


def _config_echo(config, strategy, h, k, augment_cfg, data: ImageSet):
    cfg = asdict(config)
    cfg["block_specs"] = [list(asdict(b).values()) for b in config.block_specs]
    cfg["input_size"] = list(config.input_size)
    return {
        "strategy": str(strategy),
        "k": k,
        "seed": h.seed,
        "optimizer": h.optimizer,
        "learning_rate": h.learning_rate,
        "batch_size": h.batch_size,
        "epochs": h.epochs,
        "model": cfg,
        "augment": asdict(augment_cfg),
        "dataset_size": len(data),
        "excluded": list(data.excluded),
    }


def run_cross_validation(
    data: Union[ImageSet, DatasetManifest],
    config: ModelConfig,
    strategy: StrategyConfig,
    h: Hyperparams,
    k: int = 10,
    augment_cfg: Optional[AugmentConfig] = None,
    checkpoint_dir=None,
    parallel_folds: int = 1,
    plan: Optional[FoldPlan] = None,
) -> CVReport:
    """Stratified k-fold protocol: every fold is the held-out test set once.

    Each fold trains a fresh model seeded from ``(h.seed, fold)``; folds are
    independent and may run in parallel without changing the result.
    """
    if isinstance(data, DatasetManifest):
        data = load_image_set(data, config.input_size)
    augment_cfg = augment_cfg or AugmentConfig()
    plan = plan or plan_folds(data.labels, k, h.seed)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    def run_fold(f: int) -> FoldResult:
        start = time.perf_counter()
        train_idx, test_idx = plan.train_indices(f), plan.test_indices(f)
        assert not np.intersect1d(train_idx, test_idx).size
        s = fold_seed(h.seed, f)
        model = apply_strategy(build_model(config, s), strategy)
        ckpt = None if checkpoint_dir is None else Path(checkpoint_dir) / f"fold{f}.snwt"
        train(model, data.subset(train_idx), replace(h, seed=s), augment_cfg, ckpt)
        cm = evaluate(model, data.subset(test_idx))
        logger.info("fold %d/%d accuracy %.4f", f + 1, plan.k, cm.correct / cm.total)
        return FoldResult(f, cm, MetricsBundle.from_matrix(cm), time.perf_counter() - start)

    if parallel_folds > 1:
        with ThreadPoolExecutor(parallel_folds) as pool:
            folds = list(pool.map(run_fold, range(plan.k)))
    else:
        folds = [run_fold(f) for f in range(plan.k)]
    return CVReport(folds, _config_echo(config, strategy, h, plan.k, augment_cfg, data))


# experiment config files


@dataclass
class ExperimentConfig:
    manifest: Optional[Path] = None
    strategy: StrategyConfig = field(default_factory=StrategyConfig.scratch)
    k: int = 10
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_dir: Optional[Path] = None
    contrast_threshold: Optional[float] = CONTRAST_THRESHOLD


def _parse_size(v: str):
    parts = [p for p in v.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts *= 2
    return tuple(int(p) for p in parts)


def _parse_blocks(v: str):
    if v.strip().lower() in ("mobilenet_v2", "default"):
        return MOBILENET_V2_BLOCKS
    return tuple(tuple(int(x) for x in spec.split(",")) for spec in v.split(";") if spec.strip())


def _parse_bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


_MODEL_KEYS = {
    "input_size": _parse_size,
    "input_channels": int,
    "blocks": _parse_blocks,
    "head_units": int,
    "dropout_rate": float,
    "num_classes": int,
    "width_multiplier": float,
    "stem_channels": int,
    "last_channels": int,
}
_HYPER_KEYS = {"optimizer": str, "learning_rate": float, "batch_size": int, "epochs": int, "seed": int}
_AUGMENT_KEYS = {
    "enabled": _parse_bool,
    "max_rotation_degrees": float,
    "max_shift_pixels": int,
}
_TOP_KEYS = {"manifest", "strategy", "weights", "k", "checkpoint_dir", "contrast_threshold"}


def parse_experiment_config(text: str, path=None, base_dir=None) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` comments) into an :class:`ExperimentConfig`.

    Relative ``manifest``, ``weights`` and ``checkpoint_dir`` paths resolve
    against ``base_dir``.
    """
    base = Path(base_dir) if base_dir is not None else Path(".")
    top, model, hyper, aug = {}, {}, {}, {}
    lines = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, n)
        key, value = (s.strip() for s in line.split("=", 1))
        lines[key] = n
        try:
            if key.startswith("model."):
                sub = key[len("model.") :]
                if sub not in _MODEL_KEYS:
                    raise ConfigError(f"unknown key {key!r}", path, n)
                model["block_specs" if sub == "blocks" else sub] = _MODEL_KEYS[sub](value)
            elif key.startswith("augment."):
                sub = key[len("augment.") :]
                if sub not in _AUGMENT_KEYS:
                    raise ConfigError(f"unknown key {key!r}", path, n)
                aug[sub] = _AUGMENT_KEYS[sub](value)
            elif key in _HYPER_KEYS:
                hyper[key] = _HYPER_KEYS[key](value)
            elif key in _TOP_KEYS:
                top[key] = value
            else:
                raise ConfigError(f"unknown key {key!r}", path, n)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", path, n) from None

    def build(key, fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), path, lines.get(key)) from None

    cfg = ExperimentConfig()
    if "manifest" in top:
        cfg.manifest = base / top["manifest"]
    weights = str(base / top["weights"]) if "weights" in top else None
    cfg.strategy = build("strategy", lambda: StrategyConfig.parse(top.get("strategy", "scratch"), weights))
    if "k" in top:
        cfg.k = build("k", lambda: int(top["k"]))
    if "checkpoint_dir" in top:
        cfg.checkpoint_dir = base / top["checkpoint_dir"]
    if "contrast_threshold" in top:
        v = top["contrast_threshold"]
        cfg.contrast_threshold = None if v.lower() == "none" else build("contrast_threshold", lambda: float(v))
    cfg.hyperparams = build(next(iter(hyper), "seed"), lambda: Hyperparams(**hyper))
    cfg.model = build(next(iter(model), "model.input_size"), lambda: ModelConfig(**model))
    cfg.augment = build(next(iter(aug), "augment.enabled"), lambda: AugmentConfig(**aug))
    return cfg


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_experiment_config(path.read_text(encoding="utf-8"), path, path.parent)
