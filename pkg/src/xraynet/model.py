"""MobileNet-v2-style backbone with the dense classification head.

Architecture::

    stem 3x3/2 conv -> BN -> relu6
    inverted-residual blocks (expand 1x1 -> depthwise 3x3 -> project 1x1)
    final 1x1 conv -> BN -> relu6
    GAP -> dense(head_units) -> BN -> relu6 -> dropout -> dense(num_classes)

Every parameter carries a block index: 0 for the stem, 1..n for the
inverted-residual blocks, n+1 for the final conv and ``HEAD`` (-1) for the
classifier. Learning strategies freeze parameters by block index.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from .errors import InvalidConfig, InvalidK, MissingWeights, WeightShapeMismatch
from .tensor import Tensor, relu6, add
from .weights import load_weights

HEAD = -1


@dataclass(frozen=True)
class BlockSpec:
    """One stage of inverted-residual blocks: expansion t, channels c, repeats n, stride s."""

    expansion_factor: int
    out_channels: int
    repeats: int
    first_stride: int = 1

    def __post_init__(self):
        if min(self.expansion_factor, self.out_channels, self.repeats) < 1:
            raise InvalidConfig(f"block spec values must be positive: {self}")
        if self.first_stride not in (1, 2):
            raise InvalidConfig(f"block stride must be 1 or 2, got {self.first_stride}")


MOBILENET_V2_BLOCKS = (
    BlockSpec(1, 16, 1, 1),
    BlockSpec(6, 24, 2, 2),
    BlockSpec(6, 32, 3, 2),
    BlockSpec(6, 64, 4, 2),
    BlockSpec(6, 96, 3, 1),
    BlockSpec(6, 160, 3, 2),
    BlockSpec(6, 320, 1, 1),
)


def make_divisible(value: float, divisor: int = 8) -> int:
    new = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if new < 0.9 * value:
        new += divisor
    return new


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (200, 200)
    input_channels: int = 3
    block_specs: tuple = MOBILENET_V2_BLOCKS
    head_units: int = 2500
    dropout_rate: float = 0.5
    num_classes: int = 7
    width_multiplier: float = 1.0
    stem_channels: int = 32
    last_channels: int = 1280

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        specs = tuple(s if isinstance(s, BlockSpec) else BlockSpec(*s) for s in self.block_specs)
        object.__setattr__(self, "block_specs", specs)
        self.validate()

    def validate(self):
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise InvalidConfig(f"input_size must be two positive ints, got {self.input_size}")
        if self.input_channels < 1:
            raise InvalidConfig("input_channels must be >= 1")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.head_units < 1:
            raise InvalidConfig("head_units must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidConfig("dropout_rate must lie in [0, 1)")
        if self.width_multiplier <= 0:
            raise InvalidConfig("width_multiplier must be positive")
        if not self.block_specs:
            raise InvalidConfig("at least one block spec is required")
        if self.stem_channels < 1 or self.last_channels < 1:
            raise InvalidConfig("stem_channels and last_channels must be positive")

    @property
    def num_blocks(self) -> int:
        return sum(s.repeats for s in self.block_specs)

    def layout(self) -> list["BlockLayout"]:
        """Resolve block specs into one entry per inverted-residual block."""
        w = self.width_multiplier
        cin = make_divisible(self.stem_channels * w)
        h = L.conv_output_size(self.input_size[0], 3, 2, 1)
        wd = L.conv_output_size(self.input_size[1], 3, 2, 1)
        out = []
        for spec in self.block_specs:
            cout = make_divisible(spec.out_channels * w)
            for r in range(spec.repeats):
                stride = spec.first_stride if r == 0 else 1
                h = L.conv_output_size(h, 3, stride, 1)
                wd = L.conv_output_size(wd, 3, stride, 1)
                if h < 1 or wd < 1:
                    raise InvalidConfig("spatial size collapses below 1x1")
                out.append(BlockLayout(len(out) + 1, cin, cin * spec.expansion_factor, cout, stride,
                                       spec.expansion_factor != 1))
                cin = cout
        return out

    @property
    def stem_width(self) -> int:
        return make_divisible(self.stem_channels * self.width_multiplier)

    @property
    def last_width(self) -> int:
        return make_divisible(self.last_channels * max(1.0, self.width_multiplier))


@dataclass(frozen=True)
class BlockLayout:
    index: int
    in_channels: int
    hidden_channels: int
    out_channels: int
    stride: int
    expand: bool

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass(frozen=True)
class StrategyConfig:
    """Scratch, off-the-shelf features, or fine-tuning of the top ``k`` blocks."""

    variant: str = "scratch"
    k: Optional[int] = None
    pretrained_weights_path: Optional[str] = None

    VARIANTS = ("scratch", "offtheshelf", "finetune")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise InvalidConfig(f"unknown strategy {self.variant!r}")
        if self.variant == "finetune":
            if self.k is None or int(self.k) < 1:
                raise InvalidK(f"fine-tuning needs a positive block count, got {self.k}")
        elif self.k is not None:
            raise InvalidConfig(f"{self.variant} takes no block count")
        if self.variant == "scratch" and self.pretrained_weights_path is not None:
            raise InvalidConfig("training from scratch must not load pretrained weights")

    @classmethod
    def scratch(cls):
        return cls("scratch")

    @classmethod
    def off_the_shelf(cls, weights_path=None):
        return cls("offtheshelf", None, None if weights_path is None else str(weights_path))

    @classmethod
    def fine_tune(cls, k: int, weights_path=None):
        return cls("finetune", int(k), None if weights_path is None else str(weights_path))

    @classmethod
    def parse(cls, text: str, weights_path=None) -> "StrategyConfig":
        """Parse ``scratch``, ``offtheshelf`` or ``finetune:K``."""
        text = text.strip().lower()
        if text == "scratch":
            return cls("scratch", None, None if weights_path is None else str(weights_path))
        if text in ("offtheshelf", "off-the-shelf"):
            return cls.off_the_shelf(weights_path)
        if text.startswith("finetune:"):
            try:
                k = int(text.split(":", 1)[1])
            except ValueError:
                raise InvalidConfig(f"bad fine-tuning block count in {text!r}") from None
            return cls.fine_tune(k, weights_path)
        raise InvalidConfig(f"unknown strategy {text!r}; expected scratch, offtheshelf or finetune:K")

    def __str__(self):
        return f"finetune:{self.k}" if self.variant == "finetune" else self.variant


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Model:
    """Instantiated network: named parameters, batch-norm buffers, block indices.

    A parameter is trainable exactly when its tensor has ``requires_grad``.
    """

    def __init__(self, config: ModelConfig, seed=None):
        self.config = config
        self.layout = config.layout()
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.block_of: dict[str, int] = {}
        self.training = True
        self.rng = np.random.default_rng(seed)
        self._declare()
        self.reset_parameters(self.rng)

    # construction

    def _add(self, name, shape, block, fan_in=None):
        if name in self.params:
            raise InvalidConfig(f"duplicate parameter name {name}")
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)
        self.block_of[name] = block
        self._fan_in[name] = fan_in

    def _add_bn(self, prefix, channels, block):
        self._add(f"{prefix}.gamma", (channels,), block)
        self._add(f"{prefix}.beta", (channels,), block)
        self.buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers[f"{prefix}.running_var"] = np.ones(channels, dtype=np.float32)

    def _declare(self):
        cfg = self.config
        self._fan_in: dict[str, Optional[int]] = {}
        stem = cfg.stem_width
        self._add("stem.conv.weight", (stem, cfg.input_channels, 3, 3), 0, cfg.input_channels * 9)
        self._add_bn("stem.bn", stem, 0)
        for b in self.layout:
            p = f"blocks.{b.index}"
            if b.expand:
                self._add(f"{p}.expand.weight", (b.hidden_channels, b.in_channels, 1, 1), b.index, b.in_channels)
                self._add_bn(f"{p}.expand_bn", b.hidden_channels, b.index)
            self._add(f"{p}.depthwise.weight", (b.hidden_channels, 1, 3, 3), b.index, 9)
            self._add_bn(f"{p}.depthwise_bn", b.hidden_channels, b.index)
            self._add(f"{p}.project.weight", (b.out_channels, b.hidden_channels, 1, 1), b.index, b.hidden_channels)
            self._add_bn(f"{p}.project_bn", b.out_channels, b.index)
        final = self.num_blocks + 1
        cin = self.layout[-1].out_channels
        self._add("final.conv.weight", (cfg.last_width, cin, 1, 1), final, cin)
        self._add_bn("final.bn", cfg.last_width, final)
        self._add("head.dense.weight", (cfg.last_width, cfg.head_units), HEAD, cfg.last_width)
        self._add("head.dense.bias", (cfg.head_units,), HEAD)
        self._add_bn("head.bn", cfg.head_units, HEAD)
        self._add("head.out.weight", (cfg.head_units, cfg.num_classes), HEAD, cfg.head_units)
        self._add("head.out.bias", (cfg.num_classes,), HEAD)

    def reset_parameters(self, rng: np.random.Generator, names=None):
        """He-uniform weights, zero biases/beta, unit gamma, fresh running statistics."""
        for name in names or self.params:
            t = self.params[name]
            fan_in = self._fan_in[name]
            if fan_in is not None:
                t.data = he_uniform(rng, t.shape, fan_in)
            elif name.endswith(".gamma"):
                t.data = np.ones(t.shape, dtype=np.float32)
            else:
                t.data = np.zeros(t.shape, dtype=np.float32)
            t.grad = None
        for name in self.buffers:
            if names is None or name.rsplit(".", 1)[0] + ".gamma" in names:
                fill = np.ones if name.endswith("running_var") else np.zeros
                self.buffers[name] = fill(self.buffers[name].shape, dtype=np.float32)

    # introspection

    @property
    def num_blocks(self) -> int:
        return len(self.layout)

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def train(self, flag: bool = True) -> "Model":
        self.training = flag
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def trainable(self, name: str) -> bool:
        return self.params[name].requires_grad

    def set_trainable(self, name: str, flag: bool):
        self.params[name].requires_grad = bool(flag)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.params.items() if t.requires_grad]

    def block_parameters(self, block: int) -> list[str]:
        return [n for n, b in self.block_of.items() if b == block]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: t.data for n, t in self.params.items()}
        state.update(self.buffers)
        return state

    def backbone_state_names(self) -> list[str]:
        names = [n for n, b in self.block_of.items() if b != HEAD]
        names += [n for n in self.buffers if not n.startswith("head.")]
        return names

    def load_state(self, state: dict, names=None):
        for name in names or state:
            arr = np.asarray(state[name], dtype=np.float32)
            if name in self.params:
                self.params[name].data = arr.copy()
            else:
                self.buffers[name] = arr.copy()

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    # forward

    def _bn(self, x, prefix):
        gamma = self.params[f"{prefix}.gamma"]
        # frozen batch-norm layers run on their running statistics
        training = self.training and gamma.requires_grad
        return L.batch_norm(
            x,
            gamma,
            self.params[f"{prefix}.beta"],
            self.buffers[f"{prefix}.running_mean"],
            self.buffers[f"{prefix}.running_var"],
            training,
        )

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Return class logits for an [N, C, H, W] batch."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        p = self.params
        h = relu6(self._bn(L.conv2d(x, p["stem.conv.weight"], stride=2, padding=1), "stem.bn"))
        for b in self.layout:
            pre = f"blocks.{b.index}"
            y = h
            if b.expand:
                y = relu6(self._bn(L.conv2d(y, p[f"{pre}.expand.weight"]), f"{pre}.expand_bn"))
            y = L.depthwise_conv2d(y, p[f"{pre}.depthwise.weight"], stride=b.stride, padding=1)
            y = relu6(self._bn(y, f"{pre}.depthwise_bn"))
            y = self._bn(L.conv2d(y, p[f"{pre}.project.weight"]), f"{pre}.project_bn")
            h = add(h, y) if b.residual else y
        h = relu6(self._bn(L.conv2d(h, p["final.conv.weight"]), "final.bn"))
        h = L.global_average_pool(h)
        h = L.dense(h, p["head.dense.weight"], p["head.dense.bias"])
        h = relu6(self._bn(h, "head.bn"))
        h = L.dropout(h, self.config.dropout_rate, self.training, rng if rng is not None else self.rng)
        return L.dense(h, p["head.out.weight"], p["head.out.bias"])

    __call__ = forward

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Softmax outputs in eval mode; does not change the model's mode."""
        was = self.training
        self.training = False
        try:
            out = []
            for i in range(0, len(images), batch_size):
                logits = self.forward(Tensor(images[i : i + batch_size]))
                out.append(L.softmax(logits.data))
            return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes), np.float32)
        finally:
            self.training = was

    def __repr__(self):
        return (
            f"Model(blocks={self.num_blocks}, params={count_parameters(self)}, "
            f"trainable={count_parameters(self, trainable_only=True)}, mode={self.mode})"
        )


def build_model(config: ModelConfig = None, rng=None) -> Model:
    """Instantiate a fully trainable model; ``rng`` is a seed or ``np.random.Generator``."""
    config = config or ModelConfig()
    if isinstance(rng, np.random.Generator):
        model = Model(config, seed=None)
        model.rng = rng
        model.reset_parameters(rng)
        return model
    return Model(config, seed=rng)


def count_parameters(model: Model, trainable_only: bool = False) -> int:
    return sum(t.size for t in model.params.values() if t.requires_grad or not trainable_only)


def _check_pretrained(model: Model, weights: dict) -> list[str]:
    expected = {n: a.shape for n, a in model.state_dict().items()}
    required = model.backbone_state_names()
    problems = []
    for name in required:
        if name not in weights:
            problems.append(f"missing tensor {name!r}")
        elif weights[name].shape != expected[name]:
            problems.append(f"{name!r} has shape {weights[name].shape}, model expects {expected[name]}")
    for name, arr in weights.items():
        if name not in expected:
            problems.append(f"unexpected tensor {name!r}")
        elif name.startswith("head.") and arr.shape != expected[name]:
            problems.append(f"{name!r} has shape {arr.shape}, model expects {expected[name]}")
    if problems:
        raise WeightShapeMismatch("pretrained weights do not fit the model: " + "; ".join(problems[:5]))
    return required


def apply_strategy(model: Model, strategy: StrategyConfig, rng=None) -> Model:
    """Load weights and set per-parameter trainability for a learning strategy.

    * scratch: everything trainable; re-initialized when ``rng`` is given.
    * offtheshelf: pretrained backbone frozen, head trainable.
    * finetune:k: the top ``k`` inverted-residual blocks, the final conv and
      the head trainable; stem and deeper blocks frozen.

    Only backbone tensors are taken from the weights file; the classifier head
    keeps its fresh initialization.
    """
    n = model.num_blocks
    if strategy.variant == "scratch":
        if rng is not None:
            model.reset_parameters(np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng)
        for name in model.params:
            model.set_trainable(name, True)
        return model

    if strategy.variant == "finetune" and strategy.k > n:
        raise InvalidK(f"cannot fine-tune {strategy.k} blocks of a {n}-block backbone")
    path = strategy.pretrained_weights_path
    if path is None:
        raise MissingWeights(f"strategy {strategy} requires a pretrained weights file")
    if not os.path.exists(path):
        raise MissingWeights(f"pretrained weights file not found: {path}")
    weights = load_weights(path)
    model.load_state(weights, _check_pretrained(model, weights))

    for name, block in model.block_of.items():
        if block == HEAD:
            flag = True
        elif strategy.variant == "offtheshelf":
            flag = False
        else:
            flag = block == n + 1 or block > n - strategy.k
        model.set_trainable(name, flag)
    return model


def tiny_config(**overrides) -> ModelConfig:
    """Small config for desk-scale experiments and tests."""
    base = dict(input_size=(32, 32), block_specs=((1, 8, 1, 1), (6, 16, 2, 2)), head_units=64)
    base.update(overrides)
    return ModelConfig(**base)


def config_with(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)


__all__: Sequence[str] = [
    "BlockSpec",
    "ModelConfig",
    "StrategyConfig",
    "Model",
    "HEAD",
    "MOBILENET_V2_BLOCKS",
    "build_model",
    "apply_strategy",
    "count_parameters",
    "tiny_config",
]
