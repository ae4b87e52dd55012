"""MAAM classifier, its ablation variants, and the baseline models.

The feature extractor runs three agent branches (conv -> BN -> ReLU -> 2x2
max-pool, kernel sizes 3/5/7 with same padding) in parallel, mixes them with
softmax-normalised learnable scalars, and compresses the mix with a 1x1
conv -> BN -> ReLU reduce layer. A two-layer MLP head produces the logits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigurationError, ShapeError
from .fused import fused_weighted_sum, naive_weighted_sum
from .layers import (
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    Sequential,
    load_weights,
    save_weights,
)
from .tensor import DTYPE, Rng, Tensor

VARIANTS = ("maam", "t_cnn", "o_agent_attention", "o_reduce_layer", "cnn", "mlp", "rnn")

DISPLAY_NAMES = {
    "maam": "MAAM",
    "t_cnn": "t/CNN",
    "o_agent_attention": "o/Agent Attention",
    "o_reduce_layer": "o/Reduce Layer",
    "cnn": "CNN",
    "mlp": "MLP",
    "rnn": "RNN",
}

ABLATION_VARIANTS = ("maam", "t_cnn", "o_agent_attention", "o_reduce_layer")
BASELINE_VARIANTS = ("maam", "cnn", "mlp", "rnn")


@dataclass
class ModelSpec:
    """Declarative description of a network variant.

    ``cnn_channels`` sizes the CNN baseline's single conv block and
    ``rnn_hidden`` the recurrent baseline; both are unused by other variants.
    """

    variant: str = "maam"
    cb: int = 256
    cr: int = 128
    kernel_sizes: tuple = (3, 5, 7)
    hidden: int = 256
    classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    cnn_channels: int = 64
    rnn_hidden: int = 128
    fused: bool = True

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigurationError(f"agent kernel sizes must be odd for same padding, got {self.kernel_sizes}")
        if len(self.kernel_sizes) != 3:
            raise ConfigurationError("the fusion module mixes exactly three agent branches")
        if self.cr >= self.cb:
            raise ConfigurationError(f"reduce layer must compress channels (cr={self.cr} >= cb={self.cb})")
        if self.image_size % 2:
            raise ConfigurationError(f"image size must be even for 2x2 pooling, got {self.image_size}")

    @property
    def pooled(self) -> int:
        return self.image_size // 2

    @property
    def flatten_size(self) -> int:
        """Length of the vector fed to the classifier head."""
        spatial = self.pooled**2
        if self.variant == "maam" or self.variant == "o_agent_attention":
            return self.cr * spatial
        if self.variant in ("o_reduce_layer", "t_cnn"):
            return self.cb * spatial
        if self.variant == "cnn":
            return self.cnn_channels * spatial
        if self.variant == "mlp":
            return self.in_channels * self.image_size**2
        return self.rnn_hidden

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class AgentBlock(Sequential):
    """conv(k x k, same padding) -> BN -> ReLU -> 2x2 max-pool."""

    def __init__(self, in_channels: int, channels: int, kernel_size: int):
        super().__init__(
            Conv2d(in_channels, channels, kernel_size, padding=(kernel_size - 1) // 2),
            BatchNorm2d(channels),
            ReLU(),
            MaxPool2d(2),
        )
        self.kernel_size = kernel_size


class ReduceLayer(Sequential):
    """1x1 conv -> BN -> ReLU channel compression."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(Conv2d(in_channels, out_channels, 1), BatchNorm2d(out_channels), ReLU())


class AgentAttentionFusion(Module):
    """Softmax-normalised learnable scalar mix of the branch outputs."""

    def __init__(self, n_branches: int = 3, fused: bool = True):
        super().__init__()
        self.fused = fused
        self.params["alphas"] = T.parameter(np.zeros(n_branches, DTYPE))

    def init_params(self, rng: Rng) -> None:
        self.params["alphas"].data = np.zeros_like(self.params["alphas"].data)

    def weights(self) -> np.ndarray:
        return T.softmax_array(self.params["alphas"].data)

    def forward(self, branches: Sequence[Tensor], train: bool = False) -> Tensor:
        fn = fused_weighted_sum if self.fused else naive_weighted_sum
        return fn(*branches, self.params["alphas"])


class BranchMean(Module):
    """Weight-free mix used when the attention fusion is ablated."""

    def forward(self, branches: Sequence[Tensor], train: bool = False) -> Tensor:
        return T.average(branches)


class MAAMBlock(Module):
    """Agent branches -> fusion -> optional reduce layer."""

    def __init__(self, spec: ModelSpec, attention: bool = True, reduce: bool = True):
        super().__init__()
        self.branches = [AgentBlock(spec.in_channels, spec.cb, k) for k in spec.kernel_sizes]
        for i, branch in enumerate(self.branches, start=1):
            self.children[f"agent{i}"] = branch
        self.fusion = AgentAttentionFusion(len(self.branches), spec.fused) if attention else BranchMean()
        self.children["fusion"] = self.fusion
        self.reduce = ReduceLayer(spec.cb, spec.cr) if reduce else None
        if self.reduce is not None:
            self.children["reduce"] = self.reduce

    def agent_features(self, x: Tensor, train: bool = False) -> list[Tensor]:
        return [branch(x, train) for branch in self.branches]

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        mixed = self.fusion(self.agent_features(x, train), train)
        return self.reduce(mixed, train) if self.reduce is not None else mixed


class RecurrentEncoder(Module):
    """Vanilla tanh RNN over image rows; returns the last hidden state.

    Each of the H steps sees one image row as a vector of C*W features.
    """

    def __init__(self, features: int, hidden: int):
        super().__init__()
        self.features, self.hidden = features, hidden
        self.children["input"] = self.input = Linear(features, hidden)
        self.children["recurrent"] = self.recurrent = Linear(hidden, hidden, bias=False)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        n, c, h, w = x.shape
        if c * w != self.features:
            raise ShapeError(f"RecurrentEncoder: rows have {c * w} features, expected {self.features}")
        rows = x.data.transpose(0, 2, 1, 3).reshape(n, h, c * w)
        state = None
        for t in range(h):
            step = self.input(Tensor(rows[:, t]), train)
            state = T.tanh(step if state is None else T.add(step, self.recurrent(state, train)))
        return state


def _head(spec: ModelSpec) -> Sequential:
    return Sequential(
        Flatten(),
        Linear(spec.flatten_size, spec.hidden),
        ReLU(),
        Linear(spec.hidden, spec.classes, zero_init=True),
    )


class Model(Module):
    """A feature extractor followed by a classifier head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        v = spec.variant
        if v in ("maam", "o_agent_attention", "o_reduce_layer"):
            self.features = MAAMBlock(spec, attention=v != "o_agent_attention", reduce=v != "o_reduce_layer")
            self.head = _head(spec)
        elif v == "t_cnn":
            self.features = AgentBlock(spec.in_channels, spec.cb, spec.kernel_sizes[0])
            self.head = _head(spec)
        elif v == "cnn":
            self.features = AgentBlock(spec.in_channels, spec.cnn_channels, 3)
            self.head = _head(spec)
        elif v == "mlp":
            self.features = Sequential()
            self.head = _head(spec)
        else:
            self.features = RecurrentEncoder(spec.in_channels * spec.image_size, spec.rnn_hidden)
            self.head = Sequential(Linear(spec.rnn_hidden, spec.classes, zero_init=True))
        self.children["features"] = self.features
        self.children["head"] = self.head

    def forward(self, x: Tensor, train: bool = False, tape: Optional[T.Tape] = None) -> Tensor:
        """Logits for an NCHW batch; records on ``tape`` only in train mode."""
        expected = (self.spec.in_channels, self.spec.image_size, self.spec.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"{self.spec.variant}: expected input (N, {', '.join(map(str, expected))}), got {x.shape}")
        if tape is not None and train:
            with tape:
                return self.head(self.features(x, train), train)
        return self.head(self.features(x, train), train)

    def extract(self, x: Tensor, train: bool = False) -> Tensor:
        """Feature map fed to the head (F for the MAAM variants)."""
        return self.features(x, train)

    @property
    def fusion(self) -> AgentAttentionFusion:
        if not isinstance(self.features, MAAMBlock) or not isinstance(self.features.fusion, AgentAttentionFusion):
            raise ConfigurationError(f"variant {self.spec.variant!r} has no attention fusion weights")
        return self.features.fusion

    def fusion_weights(self) -> np.ndarray:
        return self.fusion.weights()

    def predict(self, x: Tensor) -> np.ndarray:
        return self.forward(x, train=False).data.argmax(axis=1)


def build_model(spec: ModelSpec, rng: Rng) -> Model:
    model = Model(spec)
    model.init_params(rng)
    return model


def fusion_weights(model: Model) -> np.ndarray:
    return model.fusion_weights()


def maam_forward(model: Model, x: Tensor, train: bool = False, tape: Optional[T.Tape] = None) -> Tensor:
    return model.forward(x, train, tape)


def save_checkpoint(model: Model, path) -> None:
    """Weights in MAAMWTS1 format plus a ``<path>.json`` sidecar with the spec."""
    path = Path(path)
    save_weights(model, path)
    sidecar = {"spec": model.spec.to_dict(), "param_count": model.param_count()}
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Model:
    path = Path(path)
    sidecar = Path(f"{path}.json")
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    if not sidecar.exists():
        raise CheckpointError(f"checkpoint sidecar {sidecar} does not exist")
    try:
        spec = ModelSpec.from_dict(json.loads(sidecar.read_text())["spec"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{sidecar}: malformed sidecar ({exc})") from exc
    model = Model(spec)
    try:
        load_weights(model, path)
    except CheckpointError as exc:
        raise CheckpointError(f"variant {spec.variant!r} from {sidecar.name} does not match weights: {exc}") from exc
    return model
