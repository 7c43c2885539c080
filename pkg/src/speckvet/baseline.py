"""Binary single-hit classifier: shared conv trunk, two fc layers, one logit.

Comparison model for the masking-robustness study. Frames are relabeled to
single_hit versus everything else, trained with binary cross-entropy, and
thresholded at a fixed probability to produce the decision.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.special import expit

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import SpeckleDataset
from .model import EmbeddingNetConfig, SpeckleTrunk, gaussian_init, preprocess, zeros_param
from .optim import adam_step, init_adam
from .simulate import SINGLE_HIT
from .tensor import Tensor, no_grad, linear, relu, sigmoid_bce_with_logits
from .train import TRAIN_STREAM, _batches

NON_SINGLE_HIT = "non_single_hit"
DEFAULT_THRESHOLD = 0.9
MAX_EVAL_BATCH = 512


def relabel_binary(label: str) -> int:
    """Collapse hit labels to the binary target: single_hit 1, anything else 0."""
    return 1 if label == SINGLE_HIT else 0


@dataclass(frozen=True)
class BaselineConfig:
    input_size: int = 96
    conv1_out_channels: int = 32
    conv2_out_channels: int = 64
    fc_hidden: int = 512
    init_std: float = 0.2
    threshold: float = DEFAULT_THRESHOLD

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0,1), got {self.threshold}")
        self._trunk_config().validate()

    def _trunk_config(self) -> EmbeddingNetConfig:
        # Same conv stack as the embedding net so the comparison isolates
        # the head and training paradigm, not backbone capacity. The
        # embedding_dim is sizing filler; the binary head replaces it.
        return EmbeddingNetConfig(
            input_size=self.input_size,
            conv1_out_channels=self.conv1_out_channels,
            conv2_out_channels=self.conv2_out_channels,
            fc_hidden=self.fc_hidden,
            embedding_dim=2,
            init_std=self.init_std,
        )

    @property
    def flat_features(self) -> int:
        return self._trunk_config().flat_features


class BinaryHitNet:
    """Produces one raw logit per frame; sigmoid gives P(single hit)."""

    checkpoint_kind = "binary_baseline"

    def __init__(self, config: BaselineConfig = None, seed: int = 0, dtype=np.float32):
        config = config or BaselineConfig()
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.trunk = SpeckleTrunk(
            config.conv1_out_channels, config.conv2_out_channels,
            rng, config.init_std, dtype)
        self.fc1_w = gaussian_init(rng, (config.fc_hidden, config.flat_features), config.init_std, dtype)
        self.fc1_b = zeros_param(config.fc_hidden, dtype)
        self.fc2_w = gaussian_init(rng, (1, config.fc_hidden), config.init_std, dtype)
        self.fc2_b = zeros_param(1, dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        feats = self.trunk.forward(x, training)
        h = relu(linear(feats, self.fc1_w, self.fc1_b))
        return linear(h, self.fc2_w, self.fc2_b)

    def named_parameters(self) -> Dict[str, Tensor]:
        params = dict(self.trunk.named_parameters())
        params.update({
            "fc1.weight": self.fc1_w, "fc1.bias": self.fc1_b,
            "fc2.weight": self.fc2_w, "fc2.bias": self.fc2_b,
        })
        return params

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return dict(self.trunk.named_buffers())

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        self.trunk.set_buffer(name, value)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def config_dict(self) -> dict:
        return asdict(self.config)

    @classmethod
    def from_config(cls, cfg: dict) -> "BinaryHitNet":
        return cls(BaselineConfig(**cfg))


def predict_probabilities(model: BinaryHitNet, images: np.ndarray) -> np.ndarray:
    """Sigmoid probabilities for a stack of frames, eval mode, float64."""
    x = preprocess(images, model.config.input_size)
    probs = np.empty(len(x), dtype=np.float64)
    with no_grad():
        for s in range(0, len(x), MAX_EVAL_BATCH):
            logits = model.forward(Tensor(x[s:s + MAX_EVAL_BATCH]), training=False)
            probs[s:s + MAX_EVAL_BATCH] = expit(logits.data[:, 0].astype(np.float64))
    return probs


def predict_single_hit(model: BinaryHitNet, image: np.ndarray) -> tuple:
    """(probability, label) for one frame; threshold is inclusive."""
    p = float(predict_probabilities(model, np.asarray(image)[None])[0])
    label = SINGLE_HIT if p >= model.config.threshold else NON_SINGLE_HIT
    return p, label


@dataclass
class BaselineTrainConfig:
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    learning_rate: float = 1e-3

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


@dataclass
class BaselineEpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BaselineFitResult:
    history: List[BaselineEpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    checkpoint_path: Optional[str] = None


def _binary_targets(dataset: SpeckleDataset) -> np.ndarray:
    return np.array([relabel_binary(lab) for lab in dataset.labels], dtype=np.float32)


def _bce_mean(probs: np.ndarray, targets: np.ndarray) -> float:
    eps = 1e-12
    p = np.clip(probs, eps, 1.0 - eps)
    return float(-np.mean(targets * np.log(p) + (1.0 - targets) * np.log1p(-p)))


def evaluate_baseline(model: BinaryHitNet, dataset: SpeckleDataset) -> tuple:
    """(mean BCE, thresholded accuracy) over a split."""
    targets = _binary_targets(dataset)
    probs = predict_probabilities(model, dataset.frames)
    predicted = (probs >= model.config.threshold).astype(np.float32)
    return _bce_mean(probs, targets), float(np.mean(predicted == targets))


def train_baseline(
    model: BinaryHitNet,
    train_split: SpeckleDataset,
    val_split: SpeckleDataset,
    config: BaselineTrainConfig,
    checkpoint_path=None,
    metrics_path=None,
) -> BaselineFitResult:
    """Binary cross-entropy training; the best-validation model is retained.

    Mirrors the embedding trainer: when checkpoint_path is given the best
    checkpoint is written there and loaded back into `model` at the end.
    """
    config.validate()
    targets = _binary_targets(train_split)
    if np.unique(targets).size < 2:
        raise ValueError("training pool contains a single class after relabeling")
    adam_state = init_adam(model.named_parameters(), learning_rate=config.learning_rate)
    params = model.named_parameters()
    result = BaselineFitResult(
        checkpoint_path=str(checkpoint_path) if checkpoint_path else None)
    metrics_file = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, TRAIN_STREAM, epoch])
            loss_total = 0.0
            n_seen = 0
            for idx in _batches(len(train_split), config.batch_size, rng):
                x = Tensor(preprocess(train_split.frames[idx], model.config.input_size))
                logits = model.forward(x, training=True)
                loss = sigmoid_bce_with_logits(logits, targets[idx][:, None])
                model.zero_grad()
                loss.backward()
                adam_step(params, {n: p.grad for n, p in params.items()}, adam_state)
                loss_total += float(loss.data.item()) * len(idx)
                n_seen += len(idx)
            val_loss, val_acc = evaluate_baseline(model, val_split)
            metrics = BaselineEpochMetrics(
                epoch=epoch, train_loss=loss_total / n_seen,
                val_loss=val_loss, val_accuracy=val_acc)
            result.history.append(metrics)
            if metrics.val_loss < result.best_val_loss:
                result.best_val_loss = metrics.val_loss
                result.best_epoch = epoch
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path, metadata={
                        "epoch": epoch, "val_loss": val_loss,
                        "val_accuracy": val_acc})
            if metrics_file is not None:
                metrics_file.write(json.dumps(metrics.to_dict()) + "\n")
                metrics_file.flush()
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if checkpoint_path is not None and result.best_epoch >= 0:
        best = load_checkpoint(checkpoint_path)
        live = model.named_parameters()
        for name, param in best.named_parameters().items():
            live[name].data[...] = param.data
        for name, buf in best.named_buffers().items():
            model.set_buffer(name, buf)
    return result
