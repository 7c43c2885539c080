"""The speckle embedding network: conv-ReLU-BN-pool x2, two fully connected
layers, and L2 normalization onto the unit hypersphere."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from .tensor import (
    BatchNorm2d,
    Tensor,
    conv2d,
    flatten2d,
    l2_normalize,
    linear,
    maxpool2d,
    no_grad,
    relu,
)

STANDARDIZE_EPS = 1e-8


@dataclass(frozen=True)
class EmbeddingNetConfig:
    input_size: int = 96
    conv1_out_channels: int = 32
    conv2_out_channels: int = 64
    fc_hidden: int = 512
    embedding_dim: int = 128
    init_std: float = 0.2

    def validate(self) -> None:
        if self.embedding_dim < 2:
            raise ValueError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        for name, extent in self.trace_extents().items():
            if extent <= 0:
                raise ValueError(f"config leaves no pixels at stage '{name}' (extent {extent}); increase input_size")

    def trace_extents(self) -> Dict[str, int]:
        """Spatial extent after each stage, for a square input."""
        s = self.input_size
        out = {}
        out["conv1"] = s = s - 4
        out["pool1"] = s = s // 2
        out["conv2"] = s = s - 4
        out["pool2"] = s = s // 2
        return out

    @property
    def flat_features(self) -> int:
        side = self.trace_extents()["pool2"]
        return self.conv2_out_channels * side * side


def gaussian_init(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class SpeckleTrunk:
    """Shared convolutional feature stack: (B,1,S,S) -> flattened (B, F)."""

    def __init__(self, c1: int, c2: int, rng: np.random.Generator, std: float, dtype):
        self.conv1_w = gaussian_init(rng, (c1, 1, 5, 5), std, dtype)
        self.conv1_b = zeros_param(c1, dtype)
        self.bn1 = BatchNorm2d(c1, dtype=dtype)
        self.conv2_w = gaussian_init(rng, (c2, c1, 5, 5), std, dtype)
        self.conv2_b = zeros_param(c2, dtype)
        self.bn2 = BatchNorm2d(c2, dtype=dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        h = maxpool2d(self.bn1(relu(conv2d(x, self.conv1_w, self.conv1_b)), training))
        h = maxpool2d(self.bn2(relu(conv2d(h, self.conv2_w, self.conv2_b)), training))
        return flatten2d(h)

    def named_parameters(self) -> Dict[str, Tensor]:
        return {
            "conv1.weight": self.conv1_w, "conv1.bias": self.conv1_b,
            "bn1.scale": self.bn1.scale, "bn1.shift": self.bn1.shift,
            "conv2.weight": self.conv2_w, "conv2.bias": self.conv2_b,
            "bn2.scale": self.bn2.scale, "bn2.shift": self.bn2.shift,
        }

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {
            "bn1.running_mean": self.bn1.running_mean, "bn1.running_var": self.bn1.running_var,
            "bn2.running_mean": self.bn2.running_mean, "bn2.running_var": self.bn2.running_var,
        }

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        bn_name, stat = name.split(".")
        bn = getattr(self, bn_name)
        setattr(bn, stat, value.copy())


class EmbeddingNet:
    """Maps preprocessed speckle frames to unit-norm embedding vectors."""

    checkpoint_kind = "embedding"

    def __init__(self, config: EmbeddingNetConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.trunk = SpeckleTrunk(config.conv1_out_channels, config.conv2_out_channels, rng, config.init_std, dtype)
        self.fc1_w = gaussian_init(rng, (config.fc_hidden, config.flat_features), config.init_std, dtype)
        self.fc1_b = zeros_param(config.fc_hidden, dtype)
        self.fc2_w = gaussian_init(rng, (config.embedding_dim, config.fc_hidden), config.init_std, dtype)
        self.fc2_b = zeros_param(config.embedding_dim, dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        feats = self.trunk.forward(x, training)
        h = relu(linear(feats, self.fc1_w, self.fc1_b))
        return l2_normalize(linear(h, self.fc2_w, self.fc2_b))

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

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def config_dict(self) -> dict:
        return asdict(self.config)

    @classmethod
    def from_config(cls, cfg: dict) -> "EmbeddingNet":
        return cls(EmbeddingNetConfig(**cfg))


def build_embedding_net(config: Optional[EmbeddingNetConfig] = None, seed: int = 0, dtype=np.float32) -> EmbeddingNet:
    return EmbeddingNet(config or EmbeddingNetConfig(), seed=seed, dtype=dtype)


def preprocess(images: np.ndarray, input_size: int, dtype=np.float32) -> np.ndarray:
    """Standardize each frame to zero mean, unit variance; returns (B,1,S,S)."""
    arr = np.asarray(images, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ValueError(f"expected single-channel input, got {arr.shape}")
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValueError(f"expected (H,W), (B,H,W) or (B,1,H,W) input, got shape {arr.shape}")
    if arr.shape[1] != input_size or arr.shape[2] != input_size:
        raise ValueError(
            f"expected {input_size}x{input_size} frames, got {arr.shape[1]}x{arr.shape[2]}; crop or resize first")
    mean = arr.mean(axis=(1, 2), keepdims=True)
    std = arr.std(axis=(1, 2), keepdims=True)
    return ((arr - mean) / (std + STANDARDIZE_EPS))[:, None]


def embed(model: EmbeddingNet, images: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Embed frames as unit-norm vectors. Eval mode is a pure function of (model, image)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = preprocess(images, model.config.input_size, dtype=model.fc1_w.data.dtype)
    if mode == "eval":
        with no_grad():
            return model.forward(Tensor(x), training=False).data
    return model.forward(Tensor(x), training=True).data


def embed_one(model: EmbeddingNet, image: np.ndarray) -> np.ndarray:
    """Single-frame eval embedding; the service and batch CLI both use this path."""
    return embed(model, np.asarray(image)[None], mode="eval")[0]
