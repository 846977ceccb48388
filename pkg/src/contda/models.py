"""Two-part classification model: trainable encoder, weight-normalized head.

The encoder is a pluggable backbone followed by a 256-d bottleneck
(fully connected + batch norm). The hypothesis is a weight-normalized
linear classifier that is frozen after source training and stays frozen
for the whole adaptation phase.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import ImageDataset
from .errors import (
    CheckpointMismatchError,
    DatasetValidationError,
    InputValidationError,
)
from .optimization import lr_at

BOTTLENECK_DIM = 256

_BACKBONES: dict = {}


def register_backbone(name: str):
    """Register a factory returning ``(module, feature_dim)``."""

    def wrap(factory):
        _BACKBONES[name] = factory
        return factory

    return wrap


def create_backbone(name: str):
    if name not in _BACKBONES:
        raise InputValidationError(
            f"unknown backbone {name!r}; registered: {sorted(_BACKBONES)}"
        )
    return _BACKBONES[name]()


@register_backbone("compact_conv")
def _compact_conv():
    """Three conv blocks with pooling; suited to small synthetic images."""

    def block(cin, cout):
        return nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )

    net = nn.Sequential(
        block(3, 32),
        block(32, 64),
        block(64, 128),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
    )
    return net, 128


class Encoder(nn.Module):
    """Backbone plus a bottleneck: fully connected to 256 + batch norm."""

    def __init__(self, backbone_name: str = "compact_conv"):
        super().__init__()
        self.backbone_name = backbone_name
        self.backbone, feat_dim = create_backbone(backbone_name)
        self.bottleneck = nn.Linear(feat_dim, BOTTLENECK_DIM)
        self.bottleneck_bn = nn.BatchNorm1d(BOTTLENECK_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bottleneck_bn(self.bottleneck(self.backbone(x)))


class WeightNormLinear(nn.Module):
    """Linear map with the weight factored as magnitude * unit direction.

    ``weight = g * v / ||v||`` per output row, so the direction component
    has unit L2 norm by construction after any parameter update.
    """

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        v = torch.empty(out_features, in_features)
        nn.init.kaiming_uniform_(v, a=math.sqrt(5))
        self.weight_v = nn.Parameter(v)
        self.weight_g = nn.Parameter(v.norm(dim=1, keepdim=True).detach().clone())
        self.bias = nn.Parameter(torch.zeros(out_features))

    def direction(self) -> torch.Tensor:
        return self.weight_v / self.weight_v.norm(dim=1, keepdim=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weight = self.weight_g * self.direction()
        return F.linear(x, weight, self.bias)


class Hypothesis(nn.Module):
    """Weight-normalized classifier head, 256 -> C logits."""

    def __init__(self, class_count: int):
        super().__init__()
        self.fc = WeightNormLinear(BOTTLENECK_DIM, class_count)
        self.class_count = class_count

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc(z)


class ClassifierModel(nn.Module):
    """Source/adapted model: encoder g + hypothesis h over C classes."""

    def __init__(self, class_names: list[str], backbone: str = "compact_conv", provenance: str = ""):
        super().__init__()
        self.encoder = Encoder(backbone)
        self.hypothesis = Hypothesis(len(class_names))
        self.class_names = list(class_names)
        self.provenance = provenance

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.hypothesis(self.encoder(x))

    def freeze_hypothesis(self):
        for p in self.hypothesis.parameters():
            p.requires_grad_(False)

    def encoder_parameters(self):
        return [p for p in self.encoder.parameters() if p.requires_grad]

    def hypothesis_state_clone(self) -> dict:
        return {k: v.detach().clone() for k, v in self.hypothesis.state_dict().items()}


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(B, H, W, 3) float arrays in [0, 1] -> (B, 3, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InputValidationError(f"batch must be (B, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise InputValidationError("batch is empty")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def forward_features(model: ClassifierModel, images: np.ndarray) -> np.ndarray:
    """Evaluation-mode feature pass; frozen normalization statistics."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        feats = model.features(images_to_tensor(images))
    if was_training:
        model.train()
    return feats.numpy()


def forward_logits(model: ClassifierModel, images: np.ndarray) -> np.ndarray:
    """Evaluation-mode logits pass, B x C."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits = model(images_to_tensor(images))
    if was_training:
        model.train()
    return logits.numpy()


def label_smoothing_ce(logits: torch.Tensor, labels: torch.Tensor, eps: float = 0.1) -> torch.Tensor:
    """Cross-entropy against a smoothed target: 1-eps on the true class,
    eps/(C-1) spread over the others; mean over the batch."""
    if not 0.0 <= eps < 1.0:
        raise InputValidationError(f"eps must be in [0,1): {eps}")
    if logits.ndim != 2:
        raise InputValidationError(f"logits must be B x C, got {tuple(logits.shape)}")
    c = logits.shape[1]
    if labels.min() < 0 or labels.max() >= c:
        raise InputValidationError("labels out of range [0, C)")
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, labels.view(-1, 1)).squeeze(1)
    if eps == 0.0:
        return nll.mean()
    off = -logp.sum(dim=1) + logp.gather(1, labels.view(-1, 1)).squeeze(1)
    return ((1.0 - eps) * nll + eps / (c - 1) * off).mean()


def _balanced_batches(indices: np.ndarray, batch_size: int) -> list:
    n = len(indices)
    n_batches = max(int(np.ceil(n / batch_size)), 1)
    return np.array_split(indices, n_batches)


@dataclasses.dataclass
class SourceConfig:
    backbone: str = "compact_conv"
    epochs: int = 30
    eta0: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    smoothing: float = 0.1
    seed: int = 0

    def hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def train_source(dataset: ImageDataset, config: SourceConfig) -> ClassifierModel:
    """Supervised training with label smoothing; the hypothesis is frozen
    afterwards for the whole adaptation phase."""
    dataset.validate_nonempty_classes()
    if len(np.unique(dataset.labels)) != dataset.num_classes:
        raise DatasetValidationError("all classes must be present for source training")

    torch.manual_seed(config.seed)
    model = ClassifierModel(dataset.class_names, config.backbone, provenance=config.hash())
    model.train()
    params = list(model.parameters())
    optimizer = torch.optim.SGD(params, lr=config.eta0, momentum=config.momentum)

    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    steps_per_epoch = max(int(np.ceil(n / config.batch_size)), 1)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for batch_idx in _balanced_batches(order, config.batch_size):
            x = images_to_tensor(dataset.images[batch_idx])
            y = torch.from_numpy(dataset.labels[batch_idx])
            single = x.shape[0] < 2
            if single:  # batch norm cannot update stats from one sample
                model.eval()
            logits = model(x)
            loss = label_smoothing_ce(logits, y, config.smoothing)
            optimizer.zero_grad()
            loss.backward()
            for group in optimizer.param_groups:
                group["lr"] = lr_at(config.eta0, step, total_steps)
            optimizer.step()
            if single:
                model.train()
            step += 1

    model.eval()
    acc = evaluate_accuracy(model, dataset)
    if acc <= 1.0 / dataset.num_classes:
        warnings.warn(
            f"source training accuracy {acc:.3f} does not beat chance "
            f"{1.0 / dataset.num_classes:.3f}"
        )
    model.freeze_hypothesis()
    return model


def evaluate_accuracy(model: ClassifierModel, dataset: ImageDataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions, evaluation mode."""
    if len(dataset) == 0:
        raise DatasetValidationError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = images_to_tensor(dataset.images[start : start + batch_size])
            pred = model(x).argmax(dim=1).numpy()
            correct += int((pred == dataset.labels[start : start + batch_size]).sum())
    if was_training:
        model.train()
    return correct / len(dataset)


def save_checkpoint(model: ClassifierModel, path) -> None:
    torch.save(
        {
            "state_dict": model.state_dict(),
            "backbone": model.encoder.backbone_name,
            "class_names": model.class_names,
            "provenance": model.provenance,
        },
        path,
    )


def load_checkpoint(path, expected_class_names: list[str] | None = None) -> ClassifierModel:
    """Rebuild a model from disk; refuses on class-count mismatch."""
    payload = torch.load(path, weights_only=False)
    class_names = payload["class_names"]
    if expected_class_names is not None and len(expected_class_names) != len(class_names):
        raise CheckpointMismatchError(
            f"checkpoint has {len(class_names)} classes, expected {len(expected_class_names)}"
        )
    model = ClassifierModel(class_names, payload["backbone"], payload.get("provenance", ""))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    model.freeze_hypothesis()
    return model
