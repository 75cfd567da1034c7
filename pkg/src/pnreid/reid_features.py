"""Identity-classification backbones and multi-stage feature extraction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .canonical_poses import CanonicalPoseSet
from .gan_training import synthesize_batch, to_tensor
from .networks import ConfigError, Generator, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 16
    feature_dim: int = 256
    input_dims: tuple[int, int] = (64, 32)
    tap_stages: tuple[int, ...] = (1, 2, 3)

    def stage_channels(self) -> tuple[int, ...]:
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c)

    def validate(self) -> None:
        if not self.tap_stages:
            raise ConfigError("tap_stages must be non-empty")
        if any(not 0 <= s < 4 for s in self.tap_stages) or len(set(self.tap_stages)) != len(self.tap_stages):
            raise ConfigError(f"invalid tap_stages {self.tap_stages}")
        h, w = self.input_dims
        if h % 16 or w % 16:
            raise ConfigError(f"input dims {self.input_dims} must be divisible by 16")


@dataclass(frozen=True)
class ReidTrainConfig:
    learning_rate: float = 3.5e-4
    beta1: float = 0.9
    batch_size: int = 16
    dropout: float = 0.5
    epochs: int = 30
    seed: int = 0
    include_originals: bool = False  # backbone B: also train on the source images

    def __post_init__(self):
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("invalid batch_size, epochs or learning_rate")


class _Stage(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.down = nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                                  nn.BatchNorm2d(cout), nn.ReLU())
        self.conv1 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        x = self.down(x)
        return F.relu(x + self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x))))))


class Backbone(nn.Module):
    """Four residual stages (each halving resolution), pooled taps, FC feature, classifier."""

    def __init__(self, cfg: BackboneConfig, num_identities: int, dropout: float = 0.5):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.stage_channels()
        self.stem = nn.Sequential(nn.Conv2d(3, ch[0], 3, padding=1, bias=False),
                                  nn.BatchNorm2d(ch[0]), nn.ReLU())
        self.stages = nn.ModuleList(_Stage(a, b) for a, b in zip((ch[0],) + ch[:-1], ch))
        self.tap_dim = sum(ch[s] for s in cfg.tap_stages)
        self.fc = nn.Linear(self.tap_dim, cfg.feature_dim)
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(cfg.feature_dim, num_identities)

    def taps(self, x) -> torch.Tensor:
        pooled = []
        h = self.stem(x)
        for s, stage in enumerate(self.stages):
            h = stage(h)
            if s in self.cfg.tap_stages:
                pooled.append(h.mean(dim=(2, 3)))
        return torch.cat(pooled, dim=1)

    def features(self, x) -> torch.Tensor:
        return self.fc(self.taps(x))

    def forward(self, x):
        return self.classifier(self.dropout(self.features(x)))


def init_backbone(cfg: BackboneConfig, num_identities: int, seed: int, dropout: float = 0.5,
                  dtype=torch.float32) -> Backbone:
    """He-normal convs and FC, near-zero classifier head, unit BN scales."""
    if num_identities < 2:
        raise ConfigError("identity classification needs at least 2 identities")
    net = Backbone(cfg, num_identities, dropout).to(dtype)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                std = 1e-3 if m is net.classifier else math.sqrt(2.0 / fan_in)
                m.weight.copy_(torch.randn(m.weight.shape, generator=g, dtype=dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return net


def identity_ce_loss(logits, label) -> torch.Tensor:
    """Softmax cross-entropy; accepts one logit vector or a batch."""
    logits = torch.as_tensor(logits, dtype=torch.float64) if not torch.is_tensor(logits) else logits
    label = torch.as_tensor(label, dtype=torch.long)
    if logits.dim() == 1:
        logits, label = logits.unsqueeze(0), label.reshape(1)
    c = logits.shape[1]
    if bool(((label < 0) | (label >= c)).any()):
        raise ValueError(f"label out of range [0, {c})")
    return F.cross_entropy(logits, label)


@torch.no_grad()
def extract_features(images: np.ndarray, net: Backbone, batch_size: int = 128) -> np.ndarray:
    """Evaluation-mode FC features for (N, H, W, 3) images -> (N, feature_dim) float64."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if tuple(images.shape[1:3]) != tuple(net.cfg.input_dims):
        raise ShapeError(f"images {images.shape[1:3]} do not match backbone dims {net.cfg.input_dims}")
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    try:
        out = [net.features(to_tensor(images[k:k + batch_size], dtype)).double().numpy()
               for k in range(0, len(images), batch_size)]
    finally:
        net.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, net.cfg.feature_dim))


def extract_feature(img: np.ndarray, net: Backbone) -> np.ndarray:
    return extract_features(np.asarray(img)[None], net)[0]


@dataclass
class ReidResult:
    net: Backbone
    accuracy: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)


def train_identity_classifier(images: np.ndarray, labels: Sequence[int], arch: BackboneConfig,
                              cfg: ReidTrainConfig = ReidTrainConfig()) -> ReidResult:
    """Mini-batch Adam on identity cross-entropy; returns per-epoch training accuracy.

    Labels are remapped to contiguous class indices in sorted order.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError("identity classification needs at least 2 identities")
    y = torch.as_tensor(np.searchsorted(classes, labels), dtype=torch.long)
    x = to_tensor(np.asarray(images, dtype=np.float32))
    net = init_backbone(arch, len(classes), cfg.seed, cfg.dropout)
    result = ReidResult(net)
    if cfg.epochs == 0:
        net.eval()
        return result
    torch.manual_seed(cfg.seed)  # dropout masks
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))
    n = len(y)
    for epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(n)
        correct, total_loss = 0, 0.0
        for k in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[k:k + cfg.batch_size])
            if len(idx) < 2:  # batch norm needs >1 sample
                continue
            logits = net(x[idx])
            loss = identity_ce_loss(logits, y[idx])
            if not torch.isfinite(loss):
                raise RuntimeError(f"epoch {epoch}: non-finite identity loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
        result.accuracy.append(correct / n)
        result.loss.append(total_loss / n)
        log.debug("reid epoch %d: loss=%.4f acc=%.3f", epoch, result.loss[-1], result.accuracy[-1])
    net.eval()
    return result


def synthetic_training_set(images: np.ndarray, labels: Sequence[int], gen: Generator,
                           canon: CanonicalPoseSet) -> tuple[np.ndarray, np.ndarray]:
    """K pose-normalized syntheses per image, each labelled with its source identity."""
    images = np.asarray(images, dtype=np.float32)
    synth = synthesize_batch(images, canon, gen)
    k = len(canon)
    return synth.reshape((-1,) + images.shape[1:]), np.repeat(np.asarray(labels), k)


def train_backbone_b(images: np.ndarray, labels: Sequence[int], gen: Generator, canon: CanonicalPoseSet,
                     arch: BackboneConfig, cfg: ReidTrainConfig = ReidTrainConfig()) -> ReidResult:
    """Train the pose-free backbone on generated canonical-pose images."""
    x, y = synthetic_training_set(images, labels, gen, canon)
    if cfg.include_originals:
        x = np.concatenate([x, np.asarray(images, dtype=np.float32)])
        y = np.concatenate([y, np.asarray(labels)])
    return train_identity_classifier(x, y, arch, cfg)
