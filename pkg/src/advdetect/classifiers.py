"""
Plain and robust image classifiers.

A robust classifier is an ordinary network that owns a :class:`PermutationKey`
and block-shuffles every input before the first layer, at training and at
inference time. Callers always hand over un-shuffled pixels.
"""

from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import artifacts
from .shuffle import apply_block_permutation, derive_permutation, load_key, save_key
from .types import (
    ConfigError,
    PermutationKey,
    ShapeError,
    SizeError,
    validate_batch,
    validate_labels,
)

log = logging.getLogger(__name__)


class Arch(str, enum.Enum):
    SMALL_CNN = "SMALL_CNN"
    RESNET18 = "RESNET18"
    # any other nn.Module wrapped in memory (toy models in tests); not serialisable
    CUSTOM = "CUSTOM"


class SmallCNN(nn.Module):
    """Two conv blocks (conv-conv-pool each) followed by two dense layers."""

    def __init__(self, in_channels=3, num_classes=10, image_size=32, width=32, hidden=256):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            )

        self.features = nn.Sequential(block(in_channels, width), block(width, 2 * width))
        flat = 2 * width * (image_size // 4) ** 2
        self.fc1 = nn.Linear(flat, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, x):
        x = self.features(x).flatten(1)
        return self.fc2(F.relu(self.fc1(x)))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """CIFAR-style ResNet-18 (3x3 stem, no initial max-pool)."""

    def __init__(self, in_channels=3, num_classes=10, image_size=32):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True))
        layers, cin = [], 64
        for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            layers += [BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1)]
            cin = cout
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(512, num_classes)

    def forward(self, x):
        x = self.layers(self.stem(x))
        return self.fc(F.adaptive_avg_pool2d(x, 1).flatten(1))


def build_network(arch, in_channels, num_classes, image_size) -> nn.Module:
    arch = Arch(arch)
    if arch is Arch.SMALL_CNN:
        return SmallCNN(in_channels, num_classes, image_size)
    if arch is Arch.RESNET18:
        return ResNet18(in_channels, num_classes, image_size)
    raise ConfigError("CUSTOM networks cannot be built from a config")


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 128
    learning_rate: float = 0.05
    weight_decay: float = 5e-4
    seed: int = 0
    augmentation: bool = True
    arch: str = "SMALL_CNN"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size and learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if Arch(self.arch) is Arch.CUSTOM:
            raise ConfigError("training needs arch SMALL_CNN or RESNET18")


class Classifier:
    """
    A trained network plus the metadata needed to use it.

    ``key`` set means robust variant: inputs are shuffled with it before the
    network sees them. All public methods take ``(n, h, w, c)`` numpy batches.
    """

    def __init__(self, network: nn.Module, arch, num_classes: int, image_shape, key: PermutationKey | None = None, train_config: TrainConfig | None = None):
        self.network = network.eval()
        self.arch = Arch(arch)
        self.num_classes = int(num_classes)
        self.image_shape = tuple(int(s) for s in image_shape)
        self.key = key
        self.train_config = train_config
        self._perm = None
        if key is not None:
            key.check_dims(self.image_shape[0], self.image_shape[1])
            self._perm = derive_permutation(key, self.image_shape[2])

    @property
    def robust(self) -> bool:
        return self.key is not None

    @property
    def dtype(self):
        return next(self.network.parameters()).dtype

    def transform(self, x: torch.Tensor) -> torch.Tensor:
        if self.key is None:
            return x
        return apply_block_permutation(x, self._perm, self.key.block_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable logits for an NHWC tensor."""
        if tuple(x.shape[1:]) != self.image_shape:
            raise ShapeError(f"model expects images of shape {self.image_shape}, got {tuple(x.shape[1:])}")
        return self.network(self.transform(x).permute(0, 3, 1, 2))

    __call__ = forward

    def as_tensor(self, images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            return images.to(self.dtype)
        validate_batch(images)
        return torch.as_tensor(np.asarray(images), dtype=self.dtype)

    def state_dict(self):
        return self.network.state_dict()


def _batches(n, size):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random 4-pixel translation (zero padded) and horizontal flip, NHWC."""
    n, h, w, _ = x.shape
    padded = F.pad(x.permute(0, 3, 1, 2), (4, 4, 4, 4))
    dy = torch.randint(0, 9, (n,), generator=gen)
    dx = torch.randint(0, 9, (n,), generator=gen)
    flip = torch.rand(n, generator=gen) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        if flip[i]:
            crop = crop.flip(-1)
        out[i] = crop.permute(1, 2, 0)
    return out


def train_classifier(split, cfg: TrainConfig, transform: PermutationKey | None = None, verbose=False) -> Classifier:
    """
    Train a classifier on ``split.train``. With ``transform`` the model is the
    robust variant and every training image is shuffled with that key.

    SGD with Nesterov momentum and a one-cycle learning-rate schedule.
    """
    x, y = split.train
    validate_batch(x)
    y = validate_labels(y, len(x), split.num_classes)
    if transform is not None:
        transform.check_dims(x.shape[1], x.shape[2])

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = build_network(cfg.arch, x.shape[3], split.num_classes, x.shape[1])
    model = Classifier(net, cfg.arch, split.num_classes, x.shape[1:], transform, cfg)

    xt = torch.as_tensor(x, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.long)
    steps_per_epoch = -(-len(x) // cfg.batch_size)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=0.9, nesterov=True, weight_decay=cfg.weight_decay)
    total_steps = cfg.epochs * steps_per_epoch
    if total_steps >= 4:
        # OneCycleLR needs at least two steps in each phase
        sched = torch.optim.lr_scheduler.OneCycleLR(
            opt, max_lr=cfg.learning_rate, total_steps=total_steps, pct_start=max(0.25, 2 / total_steps)
        )
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)

    for epoch in range(cfg.epochs):
        net.train()
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for sl in _batches(len(x), cfg.batch_size):
            idx = order[sl]
            xb = xt[idx]
            if cfg.augmentation:
                xb = _augment(xb, gen)
            loss = F.cross_entropy(model.forward(xb), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        msg = f"epoch {epoch + 1}/{cfg.epochs} loss {total / len(x):.4f}"
        log.info(msg)
        if verbose:
            print(msg)
    net.eval()
    return model


def logits(model: Classifier, images, batch_size=500) -> np.ndarray:
    xt = model.as_tensor(images)
    out = []
    with torch.no_grad():
        for sl in _batches(len(xt), batch_size):
            out.append(model.forward(xt[sl]).cpu().numpy())
    if not out:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return np.concatenate(out)


def input_gradient(model: Classifier, images, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy over the batch w.r.t. the input pixels."""
    xt = model.as_tensor(images).clone().requires_grad_(True)
    y = validate_labels(labels, len(xt), model.num_classes)
    loss = F.cross_entropy(model.forward(xt), torch.as_tensor(y, dtype=torch.long))
    (grad,) = torch.autograd.grad(loss, xt)
    return grad.numpy()


def predict(model: Classifier, images, batch_size=500) -> np.ndarray:
    return logits(model, images, batch_size).argmax(axis=1)


def accuracy(model: Classifier, images, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0 or len(labels) != len(images):
        raise SizeError(f"need matching non-empty images/labels, got {len(images)} and {len(labels)}")
    return float(np.mean(predict(model, images) == labels))


def save_classifier(model: Classifier, path, extra: dict | None = None, inputs: dict | None = None) -> dict:
    """Write ``path`` (state dict) and ``path.json``; a robust model also gets ``<stem>.key.json``."""
    if model.arch is Arch.CUSTOM:
        raise ConfigError("CUSTOM networks cannot be saved")
    torch.save(model.state_dict(), path)
    meta = {
        "kind": "classifier",
        "arch": model.arch.value,
        "num_classes": model.num_classes,
        "image_shape": list(model.image_shape),
        "train_config": asdict(model.train_config) if model.train_config else None,
        "seed": model.train_config.seed if model.train_config else None,
        "key_file": None,
    }
    inputs = dict(inputs or {})
    if model.key is not None:
        key_path = os.path.splitext(str(path))[0] + ".key.json"
        save_key(model.key, key_path)
        meta["key_file"] = os.path.basename(key_path)
        inputs["key"] = key_path
    meta.update(extra or {})
    return artifacts.write_sidecar(path, meta, inputs)


def load_classifier(path, check=True) -> Classifier:
    meta = artifacts.verify(path) if check else artifacts.read_sidecar(path)
    key = None
    if meta.get("key_file"):
        key = load_key(os.path.join(os.path.dirname(str(path)), meta["key_file"]))
    shape = meta["image_shape"]
    net = build_network(meta["arch"], shape[2], meta["num_classes"], shape[0])
    net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    cfg = TrainConfig(**meta["train_config"]) if meta.get("train_config") else None
    return Classifier(net, meta["arch"], meta["num_classes"], shape, key, cfg)
