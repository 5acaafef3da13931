"""Reference architectures and conversion between checkpoints and torch modules.

Three families are supported:

* ``mlp``          fully connected ReLU network (used for alignment tests)
* ``small_cnn``    3 conv + 2 linear layers, ~2.3k parameters on 8x8 inputs
* ``mini_resnet``  stem + two residual stages with batch-norm, ~5k parameters

Checkpoint tensors use the 2D convention of the tokenizer: one output neuron
per row, conv kernels flattened as ``in_channels * kh * kw`` and the bias as
the last column. Batch-norm layers are stored as a ``(2, C)`` array of
gamma and beta; running mean/var go into ``ckpt.buffers``.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .zoo_store import (
    ArchitectureDescriptor,
    CheckpointMeta,
    LayerSpec,
    ModelCheckpoint,
    ValidationError,
)


def _descriptor(family: str, config: dict, rows: list[tuple]) -> ArchitectureDescriptor:
    layers = tuple(
        LayerSpec(name=n, kind=k, out_dim=o, fan_in=f, has_bias=b, layer_index=i)
        for i, (n, k, o, f, b) in enumerate(rows)
    )
    return ArchitectureDescriptor(layers=layers, family=family, config=dict(config))


def mlp_arch(in_dim: int = 16, hidden: tuple[int, ...] = (12, 10), out_dim: int = 4) -> ArchitectureDescriptor:
    dims = [in_dim, *hidden, out_dim]
    rows = [(f"fc{i}", "linear", dims[i + 1], dims[i], True) for i in range(len(dims) - 1)]
    cfg = {"in_dim": in_dim, "hidden": list(hidden), "out_dim": out_dim}
    return _descriptor("mlp", cfg, rows)


def small_cnn_arch(
    in_channels: int = 1,
    image_size: int = 8,
    channels: tuple[int, int, int] = (8, 12, 6),
    hidden: int = 20,
    n_classes: int = 10,
) -> ArchitectureDescriptor:
    if image_size % 4:
        raise ValidationError("small_cnn needs image_size divisible by 4")
    c1, c2, c3 = channels
    spatial = (image_size // 4) ** 2
    rows = [
        ("conv1", "conv2d", c1, in_channels * 9, True),
        ("conv2", "conv2d", c2, c1 * 9, True),
        ("conv3", "conv2d", c3, c2 * 9, True),
        ("fc1", "linear", hidden, c3 * spatial, True),
        ("fc2", "linear", n_classes, hidden, True),
    ]
    cfg = {
        "in_channels": in_channels,
        "image_size": image_size,
        "channels": list(channels),
        "hidden": hidden,
        "n_classes": n_classes,
    }
    return _descriptor("small_cnn", cfg, rows)


def mini_resnet_arch(
    in_channels: int = 1, image_size: int = 8, widths: tuple[int, int] = (8, 16), n_classes: int = 10
) -> ArchitectureDescriptor:
    w1, w2 = widths
    rows = [
        ("stem", "conv2d", w1, in_channels * 9, False),
        ("stem_bn", "batchnorm", w1, 0, True),
        ("b1_conv1", "conv2d", w1, w1 * 9, False),
        ("b1_bn1", "batchnorm", w1, 0, True),
        ("b1_conv2", "conv2d", w1, w1 * 9, False),
        ("b1_bn2", "batchnorm", w1, 0, True),
        ("b2_conv1", "conv2d", w2, w1 * 9, False),
        ("b2_bn1", "batchnorm", w2, 0, True),
        ("b2_conv2", "conv2d", w2, w2 * 9, False),
        ("b2_bn2", "batchnorm", w2, 0, True),
        ("b2_short", "conv2d", w2, w1, False),
        ("b2_short_bn", "batchnorm", w2, 0, True),
        ("fc", "linear", n_classes, w2, True),
    ]
    cfg = {"in_channels": in_channels, "image_size": image_size, "widths": list(widths), "n_classes": n_classes}
    return _descriptor("mini_resnet", cfg, rows)


ARCH_BUILDERS = {"mlp": mlp_arch, "small_cnn": small_cnn_arch, "mini_resnet": mini_resnet_arch}


def make_arch(family: str, **config) -> ArchitectureDescriptor:
    try:
        builder = ARCH_BUILDERS[family]
    except KeyError:
        raise ValidationError(f"unknown architecture family {family!r}") from None
    cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in config.items()}
    return builder(**cfg)


class MLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim):
        super().__init__()
        dims = [in_dim, *hidden, out_dim]
        for i in range(len(dims) - 1):
            setattr(self, f"fc{i}", nn.Linear(dims[i], dims[i + 1]))
        self.n = len(dims) - 1

    def forward(self, x):
        x = x.flatten(1)
        for i in range(self.n):
            x = getattr(self, f"fc{i}")(x)
            if i < self.n - 1:
                x = F.relu(x)
        return x


class SmallCNN(nn.Module):
    def __init__(self, in_channels, image_size, channels, hidden, n_classes):
        super().__init__()
        c1, c2, c3 = channels
        self.conv1 = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, padding=1)
        self.fc1 = nn.Linear(c3 * (image_size // 4) ** 2, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.conv3(x)).flatten(1)
        return self.fc2(F.relu(self.fc1(x)))


class MiniResNet(nn.Module):
    def __init__(self, in_channels, image_size, widths, n_classes):
        super().__init__()
        w1, w2 = widths
        self.stem = nn.Conv2d(in_channels, w1, 3, padding=1, bias=False)
        self.stem_bn = nn.BatchNorm2d(w1)
        self.b1_conv1 = nn.Conv2d(w1, w1, 3, padding=1, bias=False)
        self.b1_bn1 = nn.BatchNorm2d(w1)
        self.b1_conv2 = nn.Conv2d(w1, w1, 3, padding=1, bias=False)
        self.b1_bn2 = nn.BatchNorm2d(w1)
        self.b2_conv1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1, bias=False)
        self.b2_bn1 = nn.BatchNorm2d(w2)
        self.b2_conv2 = nn.Conv2d(w2, w2, 3, padding=1, bias=False)
        self.b2_bn2 = nn.BatchNorm2d(w2)
        self.b2_short = nn.Conv2d(w1, w2, 1, stride=2, bias=False)
        self.b2_short_bn = nn.BatchNorm2d(w2)
        self.fc = nn.Linear(w2, n_classes)

    def forward(self, x):
        x = F.relu(self.stem_bn(self.stem(x)))
        h = F.relu(self.b1_bn1(self.b1_conv1(x)))
        x = F.relu(x + self.b1_bn2(self.b1_conv2(h)))
        h = F.relu(self.b2_bn1(self.b2_conv1(x)))
        x = F.relu(self.b2_short_bn(self.b2_short(x)) + self.b2_bn2(self.b2_conv2(h)))
        return self.fc(x.mean(dim=(2, 3)))


def build_module(arch: ArchitectureDescriptor) -> nn.Module:
    cfg = arch.config
    if arch.family == "mlp":
        return MLP(cfg["in_dim"], cfg["hidden"], cfg["out_dim"])
    if arch.family == "small_cnn":
        return SmallCNN(cfg["in_channels"], cfg["image_size"], cfg["channels"], cfg["hidden"], cfg["n_classes"])
    if arch.family == "mini_resnet":
        return MiniResNet(cfg["in_channels"], cfg["image_size"], cfg["widths"], cfg["n_classes"])
    raise ValidationError(f"no module builder for family {arch.family!r}")


def input_shape(arch: ArchitectureDescriptor) -> tuple[int, ...]:
    cfg = arch.config
    if arch.family == "mlp":
        return (cfg["in_dim"],)
    return (cfg["in_channels"], cfg["image_size"], cfg["image_size"])


def n_outputs(arch: ArchitectureDescriptor) -> int:
    cfg = arch.config
    return cfg["out_dim"] if arch.family == "mlp" else cfg["n_classes"]


def extract(module: nn.Module, arch: ArchitectureDescriptor) -> tuple[dict, dict]:
    """Pull (tensors, buffers) in checkpoint layout out of a torch module."""
    tensors, buffers = {}, {}
    with torch.no_grad():
        for layer in arch.layers:
            m = getattr(module, layer.name)
            if layer.kind == "batchnorm":
                tensors[layer.name] = torch.stack([m.weight, m.bias]).numpy().astype(np.float32)
                buffers[layer.name] = (
                    torch.stack([m.running_mean, m.running_var]).numpy().astype(np.float32)
                )
                continue
            w = m.weight.reshape(m.weight.shape[0], -1)
            if layer.has_bias:
                w = torch.cat([w, m.bias[:, None]], dim=1)
            tensors[layer.name] = w.numpy().astype(np.float32).copy()
    return tensors, buffers


def load_into(module: nn.Module, ckpt: ModelCheckpoint) -> nn.Module:
    """Copy checkpoint weights (and buffers, when present) into ``module``."""
    with torch.no_grad():
        for layer in ckpt.arch.layers:
            m = getattr(module, layer.name)
            t = torch.from_numpy(np.asarray(ckpt.tensors[layer.name], dtype=np.float32))
            if layer.kind == "batchnorm":
                m.weight.copy_(t[0])
                m.bias.copy_(t[1])
                if layer.name in ckpt.buffers:
                    b = torch.from_numpy(np.asarray(ckpt.buffers[layer.name], dtype=np.float32))
                    m.running_mean.copy_(b[0])
                    m.running_var.copy_(b[1])
                continue
            cols = layer.fan_in
            m.weight.copy_(t[:, :cols].reshape(m.weight.shape))
            if layer.has_bias:
                m.bias.copy_(t[:, cols])
    return module


def to_module(ckpt: ModelCheckpoint) -> nn.Module:
    module = build_module(ckpt.arch)
    load_into(module, ckpt)
    module.eval()
    return module


def from_module(
    module: nn.Module, arch: ArchitectureDescriptor, ckpt_id: str, meta: CheckpointMeta
) -> ModelCheckpoint:
    tensors, buffers = extract(module, arch)
    return ModelCheckpoint(ckpt_id=ckpt_id, arch=arch, tensors=tensors, meta=meta, buffers=buffers)


def random_checkpoint(
    arch: ArchitectureDescriptor, seed: int, ckpt_id: str | None = None, dataset: str = "random"
) -> ModelCheckpoint:
    """Freshly initialised network; batch-norm affine params are jittered so they are not constant."""
    torch.manual_seed(seed)
    module = build_module(arch)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.weight.add_(0.1 * torch.randn_like(m.weight))
                m.bias.add_(0.1 * torch.randn_like(m.bias))
                m.running_mean.add_(0.1 * torch.randn_like(m.running_mean))
                m.running_var.mul_(torch.exp(0.1 * torch.randn_like(m.running_var)))
    meta = CheckpointMeta(image_dataset=dataset, epoch=0, seed=seed)
    return from_module(module, arch, ckpt_id or f"{arch.family}-rand{seed}", meta)


def has_batchnorm(arch: ArchitectureDescriptor) -> bool:
    return any(l.kind == "batchnorm" for l in arch.layers)


@torch.no_grad()
def predict(ckpt_or_module, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    module = to_module(ckpt_or_module) if isinstance(ckpt_or_module, ModelCheckpoint) else ckpt_or_module
    module.eval()
    outs = [module(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(outs) if outs else torch.zeros(0)


def accuracy(ckpt_or_module, x: torch.Tensor, y: torch.Tensor) -> float:
    if len(y) == 0:
        return float("nan")
    logits = predict(ckpt_or_module, x)
    return float((logits.argmax(1) == y).float().mean())
