"""Train populations of small classifiers and store them as zoos."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nets
from .data import ImageDataset, adapt_inputs
from .zoo_store import (
    ArchitectureDescriptor,
    CheckpointMeta,
    ModelCheckpoint,
    ZooError,
    ZooManifest,
    make_manifest,
    write_zoo,
)

log = logging.getLogger(__name__)

DEFAULT_GRID = {"lr": [3e-3, 1e-2], "weight_decay": [0.0, 1e-2], "init": ["kaiming_uniform", "kaiming_normal"]}


@dataclass
class PopulationSpec:
    arch: ArchitectureDescriptor
    dataset_tag: str
    n_models: int
    epochs: int = 25
    seed_base: int = 0
    hyperparameter_grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))
    batch_size: int = 64
    keep_epochs: list[int] | None = None
    zoo_id: str | None = None
    d_t: int | None = None
    # every model starts from this init when set; runs then differ by data order and hyperparameters
    init_seed: int | None = None

    def __post_init__(self):
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in self.hyperparameter_grid:
            if name not in ("lr", "weight_decay", "init"):
                raise ValueError(f"unknown hyperparameter {name!r}")

    @property
    def retained_epochs(self) -> list[int]:
        if self.keep_epochs is not None:
            return sorted(e for e in self.keep_epochs if 1 <= e <= self.epochs)
        if self.epochs >= 25:
            return list(range(21, 26))
        return list(range(1, self.epochs + 1))

    def grid_points(self) -> list[dict]:
        grid = {**DEFAULT_GRID, **self.hyperparameter_grid}
        keys = sorted(grid)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]

    def hyperparameters(self, i: int) -> dict:
        points = self.grid_points()
        return points[i % len(points)]


@dataclass
class PopulationResult:
    manifest: ZooManifest
    checkpoints: list[ModelCheckpoint]
    failures: list[dict]

    def accuracy_summary(self) -> dict:
        last = {}
        for c in self.checkpoints:
            if c.meta.model_key not in last or c.meta.epoch > last[c.meta.model_key].meta.epoch:
                last[c.meta.model_key] = c
        accs = torch.tensor([c.meta.test_accuracy for c in last.values()], dtype=torch.float64)
        if len(accs) == 0:
            return {"n_models": 0, "mean": float("nan"), "std": float("nan")}
        std = float(accs.std(unbiased=False))
        return {"n_models": len(accs), "mean": float(accs.mean()), "std": std}


def _init(module: nn.Module, scheme: str) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            if scheme == "kaiming_uniform":
                m.reset_parameters()
            elif scheme == "kaiming_normal":
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            elif scheme == "xavier":
                nn.init.xavier_uniform_(m.weight)
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
            if m.bias is not None and scheme != "kaiming_uniform":
                nn.init.zeros_(m.bias)


class TrainingDiverged(RuntimeError):
    pass


def train_classifier(
    arch: ArchitectureDescriptor,
    data: ImageDataset,
    epochs: int,
    seed: int,
    lr: float = 3e-3,
    weight_decay: float = 0.0,
    init: str = "kaiming_uniform",
    batch_size: int = 64,
    keep_epochs: list[int] | None = None,
    init_seed: int | None = None,
):
    """Train one network with AdamW, yielding ``(epoch, module)`` at each kept epoch.

    The yielded module keeps training afterwards; extract weights before resuming.
    ``init_seed`` fixes the initial weights independently of the data order.
    """
    torch.manual_seed(seed if init_seed is None else init_seed)
    module = nets.build_module(arch)
    _init(module, init)
    torch.manual_seed(seed)
    x = prepare_inputs(arch, data.x_train)
    y = data.y_train
    opt = torch.optim.AdamW(module.parameters(), lr=lr, weight_decay=weight_decay)
    g = torch.Generator().manual_seed(seed)
    keep = set(keep_epochs or [epochs])
    for epoch in range(1, epochs + 1):
        module.train()
        order = torch.randperm(len(y), generator=g)
        for i in range(0, len(y), batch_size):
            idx = order[i : i + batch_size]
            loss = F.cross_entropy(module(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        if epoch in keep:
            module.eval()
            yield epoch, module


def prepare_inputs(arch: ArchitectureDescriptor, x: torch.Tensor) -> torch.Tensor:
    """Adapt image batches to the network's native input (flattened for MLPs)."""
    shape = nets.input_shape(arch)
    if arch.family == "mlp":
        x = x.flatten(1)
        if x.shape[1] != shape[0]:
            raise ValueError(f"MLP expects {shape[0]} inputs, images flatten to {x.shape[1]}")
        return x
    return adapt_inputs(x, shape[0], shape[1])


def train_population(spec: PopulationSpec, data: ImageDataset, out: str | Path | None = None) -> PopulationResult:
    """Train ``spec.n_models`` networks and keep their snapshots at the retained epochs.

    Models whose loss turns non-finite are excluded and listed in ``failures``.
    When ``out`` is given the zoo is written there.
    """
    zoo_id = spec.zoo_id or f"{spec.arch.family}-{spec.dataset_tag}"
    x_test = prepare_inputs(spec.arch, data.x_test)
    checkpoints: list[ModelCheckpoint] = []
    failures: list[dict] = []
    retained = spec.retained_epochs
    for i in range(spec.n_models):
        hp = spec.hyperparameters(i)
        seed = spec.seed_base + i
        key = f"{zoo_id}-m{i:03d}"
        snapshots = []
        try:
            for epoch, module in train_classifier(
                spec.arch, data, spec.epochs, seed, lr=hp["lr"], weight_decay=hp["weight_decay"],
                init=hp["init"], batch_size=spec.batch_size, keep_epochs=retained,
                init_seed=spec.init_seed,
            ):
                acc = nets.accuracy(module, x_test, data.y_test)
                meta = CheckpointMeta(image_dataset=spec.dataset_tag, epoch=epoch, seed=seed,
                                      test_accuracy=acc, model_key=key)
                ckpt = nets.from_module(module, spec.arch, f"{key}-e{epoch:02d}", meta)
                ckpt.validate()
                snapshots.append(ckpt)
        except (TrainingDiverged, ZooError) as exc:
            failures.append({"model": key, "seed": seed, "hyperparameters": hp, "error": str(exc)})
            log.warning("model %s excluded: %s", key, exc)
            continue
        checkpoints.extend(snapshots)
        if snapshots and math.isfinite(snapshots[-1].meta.test_accuracy):
            log.info("%s hp=%s acc=%.3f", key, hp, snapshots[-1].meta.test_accuracy)
    if failures:
        log.warning("%d of %d models failed to train", len(failures), spec.n_models)
    manifest = make_manifest(zoo_id, spec.dataset_tag, checkpoints, seed=spec.seed_base, d_t=spec.d_t)
    if out is not None:
        write_zoo(out, manifest, checkpoints)
    return PopulationResult(manifest, checkpoints, failures)
