"""Zero-shot weight generation from anchor models.

Candidates are assembled token by token: every anchor is encoded, each token
position takes its latent from one uniformly chosen anchor, isotropic
Gaussian noise is added and the sequence is decoded and detokenized.
Candidates then get their batch-norm statistics recomputed and the best ones
on validation data are kept. Trainable weights are never updated here.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from . import nets
from .model import Sane
from .tokenizer import detokenize, sequence_layout, tokenize
from .zoo_store import ArchitectureDescriptor, CheckpointMeta, ModelCheckpoint, ValidationError

log = logging.getLogger(__name__)


class ConditioningError(RuntimeError):
    pass


@dataclass
class SampleSpec:
    target_arch: ArchitectureDescriptor
    anchors: list[ModelCheckpoint]
    n_candidates: int = 200
    n_keep: int = 10
    latent_noise_sigma: float | None = None  # None: relative_noise x per-dimension anchor latent std
    relative_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.anchors:
            raise ValidationError("at least one anchor is required")
        if not 1 <= self.n_keep <= self.n_candidates:
            raise ValidationError(f"need 1 <= n_keep ({self.n_keep}) <= n_candidates ({self.n_candidates})")
        if self.latent_noise_sigma is not None and self.latent_noise_sigma < 0:
            raise ValidationError("latent_noise_sigma must be nonnegative")


@dataclass
class CandidateSet:
    candidates: list[ModelCheckpoint]
    choices: np.ndarray  # (n_candidates, n_tokens) anchor index per token position
    noise_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _check_anchor(anchor: ModelCheckpoint, arch: ArchitectureDescriptor, d_t: int) -> None:
    if anchor.arch.arch_id != arch.arch_id:
        raise ValidationError(
            f"anchor {anchor.ckpt_id} has architecture {anchor.arch.arch_id}, target is {arch.arch_id}"
        )
    sequence_layout(anchor.arch, d_t)


@torch.no_grad()
def generate_candidates(sane: Sane, spec: SampleSpec, return_choices: bool = False):
    """Build ``spec.n_candidates`` checkpoints by per-token anchor subsampling."""
    d_t = sane.cfg.d_t
    for a in spec.anchors:
        _check_anchor(a, spec.target_arch, d_t)
    sane.eval()
    toks = [tokenize(a, d_t) for a in spec.anchors]
    positions = toks[0].positions
    latents = torch.stack([sane.embed_sequence(t.tokens, t.positions) for t in toks])  # (A, N, d_lat)
    n_anchor, n_tok, d_lat = latents.shape

    if spec.latent_noise_sigma is None:
        per_dim = latents.reshape(-1, d_lat).std(dim=0, unbiased=False)
        sigma = spec.relative_noise * per_dim
    else:
        sigma = torch.full((d_lat,), float(spec.latent_noise_sigma))

    rng = np.random.default_rng(spec.seed)
    gen = torch.Generator().manual_seed(spec.seed)
    choices = rng.integers(0, n_anchor, size=(spec.n_candidates, n_tok))
    rows = torch.arange(n_tok)
    template = toks[0]
    candidates = []
    for c in range(spec.n_candidates):
        z = latents[torch.from_numpy(choices[c]), rows]
        if bool((sigma > 0).any()):
            z = z + torch.randn(z.shape, generator=gen) * sigma
        recon = sane.decode_sequence(z, positions).numpy().astype(np.float32)
        template.tokens = recon
        meta = CheckpointMeta(image_dataset=spec.anchors[0].meta.image_dataset, epoch=0,
                              seed=spec.seed, model_key=f"sample-s{spec.seed}-c{c:04d}")
        ckpt = detokenize(template, ckpt_id=f"sample-s{spec.seed}-c{c:04d}", meta=meta)
        ckpt.buffers = _default_buffers(spec.target_arch)
        candidates.append(ckpt)
    if return_choices:
        return CandidateSet(candidates, choices, sigma.numpy())
    return candidates


def reconstruct(sane: Sane, ckpt: ModelCheckpoint) -> ModelCheckpoint:
    """Pass a checkpoint through the encoder and decoder (batch-norm buffers copied over)."""
    tm = tokenize(ckpt, sane.cfg.d_t)
    with torch.no_grad():
        sane.eval()
        z = sane.embed_sequence(tm.tokens, tm.positions)
        tm.tokens = sane.decode_sequence(z, tm.positions).numpy().astype(np.float32)
    out = detokenize(tm, ckpt_id=f"{ckpt.ckpt_id}-recon", meta=ckpt.meta)
    out.buffers = {k: v.copy() for k, v in ckpt.buffers.items()}
    return out


def _default_buffers(arch: ArchitectureDescriptor) -> dict[str, np.ndarray]:
    return {
        l.name: np.stack([np.zeros(l.out_dim), np.ones(l.out_dim)]).astype(np.float32)
        for l in arch.layers
        if l.kind == "batchnorm"
    }


@torch.no_grad()
def condition_batchnorm(ckpt: ModelCheckpoint, data: Iterable[torch.Tensor], n_batches: int | None = None) -> ModelCheckpoint:
    """Recompute batch-norm running statistics with forward passes.

    Running mean/var become the cumulative average of the per-batch moments
    over the first ``n_batches`` batches. Learned weights are copied through
    untouched. Architectures without batch-norm are returned unchanged.
    """
    if not nets.has_batchnorm(ckpt.arch):
        return ckpt
    module = nets.to_module(ckpt)
    bns = [m for m in module.modules() if isinstance(m, nn.BatchNorm2d)]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    module.train()
    seen = 0
    for x in data:
        if n_batches is not None and seen >= n_batches:
            break
        module(x)
        seen += 1
    if seen == 0:
        raise ConditioningError(f"{ckpt.ckpt_id}: no data for batch-norm conditioning")
    _, buffers = nets.extract(module, ckpt.arch)
    out = ckpt.copy()
    out.buffers = buffers
    return out


def select_candidates(
    candidates: list[ModelCheckpoint], x_val: torch.Tensor, y_val: torch.Tensor, n_keep: int
) -> list[tuple[ModelCheckpoint, float]]:
    """Rank by validation accuracy (ties: lower index first) and keep ``n_keep``."""
    scored = [(nets.accuracy(c, x_val, y_val), i, c) for i, c in enumerate(candidates)]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(c, acc) for acc, _, c in scored[:n_keep]]


def sample_models(
    sane: Sane,
    spec: SampleSpec,
    x_cond: torch.Tensor,
    x_val: torch.Tensor,
    y_val: torch.Tensor,
    cond_batch_size: int = 256,
    n_cond_batches: int | None = None,
) -> list[tuple[ModelCheckpoint, float]]:
    """Generate, condition and select; returns the survivors with validation scores."""
    cands = generate_candidates(sane, spec)
    conditioned = [
        condition_batchnorm(c, _batches(x_cond, cond_batch_size), n_cond_batches) for c in cands
    ]
    return select_candidates(conditioned, x_val, y_val, spec.n_keep)


def _batches(x: torch.Tensor, size: int):
    for i in range(0, len(x), size):
        yield x[i : i + size]
