"""Reconstruction and contrastive objectives.

Reconstruction can be computed on raw tokens or on tokens standardised per
token. Standardisation always uses the statistics of the *target* token, so
the mean and std are constants with respect to the prediction. In
``masked_per_token`` mode only signal entries (mask 1) enter the statistics;
``per_token`` also counts the padding, read as zeros.
"""
from __future__ import annotations

from enum import Enum

import torch
import torch.nn.functional as F

DEFAULT_EPS = 1e-6


class NormalizationMode(str, Enum):
    NONE = "none"
    PER_TOKEN = "per_token"
    MASKED_PER_TOKEN = "masked_per_token"


class DegenerateTokenError(ValueError):
    pass


class InsufficientNegativesError(ValueError):
    pass


def masked_token_stats(token: torch.Tensor, mask: torch.Tensor, eps: float = DEFAULT_EPS):
    """Mean and std over the signal entries of each token (last axis).

    The std is the population std plus ``eps``. Works on a single token or
    any batch of tokens.
    """
    token = torch.as_tensor(token)
    mask = torch.as_tensor(mask, dtype=token.dtype)
    count = mask.sum(dim=-1, keepdim=True)
    if bool((count == 0).any()):
        raise DegenerateTokenError("token without signal entries (all-zero mask)")
    mu = (mask * token).sum(dim=-1, keepdim=True) / count
    var = (mask * (token - mu) ** 2).sum(dim=-1, keepdim=True) / count
    sigma = torch.sqrt(var) + eps
    if token.dim() == 1:
        return mu[0], sigma[0]
    return mu, sigma


def token_stats(token: torch.Tensor, eps: float = DEFAULT_EPS):
    """Mean and std over every entry of each token, padding included."""
    mu = token.mean(dim=-1, keepdim=True)
    sigma = torch.sqrt(((token - mu) ** 2).mean(dim=-1, keepdim=True)) + eps
    return mu, sigma


def normalized_reconstruction_loss(
    target: torch.Tensor,
    pred: torch.Tensor,
    mask: torch.Tensor,
    mode: NormalizationMode | str = NormalizationMode.MASKED_PER_TOKEN,
    eps: float = DEFAULT_EPS,
) -> torch.Tensor:
    """Masked squared error, averaged over signal entries per window, then over windows.

    Inputs are ``(..., N, d_t)``; a 2D input is a single window. Token rows
    whose mask is entirely zero (window padding) are skipped; they carry no
    statistics and contribute nothing.
    """
    mode = NormalizationMode(mode)
    if target.shape != pred.shape or target.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)}, {tuple(pred.shape)}, {tuple(mask.shape)}")
    mask = mask.to(target.dtype)
    if target.dim() == 1:
        target, pred, mask = target[None], pred[None], mask[None]
    if target.dim() == 2:
        target, pred, mask = target[None], pred[None], mask[None]

    signal = mask > 0
    if mode is not NormalizationMode.NONE:
        live = signal.any(dim=-1, keepdim=True)
        if not bool(live.any()):
            raise DegenerateTokenError("window without any signal entries")
        # window-padding rows get a full mask so their stats stay finite
        stat_mask = torch.where(live, mask, torch.ones_like(mask))
        # padding is read as the zeros the tokenizer put there, whatever it holds now
        clean_target = torch.where(signal, target, torch.zeros_like(target))
        if mode is NormalizationMode.MASKED_PER_TOKEN:
            mu, sigma = masked_token_stats(clean_target, stat_mask, eps)
        else:
            mu, sigma = token_stats(clean_target, eps)
        diff = (target - mu) / sigma - (pred - mu) / sigma
    else:
        diff = target - pred
    sq = torch.where(signal, diff**2, torch.zeros_like(diff))
    per_window = sq.flatten(1).sum(dim=1) / mask.flatten(1).sum(dim=1).clamp_min(1.0)
    return per_window.mean()


def ntxent_loss(z_i: torch.Tensor, z_j: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """NT-Xent over 2B anchors; (z_i[b], z_j[b]) are the positive pairs."""
    if z_i.shape != z_j.shape:
        raise ValueError(f"view shapes differ: {tuple(z_i.shape)} vs {tuple(z_j.shape)}")
    b = z_i.shape[0]
    if b < 2:
        raise InsufficientNegativesError("NT-Xent needs a batch of at least 2")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a, p = F.normalize(z_i, dim=1), F.normalize(z_j, dim=1)
    # each view's anchors are scored by the same call whichever argument it was, so swapping is exact
    return (_anchor_terms(a, p, temperature) + _anchor_terms(p, a, temperature)) / 2


def _anchor_terms(anchors: torch.Tensor, others: torch.Tensor, temperature: float) -> torch.Tensor:
    b = anchors.shape[0]
    cross = anchors @ others.T / temperature
    own = (anchors @ anchors.T / temperature).masked_fill(
        torch.eye(b, dtype=torch.bool, device=anchors.device), float("-inf")
    )
    logits = torch.cat([cross, own], dim=1)
    return F.cross_entropy(logits, torch.arange(b, device=anchors.device))


def total_loss(
    target,
    pred,
    mask,
    z_i,
    z_j,
    gamma: float,
    temperature: float = 0.1,
    mode: NormalizationMode | str = NormalizationMode.MASKED_PER_TOKEN,
    eps: float = DEFAULT_EPS,
):
    """Returns ``(total, reconstruction, contrastive)``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    rec = normalized_reconstruction_loss(target, pred, mask, mode, eps)
    con = ntxent_loss(z_i, z_j, temperature)
    return (1.0 - gamma) * rec + gamma * con, rec, con
