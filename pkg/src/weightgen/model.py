"""Sequence autoencoder over weight tokens.

The encoder embeds each token, adds three learned position tables (index
within the window, layer index, token index within the layer), runs a
pre-norm transformer stack and maps to ``d_lat``. The decoder mirrors it
back to ``d_t``. A projection head pools a window's latents into a small
vector for the contrastive loss and is never on the reconstruction path.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .losses import NormalizationMode


class ConfigError(ValueError):
    pass


@dataclass
class SaneConfig:
    d_t: int = 289
    window_size: int = 32
    d_model: int = 1024
    d_lat: int = 128
    n_layers: int = 4
    n_heads: int = 8
    d_proj: int = 32
    gamma: float = 0.05
    temperature: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 3e-9
    batch_size: int = 32
    epochs: int = 50
    aug_noise_sigma: float = 0.01
    eps: float = 1e-6
    norm_mode: str = NormalizationMode.MASKED_PER_TOKEN.value
    max_layers: int = 64
    max_k: int = 512
    dropout: float = 0.0
    warmup_frac: float = 0.05
    schedule: str = "cosine"  # or "constant"
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, field, msg):
            if not cond:
                raise ConfigError(f"{field}: {msg}")

        need(self.d_t >= 1, "d_t", "must be >= 1")
        need(self.window_size >= 1, "window_size", "must be >= 1")
        need(self.n_heads >= 1 and self.d_model % self.n_heads == 0, "d_model", "must be divisible by n_heads")
        need(self.d_lat >= 2, "d_lat", "must be >= 2")
        need(1 <= self.d_proj < self.d_lat, "d_proj", "must be positive and smaller than d_lat")
        need(0.0 <= self.gamma <= 1.0, "gamma", "must lie in [0, 1]")
        need(self.temperature > 0, "temperature", "must be positive")
        need(self.eps > 0, "eps", "must be positive")
        need(self.lr > 0, "lr", "must be positive")
        need(self.weight_decay >= 0, "weight_decay", "must be nonnegative")
        need(self.aug_noise_sigma >= 0, "aug_noise_sigma", "must be nonnegative")
        need(self.batch_size >= 1 and self.epochs >= 1, "batch_size/epochs", "must be >= 1")
        need(self.schedule in ("cosine", "constant"), "schedule", "must be 'cosine' or 'constant'")
        NormalizationMode(self.norm_mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SaneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SaneConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def cnn_reference(cls, **overrides) -> "SaneConfig":
        base = dict(d_t=289, window_size=32, d_model=1024, d_lat=128, n_layers=4, n_heads=8,
                    epochs=50, lr=1e-4, weight_decay=3e-9, batch_size=32)
        return cls(**{**base, **overrides})

    @classmethod
    def resnet_reference(cls, **overrides) -> "SaneConfig":
        base = dict(d_t=288, window_size=256, d_model=2048, d_lat=128, n_layers=8, n_heads=8,
                    epochs=60, lr=2e-5, weight_decay=3e-9, batch_size=32)
        return cls(**{**base, **overrides})

    @classmethod
    def toy(cls, **overrides) -> "SaneConfig":
        base = dict(d_t=32, window_size=32, d_model=64, d_lat=48, d_proj=16, n_layers=2, n_heads=4,
                    epochs=30, lr=1e-3, weight_decay=3e-9, batch_size=16)
        return cls(**{**base, **overrides})


class _Positions(nn.Module):
    def __init__(self, cfg: SaneConfig, width: int):
        super().__init__()
        self.n = nn.Embedding(cfg.window_size, width)
        self.l = nn.Embedding(cfg.max_layers, width)
        self.k = nn.Embedding(cfg.max_k, width)
        for emb in (self.n, self.l, self.k):
            nn.init.normal_(emb.weight, std=0.02)

    def forward(self, positions: torch.Tensor) -> torch.Tensor:
        n = positions[..., 0] - positions[..., :1, 0]
        n = torch.remainder(n, self.n.num_embeddings)
        l = torch.remainder(positions[..., 1], self.l.num_embeddings)
        k = torch.remainder(positions[..., 2], self.k.num_embeddings)
        return self.n(n) + self.l(l) + self.k(k)


def _stack(cfg: SaneConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=cfg.d_model,
        nhead=cfg.n_heads,
        dim_feedforward=4 * cfg.d_model,
        dropout=cfg.dropout,
        activation="gelu",
        batch_first=True,
        norm_first=True,
    )
    return nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)


class Sane(nn.Module):
    def __init__(self, cfg: SaneConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_in = nn.Linear(cfg.d_t, cfg.d_model)
        self.enc_pos = _Positions(cfg, cfg.d_model)
        self.encoder = _stack(cfg)
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.enc_out = nn.Linear(cfg.d_model, cfg.d_lat)

        self.dec_in = nn.Linear(cfg.d_lat, cfg.d_model)
        self.dec_pos = _Positions(cfg, cfg.d_model)
        self.decoder = _stack(cfg)
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.dec_out = nn.Linear(cfg.d_model, cfg.d_t)

        self.projector = nn.Sequential(
            nn.Linear(cfg.d_lat, cfg.d_lat), nn.GELU(), nn.Linear(cfg.d_lat, cfg.d_proj)
        )

    @staticmethod
    def _batched(x):
        return (x[None], True) if x.dim() == 2 else (x, False)

    def _check(self, tokens, positions):
        if tokens.shape[-1] != self.cfg.d_t:
            raise ValueError(f"token width {tokens.shape[-1]} != d_t {self.cfg.d_t}")
        if tokens.shape[-2] > self.cfg.window_size:
            raise ValueError(f"window length {tokens.shape[-2]} exceeds window_size {self.cfg.window_size}")
        if positions.shape[:-1] != tokens.shape[:-1] or positions.shape[-1] != 3:
            raise ValueError("positions must be (..., N, 3) matching tokens")

    def encode(self, tokens: torch.Tensor, positions: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        """(B, N, d_t) tokens -> (B, N, d_lat) latents. ``pad`` marks window padding rows."""
        self._check(tokens, positions)
        tokens, single = self._batched(tokens)
        positions, _ = self._batched(positions)
        if pad is not None and pad.dim() == 1:
            pad = pad[None]
        h = self.enc_in(tokens) + self.enc_pos(positions)
        h = self.encoder(h, src_key_padding_mask=pad)
        z = self.enc_out(self.enc_norm(h))
        return z[0] if single else z

    def decode(self, z: torch.Tensor, positions: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        if z.shape[-1] != self.cfg.d_lat:
            raise ValueError(f"latent width {z.shape[-1]} != d_lat {self.cfg.d_lat}")
        z, single = self._batched(z)
        positions, _ = self._batched(positions)
        if pad is not None and pad.dim() == 1:
            pad = pad[None]
        h = self.dec_in(z) + self.dec_pos(positions)
        h = self.decoder(h, src_key_padding_mask=pad)
        out = self.dec_out(self.dec_norm(h))
        return out[0] if single else out

    def project(self, z: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        """Pool each window's latents (ignoring padding rows) and project to ``d_proj``."""
        z, single = self._batched(z)
        if pad is None:
            pooled = z.mean(dim=1)
        else:
            if pad.dim() == 1:
                pad = pad[None]
            keep = (~pad).to(z.dtype)[..., None]
            pooled = (z * keep).sum(dim=1) / keep.sum(dim=1).clamp_min(1.0)
        out = self.projector(pooled)
        return out[0] if single else out

    def forward(self, tokens, positions, pad=None):
        z = self.encode(tokens, positions, pad)
        return z, self.decode(z, positions, pad)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def embed_sequence(self, tokens: np.ndarray | torch.Tensor, positions) -> torch.Tensor:
        """Encode a whole model sequence in consecutive windows of ``window_size``."""
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.float32)
        positions = torch.as_tensor(np.asarray(positions), dtype=torch.long)
        w = self.cfg.window_size
        parts = [self.encode(tokens[s : s + w], positions[s : s + w]) for s in range(0, len(tokens), w)]
        return torch.cat(parts) if parts else torch.zeros(0, self.cfg.d_lat)

    @torch.no_grad()
    def decode_sequence(self, z: torch.Tensor, positions) -> torch.Tensor:
        positions = torch.as_tensor(np.asarray(positions), dtype=torch.long)
        w = self.cfg.window_size
        parts = [self.decode(z[s : s + w], positions[s : s + w]) for s in range(0, len(z), w)]
        return torch.cat(parts) if parts else torch.zeros(0, self.cfg.d_t)


def save_sane(path: str | os.PathLike, model: Sane, extra: dict | None = None) -> Path:
    """Write ``sane.json`` (config + tensor index) and ``sane.bin`` (little-endian float32)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(root / "sane.bin", "wb") as fh:
        for name, t in model.state_dict().items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
            fh.write(arr.tobytes())
            index.append({"name": name, "offset": offset, "shape": list(arr.shape)})
            offset += arr.nbytes
    doc = {"format": "weightgen-sane/1", "config": model.cfg.to_dict(), "tensors": index,
           "nbytes": offset, "extra": extra or {}}
    (root / "sane.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return root


def load_sane(path: str | os.PathLike) -> tuple[Sane, dict]:
    root = Path(path)
    doc = json.loads((root / "sane.json").read_text())
    cfg = SaneConfig.from_dict(doc["config"])
    raw = np.fromfile(root / "sane.bin", dtype="<f4")
    if raw.nbytes != doc["nbytes"]:
        raise IOError(f"{root / 'sane.bin'}: {raw.nbytes} bytes, expected {doc['nbytes']}")
    state = {}
    for t in doc["tensors"]:
        start = t["offset"] // 4
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        state[t["name"]] = torch.from_numpy(raw[start : start + n].reshape(t["shape"]).copy())
    model = Sane(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, doc.get("extra", {})
