"""Window sampling over tokenized zoos and the SANE training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import NormalizationMode, normalized_reconstruction_loss, ntxent_loss
from .model import Sane, SaneConfig, save_sane
from .tokenizer import TokenizedModel, tokenize
from .zoo_store import ZooManifest, ZooReader

log = logging.getLogger(__name__)


class DataConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class WindowBatch:
    tokens: torch.Tensor  # (B, W, d_t)
    positions: torch.Tensor  # (B, W, 3)
    mask: torch.Tensor  # (B, W, d_t)
    pad: torch.Tensor  # (B, W) True on window padding rows
    provenance: list[tuple[str, str]]  # (zoo_id, ckpt_id)


@dataclass
class TokenWindowSource:
    """In-memory tokenized models from one or more zoos."""

    models: list[TokenizedModel]
    zoo_of: list[str]
    d_t: int

    def __post_init__(self):
        if not self.models:
            raise DataConfigError("no models in the requested split")

    @property
    def n_tokens(self) -> int:
        return sum(len(m) for m in self.models)

    @property
    def zoo_ids(self) -> list[str]:
        return sorted(set(self.zoo_of))

    def token_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for m, z in zip(self.models, self.zoo_of):
            out[z] = out.get(z, 0) + int(m.mask.sum())
        return out

    def window(self, i: int, start: int, w: int):
        m = self.models[i]
        n = len(m)
        stop = min(start + w, n)
        tok = np.zeros((w, self.d_t), dtype=np.float32)
        pos = np.zeros((w, 3), dtype=np.int64)
        msk = np.zeros((w, self.d_t), dtype=np.float32)
        pad = np.ones(w, dtype=bool)
        k = stop - start
        tok[:k] = m.tokens[start:stop]
        pos[:k] = m.positions[start:stop]
        msk[:k] = m.mask[start:stop]
        pad[:k] = False
        if k < w:
            # padding rows continue the position count so n stays window-relative
            pos[k:, 0] = pos[0, 0] + np.arange(k, w)
        return tok, pos, msk, pad

    def draw(self, rng: np.random.Generator, model_idx: np.ndarray, w: int) -> WindowBatch:
        toks, poss, msks, pads, prov = [], [], [], [], []
        for i in model_idx:
            n = len(self.models[i])
            start = int(rng.integers(0, n - w + 1)) if n > w else 0
            t, p, m, pad = self.window(int(i), start, w)
            toks.append(t)
            poss.append(p)
            msks.append(m)
            pads.append(pad)
            prov.append((self.zoo_of[i], self.models[i].ckpt_id))
        return WindowBatch(
            torch.from_numpy(np.stack(toks)),
            torch.from_numpy(np.stack(poss)),
            torch.from_numpy(np.stack(msks)),
            torch.from_numpy(np.stack(pads)),
            prov,
        )

    def epoch_order(self, rng: np.random.Generator, w: int) -> np.ndarray:
        """Model indices for one epoch: enough windows to cover the average sequence,
        each pass a fresh permutation so every model (and zoo) is visited."""
        mean_len = self.n_tokens / len(self.models)
        passes = max(1, math.ceil(mean_len / w))
        return np.concatenate([rng.permutation(len(self.models)) for _ in range(passes)])


def build_token_dataset(
    zoos: list[tuple[ZooManifest, ZooReader]], d_t: int, split: str = "train"
) -> TokenWindowSource:
    models, zoo_of = [], []
    for manifest, reader in zoos:
        if manifest.d_t is not None and manifest.d_t != d_t:
            raise DataConfigError(f"zoo {manifest.zoo_id} declares d_t={manifest.d_t}, training uses {d_t}")
        for e in manifest.entries:
            if e.split != split:
                continue
            models.append(tokenize(reader.load(e.ckpt_id), d_t))
            zoo_of.append(e.source_zoo or manifest.zoo_id)
    if not models:
        raise DataConfigError(f"split {split!r} is empty in zoos {[m.zoo_id for m, _ in zoos]}")
    return TokenWindowSource(models, zoo_of, d_t)


def source_from_checkpoints(checkpoints, d_t: int, zoo_id: str = "memory") -> TokenWindowSource:
    return TokenWindowSource([tokenize(c, d_t) for c in checkpoints], [zoo_id] * len(checkpoints), d_t)


def _lr_lambda(cfg: SaneConfig, total_steps: int):
    warm = max(1, int(cfg.warmup_frac * total_steps))

    def f(step):
        if cfg.schedule == "constant":
            return 1.0
        if step < warm:
            return (step + 1) / warm
        progress = (step - warm) / max(1, total_steps - warm)
        return 0.5 * (1 + math.cos(math.pi * min(1.0, progress)))

    return f


def batch_loss(model: Sane, batch: WindowBatch, cfg: SaneConfig, gen: torch.Generator | None = None):
    """Returns ``(total, rec, con)`` for one batch of windows.

    View i is the clean window, view j adds Gaussian noise on signal entries;
    both views reconstruct the clean tokens.
    """
    signal = batch.mask
    noise = torch.randn(batch.tokens.shape, generator=gen) * cfg.aug_noise_sigma if gen is not None else 0.0
    view_j = batch.tokens + noise * signal
    z_i = model.encode(batch.tokens, batch.positions, batch.pad)
    z_j = model.encode(view_j, batch.positions, batch.pad)
    rec_i = model.decode(z_i, batch.positions, batch.pad)
    rec_j = model.decode(z_j, batch.positions, batch.pad)
    mode = NormalizationMode(cfg.norm_mode)
    rec = 0.5 * (
        normalized_reconstruction_loss(batch.tokens, rec_i, signal, mode, cfg.eps)
        + normalized_reconstruction_loss(batch.tokens, rec_j, signal, mode, cfg.eps)
    )
    if cfg.gamma > 0 and batch.tokens.shape[0] >= 2:
        con = ntxent_loss(model.project(z_i, batch.pad), model.project(z_j, batch.pad), cfg.temperature)
    else:
        con = torch.zeros(())
    return (1 - cfg.gamma) * rec + cfg.gamma * con, rec, con


@dataclass
class TrainResult:
    model: Sane
    log: list[dict] = field(default_factory=list)

    @property
    def epoch_losses(self) -> list[float]:
        return [r["loss"] for r in self.log if r.get("kind") == "epoch"]


def train_sane(
    cfg: SaneConfig,
    source: TokenWindowSource,
    out: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """AdamW training with warmup + cosine decay; one record per epoch.

    On a non-finite loss the last good weights are restored (and written to
    ``out`` when given) before ``TrainingDiverged`` is raised.
    """
    if source.d_t != cfg.d_t:
        raise DataConfigError(f"source tokenized at d_t={source.d_t}, config wants {cfg.d_t}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    model = Sane(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(source.epoch_order(np.random.default_rng(0), cfg.window_size)) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(cfg, steps_per_epoch * cfg.epochs))
    records: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    step = 0
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = source.epoch_order(rng, cfg.window_size)
            sums = np.zeros(3)
            n_batches = 0
            touched: dict[str, int] = {}
            t0 = time.time()
            for b in range(0, len(order), cfg.batch_size):
                batch = source.draw(rng, order[b : b + cfg.batch_size], cfg.window_size)
                for zoo, _ in batch.provenance:
                    touched[zoo] = touched.get(zoo, 0) + 1
                total, rec, con = batch_loss(model, batch, cfg, gen)
                if not torch.isfinite(total):
                    model.load_state_dict(last_good)
                    if out is not None:
                        save_sane(out, model, {"aborted_epoch": epoch, "step": step})
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, step {step} (rec={float(rec)}, con={float(con)})"
                    )
                opt.zero_grad()
                total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                sched.step()
                step += 1
                n_batches += 1
                sums += [total.item(), rec.item(), con.item()]
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
            mean = sums / max(1, n_batches)
            rec_ = {"kind": "epoch", "epoch": epoch, "step": step, "loss": mean[0], "loss_rec": mean[1],
                    "loss_con": mean[2], "lr": sched.get_last_lr()[0], "zoos": touched,
                    "seconds": round(time.time() - t0, 3)}
            records.append(rec_)
            log.info("epoch %d loss %.4f rec %.4f con %.4f", epoch, *mean)
            if log_fh:
                log_fh.write(json.dumps(rec_) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    if out is not None:
        save_sane(out, model, {"n_tokens": source.n_tokens, "zoos": source.zoo_ids, "epochs": cfg.epochs})
    return TrainResult(model, records)


@torch.no_grad()
def evaluation_loss(model: Sane, batch: WindowBatch, cfg: SaneConfig | None = None) -> float:
    """Reconstruction loss on a fixed batch in inference mode (no augmentation)."""
    cfg = cfg or model.cfg
    model.eval()
    _, rec = model(batch.tokens, batch.positions, batch.pad)
    return float(normalized_reconstruction_loss(batch.tokens, rec, batch.mask, cfg.norm_mode, cfg.eps))
