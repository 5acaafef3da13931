"""Invertible mapping between checkpoints and padded token sequences.

Each layer's 2D tensor is read row by row; every row is cut into
``ceil(row_len / d_t)`` slices of width ``d_t`` and the last slice is
zero-padded. Tokens are ordered layer-major, then row-major, then
slice-major. Each token carries a position triple ``[n, l, k]``: global
sequence index, layer index and token index within its layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .zoo_store import ArchitectureDescriptor, CheckpointMeta, ModelCheckpoint, ValidationError


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerLayout:
    name: str
    layer_index: int
    offset: int  # first token of this layer in the sequence
    n_rows: int
    row_len: int
    tokens_per_row: int

    @property
    def n_tokens(self) -> int:
        return self.n_rows * self.tokens_per_row


@dataclass(frozen=True)
class SequenceLayout:
    d_t: int
    layers: tuple[LayerLayout, ...]

    @property
    def n_tokens(self) -> int:
        return sum(l.n_tokens for l in self.layers)

    def positions(self) -> np.ndarray:
        out = np.zeros((self.n_tokens, 3), dtype=np.int64)
        out[:, 0] = np.arange(self.n_tokens)
        for l in self.layers:
            sl = slice(l.offset, l.offset + l.n_tokens)
            out[sl, 1] = l.layer_index
            out[sl, 2] = np.arange(l.n_tokens)
        return out

    def mask(self) -> np.ndarray:
        out = np.zeros((self.n_tokens, self.d_t), dtype=np.float32)
        for l in self.layers:
            row = np.zeros(l.tokens_per_row * self.d_t, dtype=np.float32)
            row[: l.row_len] = 1.0
            out[l.offset : l.offset + l.n_tokens] = np.tile(
                row.reshape(l.tokens_per_row, self.d_t), (l.n_rows, 1)
            )
        return out

    def table(self) -> list[dict]:
        return [
            {
                "layer": l.name,
                "l": l.layer_index,
                "offset": l.offset,
                "rows": l.n_rows,
                "row_len": l.row_len,
                "tokens_per_row": l.tokens_per_row,
                "tokens": l.n_tokens,
            }
            for l in self.layers
        ]


@dataclass
class TokenizedModel:
    tokens: np.ndarray  # (N, d_t) float32
    positions: np.ndarray  # (N, 3) int64, columns n, l, k
    mask: np.ndarray  # (N, d_t) float32 of 0/1
    arch: ArchitectureDescriptor
    ckpt_id: str = ""
    meta: CheckpointMeta | None = None
    buffers: dict | None = None

    @property
    def d_t(self) -> int:
        return self.tokens.shape[1]

    def __len__(self) -> int:
        return self.tokens.shape[0]


_LAYOUT_CACHE: dict[tuple[str, int], SequenceLayout] = {}


def sequence_layout(arch: ArchitectureDescriptor, d_t: int) -> SequenceLayout:
    if d_t < 1:
        raise ValidationError(f"token size must be >= 1, got {d_t}")
    key = (arch.arch_id, d_t)
    if key in _LAYOUT_CACHE:
        return _LAYOUT_CACHE[key]
    layers = []
    offset = 0
    for spec in arch.layers:
        n_rows, row_len = spec.shape
        per_row = -(-row_len // d_t)
        layers.append(LayerLayout(spec.name, spec.layer_index, offset, n_rows, row_len, per_row))
        offset += n_rows * per_row
    layout = SequenceLayout(d_t, tuple(layers))
    _LAYOUT_CACHE[key] = layout
    return layout


def tokenize(ckpt: ModelCheckpoint, d_t: int) -> TokenizedModel:
    ckpt.validate()
    layout = sequence_layout(ckpt.arch, d_t)
    tokens = np.zeros((layout.n_tokens, d_t), dtype=np.float32)
    for l in layout.layers:
        w = np.asarray(ckpt.tensors[l.name], dtype=np.float32)
        padded = np.zeros((l.n_rows, l.tokens_per_row * d_t), dtype=np.float32)
        padded[:, : l.row_len] = w
        tokens[l.offset : l.offset + l.n_tokens] = padded.reshape(l.n_tokens, d_t)
    return TokenizedModel(
        tokens=tokens,
        positions=layout.positions(),
        mask=layout.mask(),
        arch=ckpt.arch,
        ckpt_id=ckpt.ckpt_id,
        meta=ckpt.meta,
        buffers={k: v.copy() for k, v in ckpt.buffers.items()},
    )


def detokenize(tm: TokenizedModel, ckpt_id: str | None = None, meta: CheckpointMeta | None = None) -> ModelCheckpoint:
    layout = sequence_layout(tm.arch, tm.d_t)
    if tm.tokens.shape[0] != layout.n_tokens:
        raise StructureError(f"expected {layout.n_tokens} tokens, got {tm.tokens.shape[0]}")
    if not np.array_equal(tm.positions, layout.positions()):
        bad = np.argwhere(tm.positions != layout.positions())
        raise StructureError(f"position triples disagree with the layout at row {int(bad[0, 0])}")
    tensors = {}
    for l in layout.layers:
        block = np.asarray(tm.tokens[l.offset : l.offset + l.n_tokens], dtype=np.float32)
        rows = block.reshape(l.n_rows, l.tokens_per_row * tm.d_t)
        tensors[l.name] = np.ascontiguousarray(rows[:, : l.row_len])
    meta = meta or tm.meta or CheckpointMeta(image_dataset="generated", epoch=0, seed=0)
    return ModelCheckpoint(
        ckpt_id=ckpt_id or tm.ckpt_id or "detokenized",
        arch=tm.arch,
        tensors=tensors,
        meta=meta,
        buffers={k: v.copy() for k, v in (tm.buffers or {}).items()},
    )
