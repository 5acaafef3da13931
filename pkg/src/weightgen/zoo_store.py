"""On-disk model zoo format.

A zoo directory holds ``manifest.json`` and one raw little-endian float32
``.bin`` file per checkpoint. The manifest records, per checkpoint, the byte
offset and shape of every tensor inside its ``.bin`` file::

    {
      "format": "weightgen-zoo/1",
      "zoo_id": "...", "dataset_tag": "...", "seed": 0,
      "architectures": {"<arch_id>": {"family": ..., "config": {...}, "layers": [...]}},
      "checkpoints": [
        {"id": "...", "file": "<id>.bin", "arch_id": "...", "split": "train",
         "nbytes": 9280, "meta": {"image_dataset": ..., "epoch": 25, "seed": 3,
                                   "test_accuracy": 0.91, "model_key": "..."},
         "tensors": [{"name": "conv1", "offset": 0, "shape": [8, 10]}, ...],
         "buffers": [...]}
      ]
    }

Learned weights live in ``tensors``. Batch-norm running statistics live in
``buffers`` and are never tokenized.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

FORMAT = "weightgen-zoo/1"
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
LAYER_KINDS = ("linear", "conv2d", "batchnorm")


class ZooError(Exception):
    pass


class ValidationError(ZooError):
    pass


class StorageError(ZooError):
    pass


class ManifestParseError(ZooError):
    pass


class IntegrityError(ZooError):
    pass


class IncompatibleZooError(ZooError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    out_dim: int
    fan_in: int
    has_bias: bool
    layer_index: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.out_dim < 1 or self.fan_in < 0:
            raise ValidationError(f"layer {self.name!r}: bad dimensions")
        if self.kind == "batchnorm" and (self.fan_in != 0 or not self.has_bias):
            raise ValidationError(f"layer {self.name!r}: batchnorm needs fan_in=0, has_bias=True")

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the stored 2D tensor. Batch-norm is (2, C): gamma row, beta row."""
        if self.kind == "batchnorm":
            return (2, self.out_dim)
        return (self.out_dim, self.fan_in + int(self.has_bias))

    @property
    def n_rows(self) -> int:
        return self.shape[0]

    @property
    def row_len(self) -> int:
        return self.shape[1]


def _arch_hash(layers) -> str:
    payload = json.dumps([asdict(l) for l in layers], sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Ordered layer list plus the network family needed to run it.

    ``arch_id`` is a digest of ``layers`` alone, so equal layouts share an id.
    """

    layers: tuple[LayerSpec, ...]
    family: str = "generic"
    config: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for i, layer in enumerate(self.layers):
            if layer.layer_index != i:
                raise ValidationError(
                    f"layer {layer.name!r}: layer_index {layer.layer_index} != position {i}"
                )
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate layer names")

    @property
    def arch_id(self) -> str:
        return _arch_hash(self.layers)

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def n_params(self) -> int:
        return sum(l.shape[0] * l.shape[1] for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "config": self.config,
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureDescriptor":
        layers = [LayerSpec(**l) for l in d["layers"]]
        return cls(layers=tuple(layers), family=d.get("family", "generic"), config=d.get("config", {}))


@dataclass
class CheckpointMeta:
    image_dataset: str
    epoch: int
    seed: int
    test_accuracy: float | None = None
    model_key: str = ""  # snapshots of one training run share a key

    def __post_init__(self):
        if self.test_accuracy is not None and not 0.0 <= self.test_accuracy <= 1.0:
            raise ValidationError(f"test_accuracy {self.test_accuracy} outside [0, 1]")
        if not self.model_key:
            self.model_key = f"{self.image_dataset}-s{self.seed}"


@dataclass
class ModelCheckpoint:
    ckpt_id: str
    arch: ArchitectureDescriptor
    tensors: dict[str, np.ndarray]
    meta: CheckpointMeta
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        expected = {l.name: l.shape for l in self.arch.layers}
        extra = set(self.tensors) - set(expected)
        if extra:
            raise ValidationError(f"{self.ckpt_id}: tensors not in architecture: {sorted(extra)}")
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ValidationError(f"{self.ckpt_id}: missing tensor for layer {name!r}")
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise ValidationError(
                    f"{self.ckpt_id}: layer {name!r} has shape {tuple(t.shape)}, expected {shape}"
                )
            if not np.all(np.isfinite(t)):
                raise ValidationError(f"{self.ckpt_id}: layer {name!r} has non-finite values")

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(
            ckpt_id=self.ckpt_id,
            arch=self.arch,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            meta=CheckpointMeta(**asdict(self.meta)),
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def flat(self) -> np.ndarray:
        """All learned weights concatenated in layer order."""
        if not self.arch.layers:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([self.tensors[l.name].ravel() for l in self.arch.layers])

    def digest(self) -> str:
        """Hash of the learned weights only (buffers excluded)."""
        h = hashlib.sha256()
        for l in self.arch.layers:
            h.update(np.ascontiguousarray(self.tensors[l.name], dtype=np.float32).tobytes())
        return h.hexdigest()


@dataclass
class ZooEntry:
    ckpt_id: str
    arch_id: str
    split: str
    meta: CheckpointMeta
    file: str = ""
    root: Path | None = None
    tensor_index: list = field(default_factory=list)
    buffer_index: list = field(default_factory=list)
    nbytes: int = 0
    source_zoo: str = ""

    @property
    def path(self) -> Path:
        if self.root is None:
            raise StorageError(f"{self.ckpt_id}: entry not bound to a zoo directory")
        return self.root / self.file


@dataclass
class ZooManifest:
    zoo_id: str
    dataset_tag: str
    entries: list[ZooEntry]
    architectures: dict[str, ArchitectureDescriptor]
    seed: int = 0
    d_t: int | None = None  # token size the zoo is meant to be tokenized at

    @property
    def splits(self) -> dict[str, str]:
        return {e.ckpt_id: e.split for e in self.entries}

    def ids(self, split: str | None = None) -> list[str]:
        return [e.ckpt_id for e in self.entries if split is None or e.split == split]

    def entry(self, ckpt_id: str) -> ZooEntry:
        for e in self.entries:
            if e.ckpt_id == ckpt_id:
                return e
        raise KeyError(ckpt_id)

    def __len__(self) -> int:
        return len(self.entries)


def _split_rank(zoo_id: str, seed: int, key: str) -> str:
    return hashlib.sha256(f"{zoo_id}|{seed}|{key}".encode()).hexdigest()


def assign_splits(zoo_id: str, keys: list[str], seed: int = 0) -> dict[str, str]:
    """Assign each distinct key to train/val/test in [70, 15, 15] proportion.

    Keys are ordered by a seeded hash, so the assignment depends only on
    (zoo_id, seed, key set), never on list order.
    """
    uniq = sorted(set(keys), key=lambda k: _split_rank(zoo_id, seed, k))
    n = len(uniq)
    n_train = int(math.floor(SPLIT_FRACTIONS[0] * n + 0.5))
    n_val = int(math.floor(SPLIT_FRACTIONS[1] * n + 0.5))
    n_val = min(n_val, n - n_train)
    out = {}
    for i, k in enumerate(uniq):
        out[k] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return out


def make_manifest(
    zoo_id: str,
    dataset_tag: str,
    checkpoints: list[ModelCheckpoint],
    seed: int = 0,
    d_t: int | None = None,
) -> ZooManifest:
    """Build a manifest for in-memory checkpoints.

    Splits are drawn per training run (``meta.model_key``), so every epoch
    snapshot of one model lands in the same split.
    """
    split_of = assign_splits(zoo_id, [c.meta.model_key for c in checkpoints], seed)
    archs = {}
    entries = []
    for c in checkpoints:
        archs[c.arch.arch_id] = c.arch
        entries.append(
            ZooEntry(
                ckpt_id=c.ckpt_id,
                arch_id=c.arch.arch_id,
                split=split_of[c.meta.model_key],
                meta=CheckpointMeta(**asdict(c.meta)),
            )
        )
    return ZooManifest(zoo_id, dataset_tag, entries, archs, seed, d_t)


def _safe_filename(ckpt_id: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in ckpt_id)
    return f"{keep}.bin"


def _write_checkpoint(path: Path, ckpt: ModelCheckpoint) -> tuple[list, list, int]:
    offset = 0
    tindex, bindex = [], []
    with open(path, "wb") as fh:
        for layer in ckpt.arch.layers:
            arr = np.ascontiguousarray(ckpt.tensors[layer.name], dtype="<f4")
            fh.write(arr.tobytes())
            tindex.append({"name": layer.name, "offset": offset, "shape": list(arr.shape)})
            offset += arr.nbytes
        for name in sorted(ckpt.buffers):
            arr = np.ascontiguousarray(ckpt.buffers[name], dtype="<f4")
            fh.write(arr.tobytes())
            bindex.append({"name": name, "offset": offset, "shape": list(arr.shape)})
            offset += arr.nbytes
    return tindex, bindex, offset


def write_zoo(path: str | os.PathLike, manifest: ZooManifest, checkpoints: list[ModelCheckpoint]) -> Path:
    """Write ``checkpoints`` and ``manifest`` into directory ``path``."""
    root = Path(path)
    by_id = {c.ckpt_id: c for c in checkpoints}
    if set(by_id) != set(manifest.ids()) or len(by_id) != len(checkpoints):
        raise ValidationError("manifest entries and checkpoint list disagree")
    for c in checkpoints:
        c.validate()
        if c.arch.arch_id not in manifest.architectures:
            raise ValidationError(f"{c.ckpt_id}: architecture {c.arch.arch_id} not in manifest")
    try:
        root.mkdir(parents=True, exist_ok=True)
        records = []
        used = set()
        for e in manifest.entries:
            fname = _safe_filename(e.ckpt_id)
            if fname in used:
                raise ValidationError(f"file name collision for {e.ckpt_id!r}")
            used.add(fname)
            tindex, bindex, nbytes = _write_checkpoint(root / fname, by_id[e.ckpt_id])
            records.append(
                {
                    "id": e.ckpt_id,
                    "file": fname,
                    "arch_id": e.arch_id,
                    "split": e.split,
                    "nbytes": nbytes,
                    "meta": asdict(e.meta),
                    "tensors": tindex,
                    "buffers": bindex,
                    **({"source_zoo": e.source_zoo} if e.source_zoo else {}),
                }
            )
        doc = {
            "format": FORMAT,
            "zoo_id": manifest.zoo_id,
            "dataset_tag": manifest.dataset_tag,
            "seed": manifest.seed,
            "d_t": manifest.d_t,
            "architectures": {k: a.to_dict() for k, a in sorted(manifest.architectures.items())},
            "checkpoints": records,
        }
        tmp = root / "manifest.json.tmp"
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
        tmp.replace(root / "manifest.json")
    except OSError as exc:
        raise StorageError(f"writing zoo at {root}: {exc}") from exc
    return root


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ManifestParseError(f"{where}: missing field {key!r}")
    return d[key]


def parse_manifest(doc: dict, root: Path | None = None) -> ZooManifest:
    if doc.get("format") != FORMAT:
        raise ManifestParseError(f"format: expected {FORMAT!r}, got {doc.get('format')!r}")
    zoo_id = _require(doc, "zoo_id", "manifest")
    try:
        archs = {
            k: ArchitectureDescriptor.from_dict(v)
            for k, v in _require(doc, "architectures", "manifest").items()
        }
    except (TypeError, KeyError, ZooError) as exc:
        raise ManifestParseError(f"architectures: {exc}") from exc
    for k, a in archs.items():
        if a.arch_id != k:
            raise ManifestParseError(f"architectures.{k}: layers hash to {a.arch_id}")
    entries = []
    for i, rec in enumerate(_require(doc, "checkpoints", "manifest")):
        where = f"checkpoints[{i}]"
        split = _require(rec, "split", where)
        if split not in SPLITS:
            raise ManifestParseError(f"{where}.split: invalid value {split!r}")
        arch_id = _require(rec, "arch_id", where)
        if arch_id not in archs:
            raise ManifestParseError(f"{where}.arch_id: unknown architecture {arch_id!r}")
        try:
            meta = CheckpointMeta(**_require(rec, "meta", where))
        except (TypeError, ZooError) as exc:
            raise ManifestParseError(f"{where}.meta: {exc}") from exc
        entries.append(
            ZooEntry(
                ckpt_id=_require(rec, "id", where),
                arch_id=arch_id,
                split=split,
                meta=meta,
                file=_require(rec, "file", where),
                root=root,
                tensor_index=_require(rec, "tensors", where),
                buffer_index=rec.get("buffers", []),
                nbytes=_require(rec, "nbytes", where),
                source_zoo=rec.get("source_zoo", ""),
            )
        )
    return ZooManifest(
        zoo_id, doc.get("dataset_tag", ""), entries, archs, doc.get("seed", 0), doc.get("d_t")
    )


class ZooReader:
    """Lazy checkpoint accessor. Each ``load`` reads one ``.bin`` file."""

    def __init__(self, manifest: ZooManifest):
        self.manifest = manifest

    def load(self, ckpt_id: str) -> ModelCheckpoint:
        e = self.manifest.entry(ckpt_id)
        path = e.path
        if not path.exists():
            raise IntegrityError(f"{ckpt_id}: tensor file {path.name} is missing")
        size = path.stat().st_size
        if size != e.nbytes:
            raise IntegrityError(
                f"{ckpt_id}: tensor file {path.name} has {size} bytes, expected {e.nbytes}"
            )
        raw = np.fromfile(path, dtype="<f4")

        def take(index):
            out = {}
            for t in index:
                start = t["offset"] // 4
                n = int(np.prod(t["shape"]))
                out[t["name"]] = raw[start : start + n].reshape(t["shape"]).astype(np.float32)
            return out

        ckpt = ModelCheckpoint(
            ckpt_id=e.ckpt_id,
            arch=self.manifest.architectures[e.arch_id],
            tensors=take(e.tensor_index),
            meta=CheckpointMeta(**asdict(e.meta)),
            buffers=take(e.buffer_index),
        )
        ckpt.validate()
        return ckpt

    def iter(self, split: str | None = None) -> Iterator[ModelCheckpoint]:
        for cid in self.manifest.ids(split):
            yield self.load(cid)

    def load_all(self, split: str | None = None) -> list[ModelCheckpoint]:
        return list(self.iter(split))


def read_zoo(path: str | os.PathLike) -> tuple[ZooManifest, ZooReader]:
    root = Path(path)
    index = root / "manifest.json"
    if not index.exists():
        raise IntegrityError(f"{root}: no manifest.json")
    try:
        doc = json.loads(index.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"{index}: invalid JSON ({exc})") from exc
    manifest = parse_manifest(doc, root=root)
    return manifest, ZooReader(manifest)


def merge_zoos(zoos: list[ZooManifest], d_t: int | None = None) -> ZooManifest:
    """Union of several zoos; every checkpoint keeps its split and dataset tag.

    Zoos are compatible when they agree on the token size (``d_t`` argument
    plus any ``d_t`` recorded in the manifests). Layer shapes never conflict
    because rows are sliced and padded independently.
    """
    if not zoos:
        raise IncompatibleZooError("merge_zoos needs at least one zoo")
    sizes = {z.d_t for z in zoos if z.d_t is not None}
    if d_t is not None:
        sizes.add(d_t)
    if len(sizes) > 1:
        raise IncompatibleZooError(f"zoos declare different token sizes {sorted(sizes)}")
    if any(s < 1 for s in sizes):
        raise IncompatibleZooError(f"token size {sorted(sizes)} is not positive")
    archs: dict[str, ArchitectureDescriptor] = {}
    entries: list[ZooEntry] = []
    seen = set()
    for z in zoos:
        archs.update(z.architectures)
        for e in z.entries:
            if e.ckpt_id in seen:
                raise IncompatibleZooError(f"duplicate checkpoint id {e.ckpt_id!r} across zoos")
            seen.add(e.ckpt_id)
            entries.append(replace(e, source_zoo=e.source_zoo or z.zoo_id))
    return ZooManifest(
        zoo_id="+".join(sorted(z.zoo_id for z in zoos)),
        dataset_tag="+".join(sorted({z.dataset_tag for z in zoos})),
        entries=entries,
        architectures=archs,
        seed=zoos[0].seed,
        d_t=sizes.pop() if sizes else None,
    )
