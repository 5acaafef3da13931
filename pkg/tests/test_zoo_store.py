import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weightgen import nets
from weightgen.zoo_store import (
    ArchitectureDescriptor,
    CheckpointMeta,
    IncompatibleZooError,
    IntegrityError,
    LayerSpec,
    ManifestParseError,
    ModelCheckpoint,
    StorageError,
    ValidationError,
    assign_splits,
    make_manifest,
    merge_zoos,
    read_zoo,
    write_zoo,
)


def _zoo(arch, n, zoo_id="z", dataset="digits", seed=0):
    ckpts = [nets.random_checkpoint(arch, i, f"{zoo_id}-{i:03d}", dataset) for i in range(n)]
    for i, c in enumerate(ckpts):
        c.meta.model_key = f"{zoo_id}-m{i}"
    return make_manifest(zoo_id, dataset, ckpts, seed=seed), ckpts


def _bits_equal(a: ModelCheckpoint, b: ModelCheckpoint) -> bool:
    same = a.tensors.keys() == b.tensors.keys() and a.buffers.keys() == b.buffers.keys()
    return same and all(
        a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors
    ) and all(a.buffers[k].tobytes() == b.buffers[k].tobytes() for k in a.buffers)


def test_layer_spec_shapes():
    assert LayerSpec("fc", "linear", 3, 5, True, 0).shape == (3, 6)
    assert LayerSpec("c", "conv2d", 4, 18, False, 0).shape == (4, 18)
    assert LayerSpec("bn", "batchnorm", 7, 0, True, 0).shape == (2, 7)
    with pytest.raises(ValidationError):
        LayerSpec("bn", "batchnorm", 7, 3, True, 0)
    with pytest.raises(ValidationError):
        LayerSpec("x", "attention", 7, 3, True, 0)


def test_layer_indices_must_be_consecutive():
    with pytest.raises(ValidationError):
        ArchitectureDescriptor((LayerSpec("a", "linear", 2, 2, True, 1),))


def test_arch_id_depends_only_on_layers():
    a = nets.mlp_arch()
    b = ArchitectureDescriptor(a.layers, family="other", config={"x": 1})
    assert a.arch_id == b.arch_id
    assert nets.mlp_arch(hidden=(12, 11)).arch_id != a.arch_id


def test_checkpoint_validation(mlp_arch):
    c = nets.random_checkpoint(mlp_arch, 0)
    c.validate()
    bad = c.copy()
    bad.tensors["fc0"] = bad.tensors["fc0"][:, :-1]
    with pytest.raises(ValidationError, match="fc0"):
        bad.validate()
    bad = c.copy()
    bad.tensors["fc1"][0, 0] = np.nan
    with pytest.raises(ValidationError, match="non-finite"):
        bad.validate()
    bad = c.copy()
    bad.tensors["extra"] = np.zeros((1, 1), np.float32)
    with pytest.raises(ValidationError, match="not in architecture"):
        bad.validate()


def test_meta_accuracy_range():
    with pytest.raises(ValidationError):
        CheckpointMeta("d", 1, 0, test_accuracy=1.5)


def test_empty_zoo_round_trip(tmp_path):
    m = make_manifest("empty", "digits", [])
    write_zoo(tmp_path / "z", m, [])
    assert sorted(p.name for p in (tmp_path / "z").iterdir()) == ["manifest.json"]
    m2, reader = read_zoo(tmp_path / "z")
    assert len(m2) == 0 and reader.load_all() == []


def test_single_mlp_round_trip_bit_exact(tmp_path):
    arch = nets.mlp_arch(in_dim=4, hidden=(), out_dim=3)
    m, ckpts = _zoo(arch, 1)
    write_zoo(tmp_path / "z", m, ckpts)
    m2, reader = read_zoo(tmp_path / "z")
    assert _bits_equal(reader.load(ckpts[0].ckpt_id), ckpts[0])
    assert m2.entries[0].meta == m.entries[0].meta


def test_batchnorm_checkpoint_round_trip_keeps_buffers(tmp_path, resnet_arch):
    m, ckpts = _zoo(resnet_arch, 3)
    write_zoo(tmp_path / "z", m, ckpts)
    m2, reader = read_zoo(tmp_path / "z")
    for c in ckpts:
        back = reader.load(c.ckpt_id)
        assert _bits_equal(back, c)
        assert set(back.buffers) == {l.name for l in resnet_arch.layers if l.kind == "batchnorm"}
    assert m2.splits == m.splits
    assert m2.zoo_id == m.zoo_id and m2.dataset_tag == m.dataset_tag


def test_binary_files_are_little_endian_float32(tmp_path, mlp_arch):
    m, ckpts = _zoo(mlp_arch, 1)
    write_zoo(tmp_path / "z", m, ckpts)
    doc = json.loads((tmp_path / "z" / "manifest.json").read_text())
    rec = doc["checkpoints"][0]
    raw = np.fromfile(tmp_path / "z" / rec["file"], dtype="<f4")
    t = rec["tensors"][1]
    n = int(np.prod(t["shape"]))
    got = raw[t["offset"] // 4 : t["offset"] // 4 + n].reshape(t["shape"])
    assert got.tobytes() == ckpts[0].tensors[t["name"]].astype("<f4").tobytes()


def test_split_sizes_for_200_models():
    keys = [f"m{i}" for i in range(200)]
    counts = Counter(assign_splits("cnn", keys, seed=0).values())
    assert counts == {"train": 140, "val": 30, "test": 30}


def test_splits_are_per_training_run(cnn_arch):
    ckpts = []
    for i in range(10):
        for epoch in (21, 22, 23):
            meta = CheckpointMeta("digits", epoch, i, model_key=f"run{i}")
            c = nets.random_checkpoint(cnn_arch, i, f"run{i}-e{epoch}")
            c.meta = meta
            ckpts.append(c)
    m = make_manifest("z", "digits", ckpts)
    by_run = {}
    for e in m.entries:
        by_run.setdefault(e.meta.model_key, set()).add(e.split)
    assert all(len(s) == 1 for s in by_run.values())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=8), min_size=1, max_size=60, unique=True), st.integers(0, 5))
def test_split_assignment_is_order_free_and_deterministic(keys, seed):
    a = assign_splits("zoo", keys, seed)
    b = assign_splits("zoo", list(reversed(keys)), seed)
    assert a == b
    counts = Counter(a.values())
    assert abs(counts["train"] - 0.7 * len(keys)) <= 1
    assert abs(counts["val"] - 0.15 * len(keys)) <= 1


def test_missing_tensor_file_names_the_file(tmp_path, mlp_arch):
    m, ckpts = _zoo(mlp_arch, 2)
    write_zoo(tmp_path / "z", m, ckpts)
    m2, reader = read_zoo(tmp_path / "z")
    victim = m2.entries[0]
    victim.path.unlink()
    with pytest.raises(IntegrityError, match=victim.file):
        reader.load(victim.ckpt_id)


def test_truncated_tensor_file_reports_byte_counts(tmp_path, mlp_arch):
    m, ckpts = _zoo(mlp_arch, 1)
    write_zoo(tmp_path / "z", m, ckpts)
    m2, reader = read_zoo(tmp_path / "z")
    e = m2.entries[0]
    data = e.path.read_bytes()
    e.path.write_bytes(data[:-8])
    with pytest.raises(IntegrityError, match=rf"{len(data) - 8} bytes, expected {len(data)}"):
        reader.load(e.ckpt_id)


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.pop("zoo_id"), "zoo_id"),
        (lambda d: d["checkpoints"][0].pop("file"), "checkpoints[0]"),
        (lambda d: d["checkpoints"][0].__setitem__("split", "holdout"), "checkpoints[0].split"),
        (lambda d: d["checkpoints"][0].__setitem__("arch_id", "nope"), "checkpoints[0].arch_id"),
        (lambda d: d.__setitem__("format", "v0"), "format"),
    ],
)
def test_malformed_manifest_names_field(tmp_path, mlp_arch, mutate, field):
    m, ckpts = _zoo(mlp_arch, 1)
    write_zoo(tmp_path / "z", m, ckpts)
    path = tmp_path / "z" / "manifest.json"
    doc = json.loads(path.read_text())
    mutate(doc)
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestParseError, match=field.replace("[", r"\[").replace("]", r"\]")):
        read_zoo(tmp_path / "z")


def test_invalid_json_is_parse_error(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestParseError):
        read_zoo(tmp_path)


def test_write_rejects_shape_mismatch(tmp_path, mlp_arch):
    m, ckpts = _zoo(mlp_arch, 1)
    ckpts[0].tensors["fc0"] = np.zeros((2, 2), np.float32)
    with pytest.raises(ValidationError):
        write_zoo(tmp_path / "z", m, ckpts)


def test_write_to_unwritable_location_is_storage_error(tmp_path, mlp_arch):
    m, ckpts = _zoo(mlp_arch, 1)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StorageError):
        write_zoo(blocker / "z", m, ckpts)


def test_merge_single_zoo_is_identity_up_to_id(mlp_arch):
    m, _ = _zoo(mlp_arch, 5)
    merged = merge_zoos([m])
    assert [(e.ckpt_id, e.split) for e in merged.entries] == [(e.ckpt_id, e.split) for e in m.entries]
    assert merged.zoo_id == "z"


def test_merge_two_100_model_zoos(mlp_arch):
    a, _ = _zoo(mlp_arch, 100, "a", "cifar10")
    b, _ = _zoo(mlp_arch, 100, "b", "cifar100")
    merged = merge_zoos([b, a])
    assert len(merged) == 200
    assert merged.zoo_id == "a+b"
    assert {e.meta.image_dataset for e in merged.entries} == {"cifar10", "cifar100"}
    orig = {**a.splits, **b.splits}
    assert merged.splits == orig
    assert {e.source_zoo for e in merged.entries} == {"a", "b"}


def test_merge_three_zoos_and_order_insensitivity(mlp_arch, cnn_arch):
    zs = [_zoo(arch, 100, zid)[0] for arch, zid in ((mlp_arch, "x"), (cnn_arch, "y"), (mlp_arch, "w"))]
    m1 = merge_zoos(zs)
    m2 = merge_zoos(zs[::-1])
    assert len(m1) == 300
    assert m1.zoo_id == m2.zoo_id
    assert Counter((e.ckpt_id, e.split) for e in m1.entries) == Counter((e.ckpt_id, e.split) for e in m2.entries)


def test_merge_rejects_token_size_conflict(mlp_arch):
    a, _ = _zoo(mlp_arch, 3, "a")
    b, _ = _zoo(mlp_arch, 3, "b")
    a.d_t, b.d_t = 289, 288
    with pytest.raises(IncompatibleZooError):
        merge_zoos([a, b])
    a.d_t = b.d_t = 289
    with pytest.raises(IncompatibleZooError):
        merge_zoos([a, b], d_t=64)
    assert merge_zoos([a, b]).d_t == 289


def test_merged_zoo_loads_from_both_directories(tmp_path, mlp_arch, cnn_arch):
    a, ca = _zoo(mlp_arch, 2, "a")
    b, cb = _zoo(cnn_arch, 2, "b")
    write_zoo(tmp_path / "a", a, ca)
    write_zoo(tmp_path / "b", b, cb)
    merged = merge_zoos([read_zoo(tmp_path / "a")[0], read_zoo(tmp_path / "b")[0]])
    from weightgen.zoo_store import ZooReader

    loaded = ZooReader(merged).load_all()
    assert [c.ckpt_id for c in loaded] == [c.ckpt_id for c in ca + cb]
