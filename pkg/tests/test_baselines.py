import numpy as np
import pytest
import torch

from weightgen import nets
from weightgen.baselines import (
    SoupConfigError,
    apply_permutations,
    final_snapshots,
    from_params,
    permutation_matrix,
    permutation_spec,
    rebasin_align,
    soup,
    soup_curve,
    to_params,
    weight_matching,
)
from weightgen.zoo_store import (
    ArchitectureDescriptor,
    CheckpointMeta,
    LayerSpec,
    ModelCheckpoint,
    ValidationError,
)


def scramble(ckpt, seed):
    """Permute every hidden group of ``ckpt`` with random permutations."""
    spec = permutation_spec(ckpt.arch)
    params = to_params(ckpt, spec)
    rng = np.random.default_rng(seed)
    sizes = {}
    for v, a in params.items():
        for axis, g in enumerate(v.axes):
            if g is not None:
                sizes[g] = a.shape[axis]
    pi = {g: rng.permutation(n) for g, n in sizes.items()}
    return from_params(ckpt, apply_permutations(params, pi), f"{ckpt.ckpt_id}-scrambled"), pi


def _probe_outputs(ckpt, x):
    return nets.predict(ckpt, x).numpy()


def test_soup_identity_and_idempotence(cnn_arch):
    m = nets.random_checkpoint(cnn_arch, 0)
    for s in (soup([m]), soup([m, m])):
        for k in m.tensors:
            np.testing.assert_array_equal(s.tensors[k], m.tensors[k])


def test_soup_arithmetic():
    arch = ArchitectureDescriptor((LayerSpec("fc", "linear", 1, 1, False, 0),))
    a = ModelCheckpoint("a", arch, {"fc": np.array([[1.0]], np.float32)}, CheckpointMeta("d", 0, 0))
    b = ModelCheckpoint("b", arch, {"fc": np.array([[3.0]], np.float32)}, CheckpointMeta("d", 0, 1))
    np.testing.assert_array_equal(soup([a, b]).tensors["fc"], [[2.0]])


def test_soup_rejects_mixed_architectures(cnn_arch, mlp_arch):
    with pytest.raises(ValidationError):
        soup([nets.random_checkpoint(cnn_arch, 0), nets.random_checkpoint(mlp_arch, 0)])
    with pytest.raises(ValidationError):
        soup([])


def test_identity_alignment(mlp_arch):
    m = nets.random_checkpoint(mlp_arch, 0)
    aligned, perms = rebasin_align(m, m)
    for p in perms.values():
        np.testing.assert_array_equal(p, np.arange(len(p)))


@pytest.mark.parametrize("seed", range(5))
def test_planted_permutation_is_recovered_exactly(mlp_arch, seed):
    ref = nets.random_checkpoint(mlp_arch, seed)
    target, pi = scramble(ref, seed + 100)
    aligned, perms = rebasin_align(ref, target)
    for g, p in perms.items():
        np.testing.assert_array_equal(pi[g][p], np.arange(len(p)))
    for k in ref.tensors:
        np.testing.assert_array_equal(aligned.tensors[k], ref.tensors[k])


@pytest.mark.parametrize("family", ["mlp", "small_cnn", "mini_resnet"])
def test_alignment_preserves_function(family):
    arch = nets.make_arch(family)
    ref = nets.random_checkpoint(arch, 1)
    target = nets.random_checkpoint(arch, 2)
    aligned, perms = rebasin_align(ref, target)
    x = torch.randn(128, *nets.input_shape(arch), generator=torch.Generator().manual_seed(0))
    assert np.max(np.abs(_probe_outputs(aligned, x) - _probe_outputs(target, x))) <= 1e-5
    for p in perms.values():
        m = permutation_matrix(p)
        assert np.all(m.sum(0) == 1) and np.all(m.sum(1) == 1)
        assert set(np.unique(m)) <= {0, 1}


def test_resnet_planted_permutation_is_recovered(resnet_arch):
    ref = nets.random_checkpoint(resnet_arch, 3)
    target, pi = scramble(ref, 7)
    aligned, _ = rebasin_align(ref, target)
    for k in ref.tensors:
        np.testing.assert_array_equal(aligned.tensors[k], ref.tensors[k])
    for k in ref.buffers:
        np.testing.assert_array_equal(aligned.buffers[k], ref.buffers[k])


def test_distance_is_non_increasing_per_sweep(cnn_arch):
    spec = permutation_spec(cnn_arch)
    for s in range(4):
        ref = to_params(nets.random_checkpoint(cnn_arch, s), spec)
        tgt = to_params(nets.random_checkpoint(cnn_arch, s + 50), spec)
        _, hist = weight_matching(ref, tgt, spec)
        assert len(hist) >= 2
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
        assert hist[-1] < hist[0]


def test_output_layer_stays_fixed(mlp_arch):
    ref = nets.random_checkpoint(mlp_arch, 0)
    tgt = nets.random_checkpoint(mlp_arch, 1)
    aligned, _ = rebasin_align(ref, tgt)
    # output rows keep their class order; only the incoming columns move
    np.testing.assert_array_equal(np.sort(aligned.tensors["fc2"], axis=1), np.sort(tgt.tensors["fc2"], axis=1))
    np.testing.assert_array_equal(aligned.tensors["fc2"][:, -1], tgt.tensors["fc2"][:, -1])


def test_final_snapshots_keep_last_epoch(cnn_arch):
    ms = []
    for run in range(3):
        for epoch in (2, 5, 3):
            c = nets.random_checkpoint(cnn_arch, run * 10 + epoch, f"r{run}e{epoch}")
            c.meta = CheckpointMeta("digits", epoch, run, model_key=f"r{run}")
            ms.append(c)
    assert [c.ckpt_id for c in final_snapshots(ms)] == ["r0e5", "r1e5", "r2e5"]


def test_soup_curve_shape_and_errors(mlp_arch):
    models = [nets.random_checkpoint(mlp_arch, i, f"m{i}") for i in range(4)]
    x = torch.randn(50, 16)
    y = torch.randint(0, 4, (50,))
    rows = soup_curve(models, [1, 2, 4], x, y, repeats=3)
    assert [r["k"] for r in rows] == [1, 2, 4]
    assert all(len(r["accuracies"]) == 3 for r in rows)
    assert rows[2]["std"] == 0.0  # k equal to the zoo size always averages everything
    aligned = soup_curve(models, [2], x, y, aligned=True, repeats=2)
    assert aligned[0]["aligned"] is True
    with pytest.raises(SoupConfigError):
        soup_curve(models, [5], x, y)
    with pytest.raises(SoupConfigError):
        soup_curve([], [1], x, y)
