"""Training-free merging baselines: uniform soups and permutation alignment.

Alignment is weight matching: for each group of hidden units that must be
permuted together, solve a linear assignment that maximises the inner
product between the reference weights and the permuted target weights,
looking at every parameter that touches the group (incoming rows, outgoing
columns, batch-norm vectors). Groups are revisited in random order until no
assignment improves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import nets
from .sampler import condition_batchnorm
from .zoo_store import ArchitectureDescriptor, CheckpointMeta, ModelCheckpoint, ValidationError


class SoupConfigError(ValueError):
    pass


def _same_arch(models: list[ModelCheckpoint]) -> ArchitectureDescriptor:
    if not models:
        raise ValidationError("need at least one model")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch.arch_id != arch.arch_id:
            raise ValidationError(f"{m.ckpt_id}: architecture differs from {models[0].ckpt_id}")
    return arch


def soup(models: list[ModelCheckpoint], ckpt_id: str | None = None) -> ModelCheckpoint:
    """Element-wise mean of every tensor; batch-norm buffers are averaged as placeholders."""
    arch = _same_arch(models)
    tensors = {
        l.name: np.mean([m.tensors[l.name].astype(np.float64) for m in models], axis=0).astype(np.float32)
        for l in arch.layers
    }
    buffers = {}
    for name in models[0].buffers:
        buffers[name] = np.mean([m.buffers[name].astype(np.float64) for m in models], axis=0).astype(np.float32)
    meta = CheckpointMeta(image_dataset=models[0].meta.image_dataset, epoch=models[0].meta.epoch,
                          seed=models[0].meta.seed, model_key=f"soup-{len(models)}")
    return ModelCheckpoint(ckpt_id or f"soup-{len(models)}", arch, tensors, meta, buffers)


# -- permutation specs -------------------------------------------------------


@dataclass(frozen=True)
class ParamView:
    """How one checkpoint tensor splits into permutable axes.

    ``layer`` and ``part`` select the source (weight block, bias column, or a
    batch-norm row / buffer row); ``axes`` names the permutation group acting
    on each axis of the reshaped view (``None`` = fixed).
    """

    layer: str
    part: str  # "w", "b", "gamma", "beta", "mean", "var"
    axes: tuple
    in_groups: int = 0  # channels feeding a weight block; columns are (in_groups, fan_in // in_groups)


def _dense_views(name, out_group, in_group, in_groups, has_bias):
    views = [ParamView(name, "w", (out_group, in_group, None), in_groups)]
    if has_bias:
        views.append(ParamView(name, "b", (out_group,)))
    return views


def _bn_views(name, group):
    return [ParamView(name, p, (group,)) for p in ("gamma", "beta", "mean", "var")]


def permutation_spec(arch: ArchitectureDescriptor) -> list[ParamView]:
    cfg = arch.config
    if arch.family == "mlp":
        n = len(arch.layers)
        views = []
        for i, l in enumerate(arch.layers):
            out_g = f"P{i}" if i < n - 1 else None
            in_g = f"P{i - 1}" if i > 0 else None
            views += _dense_views(l.name, out_g, in_g, l.fan_in, l.has_bias)
        return views
    if arch.family == "small_cnn":
        c1, c2, c3 = cfg["channels"]
        return (
            _dense_views("conv1", "P_conv1", None, cfg["in_channels"], True)
            + _dense_views("conv2", "P_conv2", "P_conv1", c1, True)
            + _dense_views("conv3", "P_conv3", "P_conv2", c2, True)
            + _dense_views("fc1", "P_fc1", "P_conv3", c3, True)
            + _dense_views("fc2", None, "P_fc1", cfg["hidden"], True)
        )
    if arch.family == "mini_resnet":
        w1, w2 = cfg["widths"]
        # residual streams share one permutation across every tensor that writes to them
        return (
            _dense_views("stem", "P_res1", None, cfg["in_channels"], False)
            + _bn_views("stem_bn", "P_res1")
            + _dense_views("b1_conv1", "P_b1", "P_res1", w1, False)
            + _bn_views("b1_bn1", "P_b1")
            + _dense_views("b1_conv2", "P_res1", "P_b1", w1, False)
            + _bn_views("b1_bn2", "P_res1")
            + _dense_views("b2_conv1", "P_b2", "P_res1", w1, False)
            + _bn_views("b2_bn1", "P_b2")
            + _dense_views("b2_conv2", "P_res2", "P_b2", w2, False)
            + _bn_views("b2_bn2", "P_res2")
            + _dense_views("b2_short", "P_res2", "P_res1", w1, False)
            + _bn_views("b2_short_bn", "P_res2")
            + _dense_views("fc", None, "P_res2", w2, True)
        )
    raise ValidationError(f"no permutation spec for family {arch.family!r}")


def to_params(ckpt: ModelCheckpoint, spec: list[ParamView]) -> dict[ParamView, np.ndarray]:
    out = {}
    for v in spec:
        layer = ckpt.arch.layer(v.layer)
        t = ckpt.tensors[v.layer].astype(np.float64)
        if v.part == "w":
            out[v] = t[:, : layer.fan_in].reshape(layer.out_dim, v.in_groups, layer.fan_in // v.in_groups)
        elif v.part == "b":
            out[v] = t[:, layer.fan_in]
        elif v.part in ("gamma", "beta"):
            out[v] = t[0 if v.part == "gamma" else 1]
        else:
            buf = ckpt.buffers.get(v.layer)
            if buf is None:
                continue
            out[v] = buf[0 if v.part == "mean" else 1].astype(np.float64)
    return out


def from_params(template: ModelCheckpoint, params: dict[ParamView, np.ndarray], ckpt_id: str) -> ModelCheckpoint:
    out = template.copy()
    out.ckpt_id = ckpt_id
    for v, arr in params.items():
        layer = template.arch.layer(v.layer)
        if v.part == "w":
            out.tensors[v.layer][:, : layer.fan_in] = arr.reshape(layer.out_dim, layer.fan_in)
        elif v.part == "b":
            out.tensors[v.layer][:, layer.fan_in] = arr
        elif v.part in ("gamma", "beta"):
            out.tensors[v.layer][0 if v.part == "gamma" else 1] = arr
        else:
            out.buffers[v.layer][0 if v.part == "mean" else 1] = arr
    return out


def _groups(spec: list[ParamView], params: dict) -> dict[str, list[tuple[ParamView, int]]]:
    groups: dict[str, list] = {}
    for v in spec:
        for axis, g in enumerate(v.axes):
            if g is not None and v in params and v.part not in ("mean", "var"):
                groups.setdefault(g, []).append((v, axis))
    return groups


def _permute(arr: np.ndarray, view: ParamView, perms: dict, skip_axis: int | None = None) -> np.ndarray:
    for axis, g in enumerate(view.axes):
        if g is None or axis == skip_axis:
            continue
        arr = np.take(arr, perms[g], axis=axis)
    return arr


def apply_permutations(params: dict, perms: dict[str, np.ndarray]) -> dict:
    return {v: _permute(a, v, perms) for v, a in params.items()}


def _learned(params: dict) -> dict:
    return {v: a for v, a in params.items() if v.part not in ("mean", "var")}


def weight_distance(a: dict, b: dict) -> float:
    return float(np.sqrt(sum(np.sum((a[v] - b[v]) ** 2) for v in _learned(a))))


def weight_matching(
    ref: dict, target: dict, spec: list[ParamView], max_iters: int = 100, seed: int = 0
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Coordinate-descent weight matching.

    Returns the permutations (``perms[g][i]`` is the target unit placed at
    position ``i``) and the L2 distance to ``ref`` before the first sweep and
    after every sweep.
    """
    groups = _groups(spec, ref)
    sizes = {g: ref[members[0][0]].shape[members[0][1]] for g, members in groups.items()}
    perms = {g: np.arange(n) for g, n in sizes.items()}
    rng = np.random.default_rng(seed)
    history = [weight_distance(ref, apply_permutations(target, perms))]
    names = sorted(groups)
    for _ in range(max_iters):
        progress = False
        for idx in rng.permutation(len(names)):
            g = names[idx]
            n = sizes[g]
            cost = np.zeros((n, n))
            for view, axis in groups[g]:
                a = np.moveaxis(ref[view], axis, 0).reshape(n, -1)
                b = np.moveaxis(_permute(target[view], view, perms, skip_axis=axis), axis, 0).reshape(n, -1)
                cost += a @ b.T
            _, cols = linear_sum_assignment(cost, maximize=True)
            old = cost[np.arange(n), perms[g]].sum()
            new = cost[np.arange(n), cols].sum()
            if new > old + 1e-9 * max(1.0, abs(old)):
                perms[g] = cols
                progress = True
        history.append(weight_distance(ref, apply_permutations(target, perms)))
        if not progress:
            break
    return perms, history


def rebasin_align(
    reference: ModelCheckpoint, target: ModelCheckpoint, max_iters: int = 100, seed: int = 0
) -> tuple[ModelCheckpoint, dict[str, np.ndarray]]:
    """Permute ``target``'s hidden units to match ``reference``. Output layers stay fixed."""
    _same_arch([reference, target])
    spec = permutation_spec(reference.arch)
    ref_p = to_params(reference, spec)
    tgt_p = to_params(target, spec)
    perms, _ = weight_matching(ref_p, tgt_p, spec, max_iters=max_iters, seed=seed)
    aligned = from_params(target, apply_permutations(tgt_p, perms), f"{target.ckpt_id}-aligned")
    return aligned, perms


def permutation_matrix(perm: np.ndarray) -> np.ndarray:
    m = np.zeros((len(perm), len(perm)), dtype=np.int64)
    m[np.arange(len(perm)), perm] = 1
    return m


# -- soup curves ----------------------------------------------------------------


def final_snapshots(models: list[ModelCheckpoint]) -> list[ModelCheckpoint]:
    """Last retained epoch of every training run, in first-seen order."""
    best: dict[str, ModelCheckpoint] = {}
    for m in models:
        k = m.meta.model_key
        if k not in best or m.meta.epoch > best[k].meta.epoch:
            best[k] = m
    return list(best.values())


def soup_curve(
    models: list[ModelCheckpoint],
    ks: list[int],
    x_eval: torch.Tensor,
    y_eval: torch.Tensor,
    aligned: bool = False,
    repeats: int = 5,
    seed: int = 0,
    x_cond: torch.Tensor | None = None,
) -> list[dict]:
    """Accuracy of k-model soups, ``repeats`` random draws per k.

    ``models`` should hold one snapshot per training run (see
    ``final_snapshots``). When aligning, every drawn model is aligned to the
    first one before averaging. Batch-norm statistics are recomputed on
    ``x_cond`` (defaults to ``x_eval``) before evaluation.
    """
    if not models:
        raise SoupConfigError("empty zoo")
    _same_arch(models)
    for k in ks:
        if k < 1 or k > len(models):
            raise SoupConfigError(f"k={k} outside 1..{len(models)} (zoo size)")
    rng = np.random.default_rng(seed)
    x_cond = x_eval if x_cond is None else x_cond
    rows = []
    for k in ks:
        accs = []
        for _ in range(repeats):
            pick = [models[i] for i in rng.choice(len(models), size=k, replace=False)]
            if aligned and k > 1:
                pick = [pick[0]] + [rebasin_align(pick[0], m, seed=seed)[0] for m in pick[1:]]
            merged = soup(pick)
            merged = condition_batchnorm(merged, [x_cond[i : i + 256] for i in range(0, len(x_cond), 256)])
            accs.append(nets.accuracy(merged, x_eval, y_eval))
        rows.append({"k": k, "aligned": aligned, "mean": float(np.mean(accs)),
                     "std": float(np.std(accs)), "accuracies": accs})
    return rows
