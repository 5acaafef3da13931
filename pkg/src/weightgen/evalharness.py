"""Evaluation of generated models on task suites, weight-distribution diagnostics
and report rendering.

Reports hold accuracies in percent. The AVG column is the plain mean of the
per-task means and its spread is the mean of the per-task stds, which is how
the published multi-zoo tables are aggregated.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import ks_2samp

from . import nets
from .data import DatasetError, ImageDataset, batches, load_dataset
from .sampler import SampleSpec, condition_batchnorm, generate_candidates, select_candidates
from .zoo_store import ModelCheckpoint, ValidationError
from .zoogen import prepare_inputs

GROUPS = ("id", "nood", "food")
GROUP_LABELS = {"id": "ID", "nood": "NOOD", "food": "FOOD"}


class EvalConfigError(ValueError):
    pass


@dataclass
class TaskSuite:
    id_tasks: list[str]
    nood_tasks: list[str] = field(default_factory=list)
    food_tasks: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for group, tags in zip(GROUPS, (self.id_tasks, self.nood_tasks, self.food_tasks)):
            for t in tags:
                if t in seen:
                    raise EvalConfigError(f"task {t!r} listed in both {seen[t]} and {group}")
                seen[t] = group

    @classmethod
    def default(cls) -> "TaskSuite":
        return cls(["digits", "printed"], ["digits_jitter"], ["letters"])

    @property
    def tasks(self) -> list[str]:
        return [*self.id_tasks, *self.nood_tasks, *self.food_tasks]

    def group_of(self, tag: str) -> str:
        for g in GROUPS:
            if tag in getattr(self, f"{g}_tasks"):
                return g
        raise KeyError(tag)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSuite":
        unknown = set(d) - {"id_tasks", "nood_tasks", "food_tasks"}
        if unknown:
            raise EvalConfigError(f"unknown suite fields {sorted(unknown)}")
        return cls(list(d.get("id_tasks", [])), list(d.get("nood_tasks", [])), list(d.get("food_tasks", [])))


@dataclass
class TaskResult:
    mean: float | None
    std: float | None
    n_models: int = 0
    accuracies: list[float] = field(default_factory=list)
    skipped: str | None = None  # reason when the task could not be evaluated

    def cell(self) -> str:
        if self.skipped is not None:
            return "skipped"
        return f"{self.mean:.1f}±{self.std:.1f}"


@dataclass
class EvalReport:
    label: str
    suite: TaskSuite
    results: dict[str, TaskResult] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for tag, r in self.results.items():
            if tag not in self.suite.tasks:
                raise EvalConfigError(f"result for {tag!r} which is not in the suite")
            if r.skipped is None and r.std < 0:
                raise EvalConfigError(f"{tag}: negative std")

    def _evaluated(self, tags) -> list[TaskResult]:
        return [self.results[t] for t in tags if t in self.results and self.results[t].skipped is None]

    def group_mean(self, group: str) -> float:
        rs = self._evaluated(getattr(self.suite, f"{group}_tasks"))
        return float(np.mean([r.mean for r in rs])) if rs else math.nan

    @property
    def avg(self) -> float:
        rs = self._evaluated(self.suite.tasks)
        return float(np.mean([r.mean for r in rs])) if rs else math.nan

    @property
    def avg_std(self) -> float:
        rs = self._evaluated(self.suite.tasks)
        return float(np.mean([r.std for r in rs])) if rs else math.nan

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "suite": self.suite.to_dict(),
            "results": {t: asdict(r) for t, r in self.results.items()},
            "groups": {g: _finite(self.group_mean(g)) for g in GROUPS},
            "avg": _finite(self.avg),
            "avg_std": _finite(self.avg_std),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            d["label"],
            TaskSuite.from_dict(d["suite"]),
            {t: TaskResult(**r) for t, r in d["results"].items()},
            d.get("provenance", {}),
        )


def _finite(x: float) -> float | None:
    return None if math.isnan(x) else x


# -- evaluation ------------------------------------------------------------------


def _load(tag: str, root) -> ImageDataset:
    # datasets are fixed artifacts; the evaluation seed never regenerates them
    try:
        return load_dataset(tag, root)
    except DatasetError as exc:
        raise EvalConfigError(f"task {tag!r}: {exc}") from exc


def _head_mismatch(ckpt: ModelCheckpoint, data: ImageDataset) -> str | None:
    width = nets.n_outputs(ckpt.arch)
    if width != data.n_classes:
        return f"head width {width} != {data.n_classes} classes"
    return None


def condition_on(ckpt: ModelCheckpoint, x: torch.Tensor, batch_size: int = 256, n_batches: int | None = None):
    return condition_batchnorm(ckpt, batches(prepare_inputs(ckpt.arch, x), batch_size), n_batches)


def evaluate_task(
    models: list[ModelCheckpoint], tag: str, data_root=None, cond_batches: int | None = None
) -> TaskResult:
    """Condition batch-norm on the task's train split, then test accuracy (percent) per model.

    Input weights are never modified; conditioning works on copies.
    """
    if not models:
        raise EvalConfigError(f"task {tag!r}: no models to evaluate")
    data = _load(tag, data_root)
    reason = _head_mismatch(models[0], data)
    if reason is not None:
        return TaskResult(None, None, 0, [], skipped=reason)
    x_test = prepare_inputs(models[0].arch, data.x_test)
    accs = []
    for m in models:
        conditioned = condition_on(m, data.x_train, n_batches=cond_batches)
        accs.append(100.0 * nets.accuracy(conditioned, x_test, data.y_test))
    return TaskResult(float(np.mean(accs)), float(np.std(accs)), len(accs), accs)


def evaluate_models(
    models: list[ModelCheckpoint],
    suite: TaskSuite,
    data_root=None,
    label: str = "models",
    cond_batches: int | None = None,
    provenance: dict | None = None,
) -> EvalReport:
    """Every model on every task of the suite."""
    if not models:
        raise EvalConfigError("no models to evaluate")
    results = {tag: evaluate_task(models, tag, data_root, cond_batches) for tag in suite.tasks}
    return EvalReport(label, suite, results, dict(provenance or {}))


def evaluate_generated(
    sane,
    anchors: dict[str, list[ModelCheckpoint]] | list[ModelCheckpoint],
    suite: TaskSuite,
    data_root=None,
    label: str = "sane",
    n_candidates: int = 200,
    n_keep: int = 10,
    relative_noise: float = 0.05,
    seed: int = 0,
    cond_batches: int | None = None,
    provenance: dict | None = None,
) -> EvalReport:
    """Zero-shot protocol per task: generate from anchors, condition and select on
    the task's validation split, report the survivors' test accuracy.

    ``anchors`` maps task tags to anchor lists; a plain list is used for every task.
    """
    results = {}
    for tag in suite.tasks:
        task_anchors = anchors if isinstance(anchors, list) else anchors.get(tag)
        if not task_anchors:
            raise EvalConfigError(f"no anchors for task {tag!r}")
        data = _load(tag, data_root)
        reason = _head_mismatch(task_anchors[0], data)
        if reason is not None:
            results[tag] = TaskResult(None, None, 0, [], skipped=reason)
            continue
        spec = SampleSpec(task_anchors[0].arch, task_anchors, n_candidates=n_candidates, n_keep=n_keep,
                          relative_noise=relative_noise, seed=seed)
        kept = select_generated(sane, spec, data, cond_batches)
        x_test = prepare_inputs(spec.target_arch, data.x_test)
        accs = [100.0 * nets.accuracy(c, x_test, data.y_test) for c, _ in kept]
        results[tag] = TaskResult(float(np.mean(accs)), float(np.std(accs)), len(accs), accs)
    prov = dict(provenance or {}, seed=seed, n_candidates=n_candidates, n_keep=n_keep,
                relative_noise=relative_noise)
    return EvalReport(label, suite, results, prov)


def select_generated(sane, spec: SampleSpec, data: ImageDataset, cond_batches: int | None = None):
    cands = generate_candidates(sane, spec)
    conditioned = [condition_on(c, data.x_train, n_batches=cond_batches) for c in cands]
    x_val = prepare_inputs(spec.target_arch, data.x_val)
    return select_candidates(conditioned, x_val, data.y_val, spec.n_keep)


# -- distribution diagnostics -------------------------------------------------------


@dataclass
class LayerDiagnostic:
    layer: str
    mean_orig: float
    mean_recon: float
    std_orig: float
    std_recon: float
    ks: float
    hist_edges: list[float] = field(default_factory=list)
    hist_orig: list[int] = field(default_factory=list)
    hist_recon: list[int] = field(default_factory=list)

    @property
    def mean_diff(self) -> float:
        return abs(self.mean_recon - self.mean_orig)

    @property
    def std_ratio(self) -> float:
        if self.std_orig == 0:
            return 1.0 if self.std_recon == 0 else math.inf
        return self.std_recon / self.std_orig


def distribution_diagnostics(
    originals: list[ModelCheckpoint], reconstructions: list[ModelCheckpoint], bins: int = 0
) -> list[LayerDiagnostic]:
    """Per-layer comparison of pooled weight values (all paired models together).

    ``bins > 0`` adds histogram counts on shared edges for plotting.
    """
    if len(originals) != len(reconstructions) or not originals:
        raise ValidationError(f"need equally many originals and reconstructions, got "
                              f"{len(originals)} and {len(reconstructions)}")
    arch = originals[0].arch
    for o, r in zip(originals, reconstructions):
        if o.arch.arch_id != arch.arch_id or r.arch.arch_id != arch.arch_id:
            raise ValidationError(f"architecture mismatch in pair ({o.ckpt_id}, {r.ckpt_id})")
    out = []
    for layer in arch.layers:
        a = np.concatenate([o.tensors[layer.name].ravel() for o in originals]).astype(np.float64)
        b = np.concatenate([r.tensors[layer.name].ravel() for r in reconstructions]).astype(np.float64)
        d = LayerDiagnostic(layer.name, float(a.mean()), float(b.mean()), float(a.std()), float(b.std()),
                            float(ks_2samp(a, b).statistic))
        if bins > 0:
            lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
            edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
            d.hist_edges = edges.tolist()
            d.hist_orig = np.histogram(a, edges)[0].tolist()
            d.hist_recon = np.histogram(b, edges)[0].tolist()
        out.append(d)
    return out


def mean_abs_log_std_ratio(diags: list[LayerDiagnostic]) -> float:
    """How far reconstructed layer spreads are from the originals, averaged over layers."""
    return float(np.mean([abs(math.log(d.std_ratio)) for d in diags]))


def diagnostics_table(diags: list[LayerDiagnostic]) -> str:
    lines = [f"{'layer':<14} {'|dmean|':>10} {'std ratio':>10} {'KS':>7}"]
    for d in diags:
        lines.append(f"{d.layer:<14} {d.mean_diff:>10.4g} {d.std_ratio:>10.4f} {d.ks:>7.4f}")
    return "\n".join(lines)


# -- rendering -----------------------------------------------------------------------


def _columns(reports: list[EvalReport]) -> list[tuple[str, str]]:
    """(group, tag) in ID, NOOD, FOOD order, tasks in suite order, first report first."""
    cols: list[tuple[str, str]] = []
    for g in GROUPS:
        for r in reports:
            for t in getattr(r.suite, f"{g}_tasks"):
                if (g, t) not in cols:
                    cols.append((g, t))
    return cols


def render_report(reports: EvalReport | list[EvalReport], format: str = "text") -> str:
    """Render one row per report.

    ``text``: pipe table with columns Zoo, the ID, NOOD and FOOD tasks, then AVG;
    cells are ``mean±std`` with one decimal. ``json``: the structured form read
    back by ``parse_report``.
    """
    if isinstance(reports, EvalReport):
        reports = [reports]
    if format == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    cols = _columns(reports)
    header = ["Zoo"] + [f"{t} ({GROUP_LABELS[g]})" for g, t in cols] + ["AVG"]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for r in reports:
        cells = [r.label]
        for _, t in cols:
            cells.append(r.results[t].cell() if t in r.results else "-")
        cells.append("-" if math.isnan(r.avg) else f"{r.avg:.1f}±{r.avg_std:.1f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(text)]


def write_report(path: str | Path, reports: EvalReport | list[EvalReport]) -> tuple[Path, Path]:
    """Write ``<path>.txt`` and ``<path>.json`` side by side (suffix of ``path`` is replaced)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    txt, js = path.with_suffix(".txt"), path.with_suffix(".json")
    txt.write_text(render_report(reports, "text"))
    js.write_text(render_report(reports, "json"))
    return txt, js
