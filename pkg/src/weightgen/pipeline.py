"""Stage implementations shared by the CLI subcommands and the config-driven pipeline.

Each pipeline stage writes a record ``<work_dir>/.stages/<name>.json`` holding a
fingerprint of its inputs (stage parameters, seed, upstream fingerprints) and
sha256 digests of the files it produced. A stage is skipped when the
fingerprint matches and every recorded output is present and unchanged.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__, nets
from .baselines import final_snapshots, permutation_spec, rebasin_align, soup_curve, to_params, weight_distance
from .config import STAGES, PipelineConfig, SampleSection, ZooConfig
from .data import load_dataset
from .evalharness import (
    EvalReport,
    TaskSuite,
    evaluate_task,
    parse_report,
    render_report,
    select_generated,
)
from .model import ConfigError, Sane, SaneConfig, load_sane
from .sampler import SampleSpec
from .trainer import build_token_dataset, train_sane
from .zoo_store import ModelCheckpoint, ZooManifest, ZooReader, make_manifest, read_zoo, write_zoo
from .zoogen import PopulationResult, PopulationSpec, prepare_inputs, train_population

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[stage {stage}] {message}")
        self.stage = stage


# -- stage bodies --------------------------------------------------------------------


def population_spec(z: ZooConfig, seed: int, index: int = 0, d_t: int | None = None) -> PopulationSpec:
    seed_base = z.seed_base if z.seed_base is not None else seed * 10_000 + index * 1_000
    return PopulationSpec(
        arch=nets.make_arch(z.arch.family, **z.arch.options),
        dataset_tag=z.dataset,
        n_models=z.n_models,
        epochs=z.epochs,
        seed_base=seed_base,
        hyperparameter_grid=dict(z.hyperparameter_grid),
        batch_size=z.batch_size,
        keep_epochs=z.keep_epochs,
        zoo_id=z.id,
        d_t=d_t,
        init_seed=seed_base if z.shared_init else None,
    )


def run_zoogen(spec: PopulationSpec, data_root, out: Path) -> PopulationResult:
    data = load_dataset(spec.dataset_tag, data_root)
    result = train_population(spec, data, out=out)
    (Path(out) / "failures.json").write_text(json.dumps(result.failures, indent=1))
    return result


def run_train(cfg: SaneConfig, zoo_dirs: list[Path], out: Path):
    zoos = [read_zoo(p) for p in zoo_dirs]
    source = build_token_dataset(zoos, cfg.d_t, split="train")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return train_sane(cfg, source, out=out, log_path=out / "train_log.jsonl")


def choose_anchors(
    manifest: ZooManifest, reader: ZooReader, n: int, epoch: int | None, seed: int
) -> list[ModelCheckpoint]:
    """``n`` random train-split snapshots at ``epoch`` (default: the zoo's last retained epoch)."""
    train = [e for e in manifest.entries if e.split == "train"]
    if not train:
        raise ValueError(f"zoo {manifest.zoo_id} has no train-split models")
    epoch = max(e.meta.epoch for e in train) if epoch is None else epoch
    pool = sorted((e for e in train if e.meta.epoch == epoch), key=lambda e: e.ckpt_id)
    if len(pool) < n:
        raise ValueError(f"zoo {manifest.zoo_id}: {len(pool)} train models at epoch {epoch}, need {n}")
    pick = np.random.default_rng(seed).choice(len(pool), size=n, replace=False)
    return [reader.load(pool[i].ckpt_id) for i in sorted(pick)]


def run_sample(
    sane: Sane, anchors: list[ModelCheckpoint], task: str, data_root, sample: SampleSection, seed: int, out: Path
) -> list[tuple[ModelCheckpoint, float]]:
    """Generate, condition on the task's train split, keep the best on its val split; write them as a zoo."""
    data = load_dataset(task, data_root)
    spec = SampleSpec(anchors[0].arch, anchors, n_candidates=sample.n_candidates, n_keep=sample.n_keep,
                      latent_noise_sigma=sample.latent_noise_sigma, relative_noise=sample.relative_noise,
                      seed=seed)
    kept = select_generated(sane, spec, data, sample.cond_batches)
    ckpts = []
    for c, _ in kept:
        c = c.copy()
        c.meta.image_dataset = task
        ckpts.append(c)
    manifest = make_manifest(f"samples-{task}", task, ckpts, seed=seed, d_t=sane.cfg.d_t)
    write_zoo(out, manifest, ckpts)
    selection = {
        "task": task,
        "anchors": [a.ckpt_id for a in anchors],
        "kept": [{"ckpt_id": c.ckpt_id, "val_accuracy": acc} for c, acc in kept],
        "n_candidates": spec.n_candidates,
        "seed": seed,
    }
    (Path(out) / "selection.json").write_text(json.dumps(selection, indent=1))
    return kept


def run_soup(models: list[ModelCheckpoint], task: str, data_root, ks: list[int], repeats: int,
             align: bool, seed: int) -> list[dict]:
    data = load_dataset(task, data_root)
    arch = models[0].arch
    x_test = prepare_inputs(arch, data.x_test)
    x_cond = prepare_inputs(arch, data.x_train)
    rows = soup_curve(models, ks, x_test, data.y_test, aligned=False, repeats=repeats, seed=seed, x_cond=x_cond)
    if align:
        rows += soup_curve(models, ks, x_test, data.y_test, aligned=True, repeats=repeats, seed=seed,
                           x_cond=x_cond)
    return rows


def soup_table(rows: list[dict]) -> str:
    lines = ["| k | aligned | accuracy |", "|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['k']} | {'yes' if r['aligned'] else 'no'} | "
                     f"{100 * r['mean']:.1f}±{100 * r['std']:.1f} |")
    return "\n".join(lines) + "\n"


def run_rebasin(models: list[ModelCheckpoint], out: Path, max_iters: int, seed: int,
                zoo_id: str, dataset_tag: str) -> list[dict]:
    """Align every model to the first one; write the aligned zoo and per-model distances."""
    ref = models[0]
    spec = permutation_spec(ref.arch)
    ref_p = to_params(ref, spec)
    aligned, rows = [ref.copy()], []
    for m in models[1:]:
        a, _ = rebasin_align(ref, m, max_iters=max_iters, seed=seed)
        a.ckpt_id = m.ckpt_id
        before = weight_distance(ref_p, to_params(m, spec))
        after = weight_distance(ref_p, to_params(a, spec))
        rows.append({"ckpt_id": m.ckpt_id, "distance_before": before, "distance_after": after})
        aligned.append(a)
    write_zoo(out, make_manifest(f"{zoo_id}-aligned", dataset_tag, aligned, seed=seed), aligned)
    (Path(out) / "alignment.json").write_text(json.dumps({"reference": ref.ckpt_id, "models": rows}, indent=1))
    return rows


def evaluate_samples(sample_dirs: dict[str, Path], suite: TaskSuite, data_root, label: str,
                     provenance: dict, cond_batches: int | None = None) -> EvalReport:
    """Each task's kept models are evaluated on that task's test split."""
    results = {}
    for task in suite.tasks:
        _, reader = read_zoo(sample_dirs[task])
        results[task] = evaluate_task(reader.load_all(), task, data_root, cond_batches)
    return EvalReport(label, suite, results, provenance)


# -- orchestration -------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class StageOutcome:
    name: str
    status: str  # "ran" or "skipped"
    fingerprint: str


class Pipeline:
    def __init__(self, cfg: PipelineConfig, seed: int, work_dir: Path, data_root: Path, force: bool = False):
        self.cfg = cfg
        self.seed = seed
        self.work = Path(work_dir)
        self.data_root = Path(data_root)
        self.force = force
        self.fingerprints: dict[str, str] = {}
        self.outcomes: list[StageOutcome] = []

    # paths
    def zoo_dir(self, zoo_id: str) -> Path:
        return self.work / "zoos" / zoo_id

    @property
    def sane_dir(self) -> Path:
        return self.work / "sane"

    def sample_dir(self, task: str) -> Path:
        return self.work / "samples" / task

    @property
    def report_dir(self) -> Path:
        return self.work / "report"

    def _record_path(self, name: str) -> Path:
        return self.work / ".stages" / f"{name}.json"

    def _up_to_date(self, name: str, fp: str) -> bool:
        path = self._record_path(name)
        if self.force or not path.exists():
            return False
        rec = json.loads(path.read_text())
        if rec.get("fingerprint") != fp:
            return False
        for rel, digest in rec.get("outputs", {}).items():
            f = self.work / rel
            if not f.exists() or _sha256(f) != digest:
                return False
        return True

    def _stage(self, name: str, params: dict, deps: list[str], outputs: Callable[[], list[Path]], body):
        fp = _fingerprint({"stage": name, "params": params, "seed": self.seed, "version": __version__,
                           "deps": [self.fingerprints[d] for d in deps]})
        self.fingerprints[name] = fp
        if self._up_to_date(name, fp):
            log.info("stage %s: up to date, skipped", name)
            self.outcomes.append(StageOutcome(name, "skipped", fp))
            return
        log.info("stage %s: running", name)
        try:
            body()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc
        files = sorted(p for p in outputs() if p.is_file())
        rec = {"fingerprint": fp, "outputs": {str(p.relative_to(self.work)): _sha256(p) for p in files}}
        path = self._record_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(rec, indent=1, sort_keys=True))
        self.outcomes.append(StageOutcome(name, "ran", fp))

    @staticmethod
    def _files(*dirs: Path) -> Callable[[], list[Path]]:
        return lambda: [p for d in dirs for p in Path(d).rglob("*")]

    def _dep(self, name: str) -> str:
        if name not in self.fingerprints:
            # stage not requested in this run: fingerprint from its record if one exists
            path = self._record_path(name)
            if not path.exists():
                raise PipelineError(name, "required upstream stage has never run")
            self.fingerprints[name] = json.loads(path.read_text())["fingerprint"]
        return name

    def _sane_zoos(self) -> list[str]:
        return self.cfg.sane.zoos or [z.id for z in self.cfg.zoos]

    def _suite(self) -> TaskSuite:
        s = self.cfg.suite
        return TaskSuite(list(s.id_tasks), list(s.nood_tasks), list(s.food_tasks))

    def _anchor_zoo(self, task: str) -> str:
        if task in self.cfg.anchors:
            return self.cfg.anchors[task]
        for z in self.cfg.zoos:
            if z.dataset == task and z.id in self._sane_zoos():
                return z.id
        return self._sane_zoos()[0]

    # stages
    def zoogen(self):
        sane_cfg = self.cfg.sane_config(self.seed) if self.cfg.zoos else None
        for i, z in enumerate(self.cfg.zoos):
            spec = population_spec(z, self.seed, i, d_t=sane_cfg.d_t)
            out = self.zoo_dir(z.id)
            params = {**z.model_dump(), "index": i, "d_t": spec.d_t}
            self._stage(f"zoogen-{z.id}", params, [], self._files(out),
                        lambda spec=spec, out=out: run_zoogen(spec, self.data_root, out))

    def train(self):
        cfg = self.cfg.sane_config(self.seed)
        names = self._sane_zoos()
        if not names:
            raise PipelineError("train", "no zoos to train on")
        deps = [self._dep(f"zoogen-{n}") for n in names]
        self._stage("train", {"sane": cfg.to_dict(), "zoos": names}, deps, self._files(self.sane_dir),
                    lambda: run_train(cfg, [self.zoo_dir(n) for n in names], self.sane_dir))

    def sample(self):
        suite = self._suite()
        if not suite.tasks:
            raise PipelineError("sample", "suite has no tasks")
        for task in suite.tasks:
            zoo = self._anchor_zoo(task)
            deps = [self._dep("train"), self._dep(f"zoogen-{zoo}")]
            params = {"task": task, "anchor_zoo": zoo, "sample": self.cfg.sample.model_dump()}

            def body(task=task, zoo=zoo):
                sane, _ = load_sane(self.sane_dir)
                manifest, reader = read_zoo(self.zoo_dir(zoo))
                s = self.cfg.sample
                anchors = choose_anchors(manifest, reader, s.n_anchors, s.anchor_epoch, self.seed)
                run_sample(sane, anchors, task, self.data_root, s, self.seed, self.sample_dir(task))

            self._stage(f"sample-{task}", params, deps, self._files(self.sample_dir(task)), body)

    def eval(self):
        suite = self._suite()
        deps = [self._dep(f"sample-{t}") for t in suite.tasks]
        label = self.cfg.report.label or " + ".join(self.cfg.zoo(n).dataset for n in self._sane_zoos())
        out = self.report_dir / "eval.json"

        def body():
            prov = {"sane": str(self.sane_dir), "zoos": self._sane_zoos(), "seed": self.seed,
                    "sample": self.cfg.sample.model_dump()}
            report = evaluate_samples({t: self.sample_dir(t) for t in suite.tasks}, suite, self.data_root,
                                      label, prov, self.cfg.sample.cond_batches)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(render_report(report, "json"))

        self._stage("eval", {"suite": suite.to_dict(), "label": label}, deps, lambda: [out], body)

    def report(self):
        deps = [self._dep("eval")]
        txt = self.report_dir / "report.txt"

        def body():
            reports = parse_report((self.report_dir / "eval.json").read_text())
            text = render_report(reports, "text")
            soup = self.work / "soup" / "soup.json"
            if soup.exists():
                text += "\n" + soup_table(json.loads(soup.read_text()))
            txt.write_text(text)

        self._stage("report", {}, deps, lambda: [txt], body)

    def soup(self):
        z = self.cfg.zoo(self.cfg.soup.zoo)
        s = self.cfg.soup
        out = self.work / "soup" / "soup.json"

        def body():
            _, reader = read_zoo(self.zoo_dir(z.id))
            models = final_snapshots(reader.load_all())
            rows = run_soup(models, s.task or z.dataset, self.data_root, s.ks, s.repeats, s.align, self.seed)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(rows, indent=1))

        self._stage("soup", s.model_dump(), [self._dep(f"zoogen-{z.id}")], lambda: [out], body)

    def rebasin(self):
        z = self.cfg.zoo(self.cfg.rebasin.zoo)
        out = self.work / "rebasin" / z.id

        def body():
            _, reader = read_zoo(self.zoo_dir(z.id))
            models = final_snapshots(reader.load_all())
            run_rebasin(models, out, self.cfg.rebasin.max_iters, self.seed, z.id, z.dataset)

        self._stage("rebasin", self.cfg.rebasin.model_dump(), [self._dep(f"zoogen-{z.id}")],
                    self._files(out), body)

    def run(self, stages: list[str] | None = None) -> list[StageOutcome]:
        stages = list(self.cfg.stages if stages is None else stages)
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"stages: unknown stage(s) {unknown}, expected some of {list(STAGES)}")
        torch.set_num_threads(self.cfg.workers)
        for name in stages:
            getattr(self, name)()
        return self.outcomes


def run_pipeline(cfg: PipelineConfig, seed: int, work_dir=None, data_root=None, force: bool = False,
                 stages: list[str] | None = None) -> list[StageOutcome]:
    from .config import resolve_data_root

    work = Path(work_dir or cfg.work_dir)
    pipe = Pipeline(cfg, seed, work, resolve_data_root(data_root, cfg), force=force)
    return pipe.run(stages)
