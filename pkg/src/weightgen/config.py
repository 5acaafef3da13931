"""Pipeline configuration: YAML with ``${VAR}`` / ``${VAR:-default}`` interpolation.

Top-level layout (every field optional except where noted)::

    seed: 0
    data_root: ${WEIGHTGEN_DATA_ROOT:-data}
    work_dir: runs/toy
    workers: 1
    stages: [zoogen, train, sample, eval, report]
    zoos:                       # one entry per population
      - id: cnn-digits          # required
        dataset: digits         # required
        arch: {family: small_cnn}
        n_models: 20
        epochs: 25
        shared_init: true
        hyperparameter_grid: {init: [kaiming_uniform]}
    sane: {preset: toy, zoos: [cnn-digits], epochs: 30, ...any SaneConfig field}
    sample: {n_candidates: 200, n_keep: 10, n_anchors: 5, anchor_epoch: null,
             relative_noise: 0.05, latent_noise_sigma: null}
    suite: {id_tasks: [digits], nood_tasks: [], food_tasks: []}
    anchors: {digits: cnn-digits}     # task -> zoo supplying anchors (default: first zoo)
    soup: {zoo: cnn-digits, task: digits, ks: [1, 2, 4, 8], repeats: 5, align: false}
    rebasin: {zoo: cnn-digits, max_iters: 100}
    report: {label: null}
"""
from __future__ import annotations

import dataclasses
import os
import re
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .model import ConfigError, SaneConfig

STAGES = ("zoogen", "train", "sample", "eval", "report", "soup", "rebasin")
_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ArchConfig(_Strict):
    family: Literal["mlp", "small_cnn", "mini_resnet"] = "small_cnn"
    options: dict[str, Any] = Field(default_factory=dict)


class ZooConfig(_Strict):
    id: str
    dataset: str
    arch: ArchConfig = Field(default_factory=ArchConfig)
    n_models: int = Field(20, ge=1)
    epochs: int = Field(25, ge=1)
    seed_base: Optional[int] = None  # default derived from the run seed
    shared_init: bool = False  # every model starts from the same weights (seeded by seed_base)
    hyperparameter_grid: dict[str, list] = Field(default_factory=dict)
    batch_size: int = Field(64, ge=1)
    keep_epochs: Optional[list[int]] = None


class SaneSection(_Strict):
    preset: Literal["toy", "cnn_reference", "resnet_reference", "none"] = "toy"
    zoos: Optional[list[str]] = None  # default: every zoo
    overrides: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def _collect(cls, data):
        # SaneConfig fields may sit directly in the section
        if not isinstance(data, dict):
            return data
        names = {f.name for f in dataclasses.fields(SaneConfig)}
        own = {"preset", "zoos", "overrides"}
        extra = {k: v for k, v in data.items() if k in names}
        unknown = set(data) - names - own
        if unknown:
            raise ValueError(f"unknown field(s) {sorted(unknown)}")
        rest = {k: v for k, v in data.items() if k in own}
        rest["overrides"] = {**extra, **data.get("overrides", {})}
        return rest


class SampleSection(_Strict):
    n_candidates: int = Field(200, ge=1)
    n_keep: int = Field(10, ge=1)
    n_anchors: int = Field(5, ge=1)
    anchor_epoch: Optional[int] = None  # default: last retained epoch of the anchor zoo
    relative_noise: float = Field(0.05, ge=0)
    latent_noise_sigma: Optional[float] = Field(None, ge=0)
    cond_batches: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _keep(self):
        if self.n_keep > self.n_candidates:
            raise ValueError("n_keep must not exceed n_candidates")
        return self


class SuiteSection(_Strict):
    id_tasks: list[str] = Field(default_factory=list)
    nood_tasks: list[str] = Field(default_factory=list)
    food_tasks: list[str] = Field(default_factory=list)


class SoupSection(_Strict):
    zoo: Optional[str] = None
    task: Optional[str] = None
    ks: list[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    repeats: int = Field(5, ge=1)
    align: bool = False


class RebasinSection(_Strict):
    zoo: Optional[str] = None
    max_iters: int = Field(100, ge=1)


class ReportSection(_Strict):
    label: Optional[str] = None


class PipelineConfig(_Strict):
    seed: Optional[int] = None
    data_root: Optional[str] = None
    work_dir: str = "weightgen-run"
    workers: int = Field(1, ge=1)
    stages: list[Literal["zoogen", "train", "sample", "eval", "report", "soup", "rebasin"]] = Field(
        default_factory=list
    )
    zoos: list[ZooConfig] = Field(default_factory=list)
    sane: SaneSection = Field(default_factory=SaneSection)
    sample: SampleSection = Field(default_factory=SampleSection)
    suite: SuiteSection = Field(default_factory=SuiteSection)
    anchors: dict[str, str] = Field(default_factory=dict)
    soup: SoupSection = Field(default_factory=SoupSection)
    rebasin: RebasinSection = Field(default_factory=RebasinSection)
    report: ReportSection = Field(default_factory=ReportSection)

    @model_validator(mode="after")
    def _references(self):
        ids = [z.id for z in self.zoos]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate zoo ids in {ids}")
        for name in self.sane.zoos or []:
            if name not in ids:
                raise ValueError(f"sane.zoos: unknown zoo {name!r}")
        for task, name in self.anchors.items():
            if name not in ids:
                raise ValueError(f"anchors.{task}: unknown zoo {name!r}")
        return self

    def zoo(self, zoo_id: str | None) -> ZooConfig:
        if zoo_id is None:
            if not self.zoos:
                raise ConfigError("no zoos configured")
            return self.zoos[0]
        for z in self.zoos:
            if z.id == zoo_id:
                return z
        raise ConfigError(f"unknown zoo {zoo_id!r}")

    def sane_config(self, seed: int) -> SaneConfig:
        over = dict(self.sane.overrides)
        over.setdefault("seed", seed)
        try:
            if self.sane.preset == "none":
                return SaneConfig(**over)
            return getattr(SaneConfig, self.sane.preset)(**over)
        except TypeError as exc:
            raise ConfigError(f"sane: {exc}") from None
        except ConfigError as exc:
            raise ConfigError(f"sane.{exc}") from None


def interpolate(value, where: str = ""):
    """Replace ``${VAR}`` and ``${VAR:-default}`` in every string of a parsed document."""
    if isinstance(value, dict):
        return {k: interpolate(v, f"{where}.{k}" if where else str(k)) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v, f"{where}[{i}]") for i, v in enumerate(value)]
    if not isinstance(value, str):
        return value

    def sub(m):
        name, default = m.group(1), m.group(2)
        if name in os.environ:
            return os.environ[name]
        if default is not None:
            return default
        raise ConfigError(f"{where or '<root>'}: environment variable {name} is not set")

    out = _VAR.sub(sub, value)
    if out != value and _VAR.fullmatch(value):
        # a whole-value reference keeps YAML typing, e.g. seed: ${WEIGHTGEN_SEED}
        try:
            return yaml.safe_load(out)
        except yaml.YAMLError:
            return out
    return out


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(f"[{p}]" if isinstance(p, int) else str(p) for p in err["loc"]).replace(".[", "[")
        lines.append(f"{loc or '<root>'}: {err['msg']}")
    return "; ".join(lines)


def parse_config(doc: dict | None) -> PipelineConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("<root>: config must be a mapping")
    try:
        return PipelineConfig.model_validate(interpolate(doc))
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: str | os.PathLike) -> PipelineConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)


def resolve_seed(flag: int | None, cfg: PipelineConfig | None = None) -> int:
    """Flag, then config, then ``WEIGHTGEN_SEED``, then 0."""
    if flag is not None:
        return flag
    if cfg is not None and cfg.seed is not None:
        return cfg.seed
    env = os.environ.get("WEIGHTGEN_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"WEIGHTGEN_SEED={env!r} is not an integer") from None
    return 0


def resolve_data_root(flag: str | None, cfg: PipelineConfig | None = None) -> Path:
    from .data import default_root

    if flag:
        return Path(flag)
    if cfg is not None and cfg.data_root:
        return Path(cfg.data_root)
    return default_root()
