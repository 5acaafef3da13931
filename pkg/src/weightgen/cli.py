"""Command line entry point: ``weightgen <subcommand>``.

Every subcommand accepts ``--config`` (a pipeline YAML file); flags override
the matching config fields. ``--seed`` falls back to the config, then to
``WEIGHTGEN_SEED``; ``--data`` falls back to the config, then to
``WEIGHTGEN_DATA_ROOT``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import nets
from .baselines import final_snapshots
from .config import PipelineConfig, ZooConfig, load_config, parse_config, resolve_data_root, resolve_seed
from .evalharness import EvalConfigError, TaskSuite, evaluate_models, parse_report, render_report, write_report
from .model import ConfigError, load_sane
from .pipeline import (
    PipelineError,
    choose_anchors,
    population_spec,
    run_pipeline,
    run_rebasin,
    run_sample,
    run_soup,
    run_train,
    run_zoogen,
    soup_table,
)
from .tokenizer import sequence_layout
from .zoo_store import ZooError, read_zoo

log = logging.getLogger("weightgen")


def _config(args) -> PipelineConfig:
    return load_config(args.config) if getattr(args, "config", None) else parse_config({})


def _override(section, **flags):
    """Copy of a pydantic section with the non-None flags applied (validated again)."""
    data = section.model_dump()
    data.update({k: v for k, v in flags.items() if v is not None})
    return type(section).model_validate(data)


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# -- subcommands ---------------------------------------------------------------------


def cmd_zoogen(args) -> int:
    cfg = _config(args)
    seed = resolve_seed(args.seed, cfg)
    if args.spec:
        doc = yaml.safe_load(Path(args.spec).read_text()) or {}
        cfg = parse_config({**cfg.model_dump(), "zoos": doc if isinstance(doc, list) else [doc]})
    if cfg.zoos and (args.zoo_id is None or any(z.id == args.zoo_id for z in cfg.zoos)):
        index = next((i for i, z in enumerate(cfg.zoos) if z.id == args.zoo_id), 0)
        zoo = cfg.zoos[index]
    else:
        if args.dataset is None:
            raise ConfigError("zoogen: --dataset is required without a config zoo")
        index, zoo = 0, ZooConfig(id=args.zoo_id or f"{args.arch or 'small_cnn'}-{args.dataset}",
                                  dataset=args.dataset)
    arch = {"family": args.arch} if args.arch else None
    zoo = ZooConfig.model_validate({
        **zoo.model_dump(),
        **{k: v for k, v in dict(dataset=args.dataset, n_models=args.n_models, epochs=args.epochs,
                                 seed_base=args.seed_base, shared_init=args.shared_init or None,
                                 arch=arch).items() if v is not None},
    })
    d_t = args.d_t if args.d_t is not None else cfg.sane_config(seed).d_t
    spec = population_spec(zoo, seed, index, d_t=d_t)
    out = Path(args.out or Path(cfg.work_dir) / "zoos" / zoo.id)
    result = run_zoogen(spec, resolve_data_root(args.data, cfg), out)
    summary = result.accuracy_summary()
    print(f"zoo {zoo.id}: {len(result.checkpoints)} checkpoints from {summary['n_models']} models, "
          f"test accuracy {summary['mean']:.3f}±{summary['std']:.3f}, {len(result.failures)} failed -> {out}")
    return 0


def cmd_layout(args) -> int:
    if args.zoo:
        manifest, _ = read_zoo(args.zoo)
        archs = list(manifest.architectures.values())
        d_t = args.d_t or manifest.d_t
    else:
        archs = [nets.make_arch(args.arch or "small_cnn")]
        d_t = args.d_t
    if d_t is None:
        raise ConfigError("layout: --d-t is required (the zoo does not declare one)")
    for arch in archs:
        layout = sequence_layout(arch, d_t)
        rows = layout.table()
        if args.json:
            print(json.dumps({"arch_id": arch.arch_id, "d_t": d_t, "n_tokens": layout.n_tokens, "layers": rows}))
            continue
        print(f"{arch.family} {arch.arch_id[:12]} d_t={d_t}: {layout.n_tokens} tokens")
        print(f"{'layer':<14}{'l':>3}{'offset':>8}{'rows':>6}{'row_len':>9}{'tok/row':>9}{'tokens':>8}")
        for r in rows:
            print(f"{r['layer']:<14}{r['l']:>3}{r['offset']:>8}{r['rows']:>6}{r['row_len']:>9}"
                  f"{r['tokens_per_row']:>9}{r['tokens']:>8}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = resolve_seed(args.seed, cfg)
    if args.preset:
        cfg.sane.preset = args.preset
    flags = dict(epochs=args.epochs, d_t=args.d_t, norm_mode=args.norm_mode, lr=args.lr,
                 batch_size=args.batch_size, gamma=args.gamma)
    cfg.sane.overrides.update({k: v for k, v in flags.items() if v is not None})
    sane_cfg = cfg.sane_config(seed)
    zoo_dirs = [Path(z) for z in args.zoo] if args.zoo else [
        Path(cfg.work_dir) / "zoos" / n for n in (cfg.sane.zoos or [z.id for z in cfg.zoos])
    ]
    if not zoo_dirs:
        raise ConfigError("train: no zoo given (--zoo or config zoos)")
    out = Path(args.out or Path(cfg.work_dir) / "sane")
    result = run_train(sane_cfg, zoo_dirs, out)
    losses = result.epoch_losses
    print(f"trained {sane_cfg.epochs} epochs on {len(zoo_dirs)} zoo(s), final loss {losses[-1]:.4f} -> {out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config(args)
    seed = resolve_seed(args.seed, cfg)
    sample = _override(cfg.sample, n_candidates=args.n_candidates, n_keep=args.n_keep, n_anchors=args.n_anchors,
                       anchor_epoch=args.anchor_epoch, relative_noise=args.noise)
    sane, _ = load_sane(args.sane)
    manifest, reader = read_zoo(args.zoo)
    task = args.task or manifest.dataset_tag
    anchors = choose_anchors(manifest, reader, sample.n_anchors, sample.anchor_epoch, seed)
    kept = run_sample(sane, anchors, task, resolve_data_root(args.data, cfg), sample, seed, Path(args.out))
    best = kept[0][1] if kept else float("nan")
    print(f"kept {len(kept)} of {sample.n_candidates} candidates on {task} (best val accuracy {best:.3f}) -> {args.out}")
    return 0


def _suite_from_file(path: str | None, cfg: PipelineConfig) -> TaskSuite:
    if path is None:
        s = cfg.suite
        return TaskSuite(list(s.id_tasks), list(s.nood_tasks), list(s.food_tasks))
    doc = yaml.safe_load(Path(path).read_text()) or {}
    if "suite" in doc:
        doc = doc["suite"]
    return TaskSuite.from_dict(doc)


def cmd_eval(args) -> int:
    cfg = _config(args)
    suite = _suite_from_file(args.suite, cfg)
    if not suite.tasks:
        raise ConfigError("eval: the suite has no tasks")
    manifest, reader = read_zoo(args.models)
    models = reader.load_all()
    report = evaluate_models(models, suite, resolve_data_root(args.data, cfg), label=args.label or manifest.zoo_id,
                             provenance={"models": str(args.models), "zoo_id": manifest.zoo_id})
    if args.report:
        txt, js = write_report(args.report, report)
        print(f"wrote {txt} and {js}")
    print(render_report(report, "text"), end="")
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.input:
        reports += parse_report(Path(path).read_text())
    text = render_report(reports, args.format)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def cmd_soup(args) -> int:
    cfg = _config(args)
    seed = resolve_seed(args.seed, cfg)
    s = _override(cfg.soup, ks=args.ks, repeats=args.repeats, align=True if args.align else None, task=args.task)
    manifest, reader = read_zoo(args.zoo)
    models = final_snapshots(reader.load_all())
    rows = run_soup(models, s.task or manifest.dataset_tag, resolve_data_root(args.data, cfg), s.ks, s.repeats,
                    s.align, seed)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(rows, indent=1))
    print(soup_table(rows), end="")
    return 0


def cmd_rebasin(args) -> int:
    cfg = _config(args)
    seed = resolve_seed(args.seed, cfg)
    r = _override(cfg.rebasin, max_iters=args.max_iters)
    manifest, reader = read_zoo(args.zoo)
    models = final_snapshots(reader.load_all())
    if args.reference:
        ref = [m for m in models if m.ckpt_id == args.reference or m.meta.model_key == args.reference]
        if not ref:
            raise ConfigError(f"rebasin: reference {args.reference!r} not among the final snapshots")
        models = ref[:1] + [m for m in models if m is not ref[0]]
    rows = run_rebasin(models, Path(args.out), r.max_iters, seed, manifest.zoo_id, manifest.dataset_tag)
    for row in rows:
        print(f"{row['ckpt_id']}: distance {row['distance_before']:.4f} -> {row['distance_after']:.4f}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg)
    stages = args.stages.split(",") if args.stages else None
    outcomes = run_pipeline(cfg, seed, work_dir=args.work_dir, data_root=args.data, force=args.force,
                            stages=stages)
    for o in outcomes:
        print(f"{o.name}: {o.status}")
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline YAML file; flags override its fields")
    common.add_argument("--seed", type=int, help="run seed (default: config, then WEIGHTGEN_SEED, then 0)")
    common.add_argument("--data", help="dataset root (default: config, then WEIGHTGEN_DATA_ROOT)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="weightgen", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    z = sub.add_parser("zoogen", parents=[common], help="train a population of classifiers into a zoo")
    z.add_argument("--spec", help="YAML file with one zoo entry (same fields as a config zoo)")
    z.add_argument("--zoo-id", help="config zoo to build, or id for a new one")
    z.add_argument("--arch", choices=sorted(nets.ARCH_BUILDERS))
    z.add_argument("--dataset")
    z.add_argument("--n-models", type=int)
    z.add_argument("--epochs", type=int)
    z.add_argument("--seed-base", type=int)
    z.add_argument("--shared-init", action="store_true", help="start every model from the same weights")
    z.add_argument("--d-t", type=int, help="token size recorded in the manifest")
    z.add_argument("--out")
    z.set_defaults(func=cmd_zoogen)

    lay = sub.add_parser("layout", parents=[common], help="print the token layout of an architecture")
    lay.add_argument("--zoo")
    lay.add_argument("--arch", choices=sorted(nets.ARCH_BUILDERS))
    lay.add_argument("--d-t", type=int)
    lay.add_argument("--json", action="store_true")
    lay.set_defaults(func=cmd_layout)

    t = sub.add_parser("train", parents=[common], help="train the weight encoder/decoder on zoos")
    t.add_argument("--zoo", "--zoos", nargs="+", action="extend", help="zoo directories (several are merged)")
    t.add_argument("--out")
    t.add_argument("--preset", choices=["toy", "cnn_reference", "resnet_reference", "none"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--d-t", type=int)
    t.add_argument("--norm-mode", choices=["none", "per_token", "masked_per_token"])
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--gamma", type=float)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="generate models zero-shot from anchors")
    s.add_argument("--sane", required=True)
    s.add_argument("--zoo", required=True, help="zoo providing the anchors")
    s.add_argument("--out", required=True)
    s.add_argument("--task", help="dataset for conditioning and selection (default: the zoo's)")
    s.add_argument("--n-candidates", type=int)
    s.add_argument("--n-keep", type=int)
    s.add_argument("--n-anchors", type=int)
    s.add_argument("--anchor-epoch", type=int)
    s.add_argument("--noise", type=float, help="latent noise relative to the anchor latent std")
    s.set_defaults(func=cmd_sample)

    so = sub.add_parser("soup", parents=[common], help="accuracy of uniform weight averages")
    so.add_argument("--zoo", required=True)
    so.add_argument("--ks", type=_ints)
    so.add_argument("--repeats", type=int)
    so.add_argument("--align", action="store_true")
    so.add_argument("--task")
    so.add_argument("--report")
    so.set_defaults(func=cmd_soup)

    r = sub.add_parser("rebasin", parents=[common], help="permutation-align a zoo to one reference model")
    r.add_argument("--zoo", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--reference", help="checkpoint id or model key of the reference")
    r.add_argument("--max-iters", type=int)
    r.set_defaults(func=cmd_rebasin)

    e = sub.add_parser("eval", parents=[common], help="evaluate a zoo of models on a task suite")
    e.add_argument("--models", required=True)
    e.add_argument("--suite", help="YAML with id_tasks/nood_tasks/food_tasks (default: config suite)")
    e.add_argument("--report", help="write <report>.txt and <report>.json")
    e.add_argument("--label")
    e.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", parents=[common], help="render stored evaluation reports")
    rep.add_argument("--input", action="append", required=True)
    rep.add_argument("--format", choices=["text", "json"], default="text")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)

    pl = sub.add_parser("pipeline", parents=[common], help="run the stages declared in a config")
    pl.add_argument("config_file", metavar="config")
    pl.add_argument("--work-dir")
    pl.add_argument("--stages", help="comma-separated subset overriding the config")
    pl.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "pipeline":
        args.config = args.config_file
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, EvalConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ZooError, OSError, ValueError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
