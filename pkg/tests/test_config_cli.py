import json
from pathlib import Path

import pytest
import yaml

from weightgen.cli import build_parser, main
from weightgen.config import interpolate, load_config, parse_config, resolve_data_root, resolve_seed
from weightgen.model import ConfigError
from weightgen.pipeline import run_pipeline
from weightgen.zoo_store import read_zoo

SUBCOMMANDS = ["zoogen", "layout", "train", "sample", "soup", "rebasin", "eval", "report", "pipeline"]


def tiny_config(data_root, **extra):
    doc = {
        "seed": 3,
        "data_root": str(data_root),
        "stages": ["zoogen", "train", "sample", "eval", "report"],
        "zoos": [
            {"id": "a", "dataset": "digits", "n_models": 4, "epochs": 2, "shared_init": True},
            {"id": "b", "dataset": "printed", "n_models": 4, "epochs": 2, "shared_init": True},
        ],
        "sane": {"preset": "toy", "epochs": 2, "d_model": 32, "d_lat": 16, "d_proj": 8},
        "sample": {"n_candidates": 3, "n_keep": 2, "n_anchors": 2},
        "suite": {"id_tasks": ["digits", "printed"]},
    }
    doc.update(extra)
    return doc


def write_yaml(path: Path, doc) -> Path:
    path.write_text(yaml.safe_dump(doc))
    return path


# -- schema and interpolation ----------------------------------------------------------


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"zoos": [{"id": "x", "dataset": "digits", "n_models": 0}]}, "zoos[0].n_models"),
        ({"zoos": [{"id": "x", "dataset": "digits", "colour": 1}]}, "zoos[0].colour"),
        ({"zoos": [{"id": "x"}]}, "zoos[0].dataset"),
        ({"sane": {"epochs": 2, "bogus": 1}}, "bogus"),
        ({"sample": {"n_candidates": 3, "n_keep": 5}}, "n_keep"),
        ({"stages": ["zoogen", "deploy"]}, "stages[1]"),
        ({"anchors": {"digits": "missing"}}, "anchors.digits"),
        ({"wat": 1}, "wat"),
    ],
)
def test_schema_errors_name_the_field(doc, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert field in str(exc.value)


def test_sane_section_fields_reach_the_model_config():
    cfg = parse_config({"sane": {"preset": "toy", "epochs": 3, "overrides": {"lr": 0.01}}})
    sc = cfg.sane_config(seed=9)
    assert (sc.epochs, sc.lr, sc.seed, sc.d_model) == (3, 0.01, 9, 64)
    bad = parse_config({"sane": {"d_model": 30, "n_heads": 4}})
    with pytest.raises(ConfigError, match="sane.d_model"):
        bad.sane_config(0)


def test_interpolation(monkeypatch):
    monkeypatch.setenv("WG_ROOT", "/srv/data")
    monkeypatch.setenv("WG_N", "7")
    monkeypatch.delenv("WG_MISSING", raising=False)
    doc = {"data_root": "${WG_ROOT}/sets", "seed": "${WG_N}", "work_dir": "${WG_MISSING:-runs/x}"}
    assert interpolate(doc) == {"data_root": "/srv/data/sets", "seed": 7, "work_dir": "runs/x"}
    with pytest.raises(ConfigError, match=r"zoos\[0\].dataset: environment variable WG_MISSING"):
        interpolate({"zoos": [{"dataset": "${WG_MISSING}"}]})


def test_seed_and_data_root_precedence(monkeypatch, tmp_path):
    monkeypatch.delenv("WEIGHTGEN_SEED", raising=False)
    monkeypatch.delenv("WEIGHTGEN_DATA_ROOT", raising=False)
    assert resolve_seed(None) == 0
    monkeypatch.setenv("WEIGHTGEN_SEED", "11")
    assert resolve_seed(None) == 11
    assert resolve_seed(None, parse_config({"seed": 5})) == 5
    assert resolve_seed(2, parse_config({"seed": 5})) == 2
    monkeypatch.setenv("WEIGHTGEN_SEED", "eleven")
    with pytest.raises(ConfigError):
        resolve_seed(None)
    monkeypatch.setenv("WEIGHTGEN_DATA_ROOT", str(tmp_path / "env"))
    assert resolve_data_root(None) == tmp_path / "env"
    assert resolve_data_root(None, parse_config({"data_root": "cfg"})) == Path("cfg")
    assert resolve_data_root("flag", parse_config({"data_root": "cfg"})) == Path("flag")


def test_shipped_configs_validate():
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.yaml"))
    assert files
    for f in files:
        cfg = load_config(f)
        cfg.sane_config(0)


def test_malformed_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("zoos: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")


# -- command line --------------------------------------------------------------------


def test_every_subcommand_exists():
    parser = build_parser()
    choices = next(a for a in parser._actions if a.dest == "command").choices
    assert sorted(choices) == sorted(SUBCOMMANDS)
    for name in SUBCOMMANDS:
        with pytest.raises(SystemExit) as exc:
            main([name, "--help"])
        assert exc.value.code == 0


def test_layout_command(capsys):
    assert main(["layout", "--arch", "small_cnn", "--d-t", "289", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_tokens"] == sum(l["tokens"] for l in doc["layers"])
    assert main(["layout", "--arch", "mini_resnet", "--d-t", "288"]) == 0
    assert "stem_bn" in capsys.readouterr().out
    assert main(["layout", "--arch", "mlp"]) == 2


def test_zero_stage_pipeline_exits_cleanly(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {"stages": [], "work_dir": str(tmp_path / "work")})
    assert main(["pipeline", str(cfg)]) == 0
    assert not (tmp_path / "work").exists()


def test_pipeline_reports_config_and_stage_errors(tmp_path, capsys, data_root):
    bad = write_yaml(tmp_path / "bad.yaml", {"zoos": [{"id": "x", "dataset": "digits", "n_models": -1}]})
    assert main(["pipeline", str(bad)]) == 2
    assert "zoos[0].n_models" in capsys.readouterr().err
    good = write_yaml(tmp_path / "good.yaml", tiny_config(data_root))
    assert main(["pipeline", str(good), "--work-dir", str(tmp_path / "w"), "--stages", "nonsense"]) == 2
    assert main(["pipeline", str(good), "--work-dir", str(tmp_path / "w"), "--stages", "train"]) == 3
    assert "[stage zoogen-a]" in capsys.readouterr().err


def test_pipeline_resumes_and_skips(tmp_path, data_root):
    cfg = parse_config(tiny_config(data_root))
    work = tmp_path / "w"
    first = run_pipeline(cfg, 3, work_dir=work)
    assert [o.status for o in first] == ["ran"] * len(first)
    names = [o.name for o in first]
    assert names == ["zoogen-a", "zoogen-b", "train", "sample-digits", "sample-printed", "eval", "report"]
    report = (work / "report" / "report.txt").read_text()
    assert report.splitlines()[0] == "| Zoo | digits (ID) | printed (ID) | AVG |"
    assert "| digits + printed |" in report
    kept, _ = read_zoo(work / "samples" / "digits")
    assert len(kept) == 2

    again = run_pipeline(cfg, 3, work_dir=work)
    assert [o.status for o in again] == ["skipped"] * len(again)

    # a changed sampling parameter reruns sampling and everything after it
    cfg2 = parse_config(tiny_config(data_root, sample={"n_candidates": 4, "n_keep": 2, "n_anchors": 2}))
    third = {o.name: o.status for o in run_pipeline(cfg2, 3, work_dir=work)}
    assert third["train"] == "skipped" and third["zoogen-a"] == "skipped"
    assert third["sample-digits"] == third["eval"] == third["report"] == "ran"

    # a tampered output is detected
    (work / "report" / "report.txt").write_text("edited")
    fourth = {o.name: o.status for o in run_pipeline(cfg2, 3, work_dir=work)}
    assert fourth["report"] == "ran" and fourth["eval"] == "skipped"


def test_subcommands_end_to_end(tmp_path, data_root, capsys):
    common = ["--data", str(data_root), "--seed", "4"]
    zoo = tmp_path / "zoo"
    assert main(["zoogen", *common, "--dataset", "digits", "--n-models", "4", "--epochs", "2",
                 "--shared-init", "--d-t", "32", "--out", str(zoo)]) == 0
    manifest, _ = read_zoo(zoo)
    assert len(manifest) == 8 and manifest.d_t == 32

    sane = tmp_path / "sane"
    assert main(["train", *common, "--zoo", str(zoo), "--out", str(sane), "--epochs", "1"]) == 0
    assert (sane / "sane.json").exists()

    samples = tmp_path / "samples"
    assert main(["sample", *common, "--sane", str(sane), "--zoo", str(zoo), "--out", str(samples),
                 "--n-candidates", "3", "--n-keep", "2", "--n-anchors", "2"]) == 0
    assert len(read_zoo(samples)[0]) == 2

    suite = write_yaml(tmp_path / "suite.yaml", {"id_tasks": ["digits"], "food_tasks": ["letters"]})
    rep = tmp_path / "rep" / "samples"
    assert main(["eval", *common, "--models", str(samples), "--suite", str(suite), "--report", str(rep),
                 "--label", "gen"]) == 0
    out = capsys.readouterr().out
    assert "| gen |" in out
    assert main(["report", "--input", str(rep.with_suffix(".json")), "--input", str(rep.with_suffix(".json"))]) == 0
    assert capsys.readouterr().out.count("| gen |") == 2

    assert main(["soup", *common, "--zoo", str(zoo), "--ks", "1,2", "--repeats", "2", "--align",
                 "--report", str(tmp_path / "soup.json")]) == 0
    rows = json.loads((tmp_path / "soup.json").read_text())
    assert [(r["k"], r["aligned"]) for r in rows] == [(1, False), (2, False), (1, True), (2, True)]

    aligned = tmp_path / "aligned"
    assert main(["rebasin", *common, "--zoo", str(zoo), "--out", str(aligned), "--max-iters", "5"]) == 0
    assert len(read_zoo(aligned)[0]) == 4
    assert "distance" in capsys.readouterr().out


def test_command_errors_are_reported_not_raised(tmp_path, capsys):
    assert main(["eval", "--models", str(tmp_path / "nowhere"), "--suite", str(tmp_path / "nope.yaml")]) == 1
    assert "error [eval]" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["soup", "--zoo", str(tmp_path), "--ks", "1,x"])
    assert exc.value.code == 2
