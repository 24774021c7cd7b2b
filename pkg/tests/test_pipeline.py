import json

import pytest

from atlab import cli, pipeline
from atlab.config import ConfigError, parse_config
from atlab.data import synth_blobs
from atlab.pipeline import Pipeline, RunReport, StageError, normalize_stages
from atlab.report import emit_report, load_report, render_json

TINY = """
[train]
seed = 5
epochs = 1
batch_size = 16
train_iterations = 2
eval_size = 0
[attack]
epsilon = 0.1
step_size = 0.05
iterations = 2
eval_size = 20
sweep_iterations = 1,2
sweep_epsilons = 0.05,0.1
sweep_size = 10
[trigger]
size = 2
margin = 0
"""


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(3, 30, 64, seed=0, image_side=8, test_per_class=10)


def tiny_cfg(extra=""):
    return parse_config(TINY + extra)


def body(report):
    b = json.loads(render_json(report))
    b.pop("wall_clock_seconds")
    return b


def test_stage_order_and_validation():
    assert normalize_stages(["attacks", "data", "atim"]) == ["data", "atim", "attacks"]
    with pytest.raises(ConfigError):
        normalize_stages(["train"])


def test_data_only_has_empty_metrics(blobs, tmp_path):
    rep = Pipeline(tiny_cfg(), tmp_path, data=blobs).run(["data"])
    assert rep.metrics == {} and rep.stages == ["data"]


def test_attacks_and_sweep_metrics(blobs, tmp_path):
    rep = Pipeline(tiny_cfg(), tmp_path, data=blobs).run(["surrogate", "atim", "attacks", "sweep"])
    for k in ("acc_benign", "acc_trigger_only", "acc_adversarial", "acc_advtrojan",
              "acc_transferred_advtrojan"):
        assert 0.0 <= rep.metrics[f"atim.{k}"] <= 1.0
    assert [r[0] for r in rep.tables["sweep_epsilon"].rows] == [0.05, 0.1]
    assert [r[0] for r in rep.tables["sweep_method"].rows] == ["fgsm", "bim", "madry"]
    assert (tmp_path / "checkpoints" / "atim.ckpt").exists()
    written = emit_report(rep, tmp_path / "r")
    assert (tmp_path / "r" / "sweep_epsilon.csv").read_text().count("\n") == 3
    assert len(written) == 2 + len(rep.tables)


def test_rerun_is_byte_identical_and_resumes(blobs, tmp_path, monkeypatch):
    a = Pipeline(tiny_cfg(), tmp_path / "a", data=blobs).run(["surrogate", "atim", "attacks"])
    b = Pipeline(tiny_cfg(), tmp_path / "b", data=blobs).run(["surrogate", "atim", "attacks"])
    assert body(a) == body(b)

    def no_training(*args, **kw):
        raise AssertionError("should have resumed from checkpoint")

    monkeypatch.setattr(pipeline, "train", no_training)
    c = Pipeline(tiny_cfg(), tmp_path / "a", data=blobs).run(["surrogate", "atim", "attacks"])
    assert body(c) == body(a)


def test_changed_config_does_not_reuse_checkpoint(blobs, tmp_path):
    p = Pipeline(tiny_cfg(), tmp_path, data=blobs)
    p.model("surrogate")
    other = parse_config(TINY.replace("seed = 5", "seed = 6"))
    assert Pipeline(other, tmp_path, data=blobs)._cache_key("surrogate") != p._cache_key("surrogate")


def test_stage_failure_carries_name_and_partial(blobs, tmp_path, monkeypatch):
    p = Pipeline(tiny_cfg(), tmp_path, data=blobs)

    def boom():
        raise RuntimeError("kaput")

    monkeypatch.setattr(p, "stage_defenses", boom)
    with pytest.raises(StageError) as e:
        p.run(["defenses"])
    assert e.value.stage == "defenses" and e.value.exit_code == 5
    assert (tmp_path / "partial" / "report.json").exists()


def test_report_emission_byte_identical(tmp_path):
    rep = RunReport(1, {"train": {"seed": 1}}, ["data"], {"b": 0.5, "a": [1, 2]}, {}, {"data": 0.1})
    emit_report(rep, tmp_path / "x")
    emit_report(rep, tmp_path / "y")
    for name in ("report.json", "metrics.csv"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()
    keys = list(json.loads((tmp_path / "x" / "report.json").read_text())["metrics"])
    assert keys == sorted(keys)
    back = load_report(tmp_path / "x" / "report.json")
    assert back.metrics == {"a": [1, 2], "b": 0.5}


def test_empty_metrics_header_only_csv(tmp_path):
    emit_report(RunReport(1, {}, [], {}, {}, {}), tmp_path)
    assert (tmp_path / "metrics.csv").read_text() == "key,value\n"


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["data", "--out", str(tmp_path)]) == 2  # no seed
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nseed = 1\nwhat = 3\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert cli.main(["run", "--seed", "1", "--stages", "bogus", "--out", str(tmp_path)]) == 2
    missing = tmp_path / "nodata.ini"
    missing.write_text(f"[train]\nseed = 1\n[dataset]\nname = fmnist\ndata_dir = {tmp_path / 'empty'}\n")
    assert cli.main(["attack", "--config", str(missing), "--out", str(tmp_path / "o")]) == 3
    assert "error" in capsys.readouterr().err


def test_cli_parser_flags():
    args = cli.build_parser().parse_args(["fedsim", "--seed", "3", "--attack-rounds", "1,2",
                                          "--freeze-trigger", "--preset", "bim", "--subsample", "500"])
    o = cli._overrides(args)
    cfg = parse_config("", o)
    assert cfg.fedsim.attack_rounds == (1, 2) and cfg.trigger.freeze and cfg.dataset.subsample == 500
    assert cfg.attack_config().init == "zero" and cfg.attack_config().freeze_trigger
