import json

import pytest

from casa.cli import main

CONFIG = {
    "dataset": {"samples_per_domain": 40, "seed": 3},
    "test_domain": 1,
    "num_seeds": 1,
    "train": {"steps_stage1": 20, "steps_stage2": 20, "checkpoint_every": 10, "hidden_dim": 8, "feature_dim": 4},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(CONFIG))
    return path


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")
    return json.loads(err[0][len("error: "):])


def test_gen_data(config, tmp_path):
    assert main(["gen-data", "--config", str(config), "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "dataset.csv").exists() and (tmp_path / "d" / "dataset.meta.json").exists()


def test_train_eval_report(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out), "--seed", "3"]) == 0
    assert "CASA" in capsys.readouterr().out
    assert main(["gen-data", "--config", str(config), "--out", str(tmp_path / "d"), "--seed", "3"]) == 0
    ckpt = out / "checkpoint_none_seed3_test1.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tmp_path / "d" / "dataset.csv"), "--domain", "1",
                 "--predictions", str(tmp_path / "p.csv")]) == 0
    line = capsys.readouterr().out.strip()
    acc = float(line.split()[1])
    reported = float((out / "report.csv").read_text().splitlines()[1].split(",")[1])
    assert acc == reported
    before = (out / "report.csv").read_text()
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "report.csv").read_text() == before


def test_ablate_subset(config, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(config), "--out", str(out), "--variants", "none", "ensemble_no_adapter"]) == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["CASA", "Ensemble(h.f)"]


def test_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({**CONFIG, "learning_rate": 1}))
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == 1
    err = error_line(capsys)
    assert err["type"] == "ConfigError" and "learning_rate" in err["message"]


def test_missing_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert error_line(capsys)["type"] == "FileNotFoundError"


def test_corrupt_checkpoint(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"format_version": 1, "bund')
    (tmp_path / "d.csv").write_text("domain,label,f0\n0,0,1.0\n")
    assert main(["eval", "--checkpoint", str(tmp_path / "c.json"), "--data", str(tmp_path / "d.csv"), "--domain", "0"]) == 1
    assert error_line(capsys)["type"] == "ParseError"


def test_usage_error_exits_nonzero():
    with pytest.raises(SystemExit) as info:
        main(["train", "--seed", "not-a-number"])
    assert info.value.code != 0
