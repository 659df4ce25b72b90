import json

import pytest

from unigrf.cli import build_parser, config_from_args, main
from unigrf.synthetic import generate_ratings, write_ratings


@pytest.fixture
def raw(tmp_path):
    rows = generate_ratings(num_users=20, num_items=30, min_len=5, max_len=12, seed=2)
    write_ratings(tmp_path / "ratings.dat", rows, "dat")
    return tmp_path / "ratings.dat"


TRAIN = ["--n", "6", "--d", "8", "--layers", "1", "--num-negatives", "4", "--m", "1", "--max-epochs", "1"]


def test_prepare_is_idempotent(raw, tmp_path, capsys):
    assert main(["prepare", str(raw), str(tmp_path / "s"), "--n", "6"]) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(["prepare", str(raw), str(tmp_path / "s"), "--n", "6"]) == 0
    assert json.loads(capsys.readouterr().out) == first


def test_train_eval_report_roundtrip(raw, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("UNIGRF_OUTPUT_ROOT", str(tmp_path / "runs"))
    assert main(["prepare", str(raw), str(tmp_path / "s"), "--n", "6"]) == 0
    capsys.readouterr()
    assert main(["train", "--data", str(tmp_path / "s"), *TRAIN]) == 0
    summary = json.loads(capsys.readouterr().out)
    run_dir = tmp_path / "runs" / f"run-{summary['config_hash']}"
    assert summary["output_dir"] == str(run_dir)
    assert (run_dir / "metrics.csv").exists()
    assert main(["eval", str(run_dir / "best.bin"), str(tmp_path / "s"), "--split", "valid", "--rank-dump"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["split"] == "valid" and (run_dir / "valid_report.ranks.csv").exists()
    assert main(["report", str(run_dir)]) == 0
    assert json.loads(capsys.readouterr().out)["weighter_violations"] == []


def test_config_file_with_flag_override(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"data": "somewhere", "d": 32, "m": 3}))
    args = build_parser().parse_args(["train", "--config", str(tmp_path / "c.json"), "--m", "7", "--audit"])
    cfg = config_from_args(args)
    assert (cfg.data, cfg.d, cfg.m, cfg.audit) == ("somewhere", 32, 7, True)


def test_exit_codes(raw, tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--n", "2"]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"nope": 1}))
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), *TRAIN]) == 3
    assert main(["eval", str(tmp_path / "missing.bin"), str(tmp_path)]) == 3
    (tmp_path / "junk.dat").write_text("not::a\nrow\n")
    assert main(["prepare", str(tmp_path / "junk.dat"), str(tmp_path / "o")]) == 3
    assert main(["report", str(tmp_path)]) == 3
    err = capsys.readouterr().err
    assert "ConfigError" in err and "DataError" in err


def test_numeric_failure_exit_code(raw, tmp_path, monkeypatch):
    from unigrf import trainer

    assert main(["prepare", str(raw), str(tmp_path / "s"), "--n", "6"]) == 0

    def explode(self, rows):
        raise trainer.NumericError("non-finite loss")

    monkeypatch.setattr(trainer.Trainer, "train_step", explode)
    out = tmp_path / "run"
    assert main(["train", "--data", str(tmp_path / "s"), *TRAIN, "--output-dir", str(out)]) == 4
    assert "non-finite" in (out / "failure.json").read_text()


def test_sweep_command(raw, tmp_path, capsys):
    assert main(["prepare", str(raw), str(tmp_path / "s"), "--n", "6"]) == 0
    capsys.readouterr()
    code = main(["sweep", "--axis", "m", "--values", "0", "1", "--data", str(tmp_path / "s"), *TRAIN,
                 "--output-dir", str(tmp_path / "sw")])
    assert code == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["value"] for r in rows] == [0, 1]
    assert (tmp_path / "sw" / "sweep_summary.csv").exists()
