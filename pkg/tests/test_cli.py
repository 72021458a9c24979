import json

import pytest

from mmdes.cli import main
from mmdes.data_model import load_dataset

SMALL = {
    "source": {"synthetic": {"persons": 8, "frames": 300}},
    "repetitions": 1,
    "k": 20,
    "meta_window_len": 50,
    "meta_epochs": 20,
    "n_test": 2,
    "n_val": 2,
    "cross_attention": {"epochs": 3, "clips": 4, "clip_len": 2},
}


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_is_deterministic(tmp_path, capsys):
    args = ["gen", "--persons", "4", "--frames", "50", "--seed", "42"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    ds = load_dataset(tmp_path / "a" / "manifest.json")
    assert len(ds.persons) == 4
    assert len([p for p in (tmp_path / "a").iterdir() if p.is_dir()]) == 4
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


@pytest.mark.parametrize("argv", [
    ["gen", "--persons", "0", "--out", "x"],
    ["gen", "--frames", "abc", "--out", "x"],
    ["run", "--unknown-flag"],
    ["frobnicate"],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_run_writes_selected_format(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--format", "csv"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["report.csv"]
    assert "Audio disabled (mean)" in capsys.readouterr().out


def test_run_all_formats_and_report(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--dump-weights"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["report.csv", "report.json", "report.md", "weights.csv"]
    capsys.readouterr()
    assert main(["report", "--in", str(out / "report.json"), "--sensitivity"]) == 0
    assert "% CCC change" in capsys.readouterr().out


def test_ablate(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["ablate", "--config", str(cfg), "--disable-modality", "audio", "--impute", "mean"]) == 0
    text = capsys.readouterr().out
    assert "Audio disabled (mean)" in text and "Video disabled" not in text
    assert "% CCC change" in text


def test_malformed_config_exit_1(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(dict(SMALL, neighbours=5)))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "neighbours" in capsys.readouterr().err
    cfg.write_text("{not json")
    assert main(["run", "--config", str(cfg)]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1


def test_runtime_failure_exit_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(dict(SMALL, source={"manifest": "nowhere/manifest.json"})))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "manifest" in capsys.readouterr().err


def test_bad_env_seed(monkeypatch, capsys):
    monkeypatch.setenv("MMDES_SEED", "x")
    assert main(["run", "--repetitions", "1"]) == 1


def test_grad_check(capsys):
    assert main(["grad-check"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 10
    assert "PASS" in lines[-1]
    assert main(["grad-check", "--corrupt", "W_jv"]) == 2
    assert "FAIL" in capsys.readouterr().out
