import json
import re

import pytest
import yaml

from mcmd.cli import main


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "tiny.yaml"
    path.write_text(yaml.safe_dump({"preset": "tiny", "data": {"root": str(root / "data")}}))
    return root, str(path)


def _hashes(out):
    return dict(re.findall(r"^(source|target) ([0-9a-f]+)", out, flags=re.M))


def test_synth_twice_same_hashes(tiny_cfg, capsys, tmp_path):
    _, cfg = tiny_cfg
    assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    a = _hashes(capsys.readouterr().out)
    assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    b = _hashes(capsys.readouterr().out)
    assert a == b and set(a) == {"source", "target"}
    assert main(["synth", "--config", cfg, "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert _hashes(capsys.readouterr().out) != a


def test_usage_errors(capsys):
    assert main(["distill"]) == 1
    assert "--config" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["synth", "--no-such-flag"]) == 1
    assert main(["synth", "--fold", "x"]) == 1
    assert main(["synth", "--config", "no-such-preset"]) == 1


def test_runtime_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"preset": "tiny", "data": {"root": str(tmp_path / "empty")}}))
    assert main(["distill", "--config", str(cfg)]) == 2
    assert "prepare" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained_run(tiny_cfg):
    root, cfg = tiny_cfg
    assert main(["synth", "--config", cfg]) == 0
    assert main(["prepare", "--config", cfg]) == 0
    run = root / "run"
    assert main(["pretrain", "--config", cfg, "--run-dir", str(run), "--fold", "0"]) == 0
    assert main(["distill", "--config", cfg, "--run-dir", str(run), "--fold", "0",
                 "--init", str(run / "pretrain" / "m0.params")]) == 0
    return root, cfg, run


def test_distill_writes_run_layout(trained_run):
    _, _, run = trained_run
    for name in ("config.yaml", "results.csv", "confusion_fold_0.csv", "summary.json", "summary.txt"):
        assert (run / name).exists(), name
    for name in ("steps.jsonl", "student.params", "teacher.params", "record.json", "config.yaml"):
        assert (run / "fold_0" / name).exists(), name
    steps = [json.loads(l) for l in (run / "fold_0" / "steps.jsonl").read_text().splitlines()]
    assert steps and set(steps[0]) >= {"step", "fold", "ce_teacher", "ce_student", "kd_filter", "kd_lstm",
                                       "kd_output", "total"}
    rec = json.loads((run / "fold_0" / "record.json").read_text())
    snap = yaml.safe_load((run / "config.yaml").read_text())
    assert rec["config_hash"] == snap["config_hash"]


def test_evaluate_matches_record(trained_run, capsys):
    _, cfg, run = trained_run
    capsys.readouterr()
    assert main(["evaluate", "--config", cfg, "--run-dir", str(run), "--fold", "0"]) == 0
    out = capsys.readouterr().out
    acc, mf1, kappa = (float(v) for v in re.search(r"ACC (\S+) MF1 (\S+) kappa (\S+)", out).groups())
    rec = json.loads((run / "fold_0" / "record.json").read_text())["test"]["student"]
    assert (acc, mf1, kappa) == (rec["acc"], rec["mf1"], rec["kappa"])


def test_evaluate_fold_out_of_range(trained_run):
    _, cfg, run = trained_run
    assert main(["evaluate", "--config", cfg, "--run-dir", str(run), "--fold", "99"]) == 1


def test_checkpointed_resume_matches(trained_run, tmp_path):
    _, cfg, run = trained_run
    other = tmp_path / "ck"
    init = str(run / "pretrain" / "m0.params")
    assert main(["distill", "--config", cfg, "--run-dir", str(other), "--fold", "0", "--init", init,
                 "--checkpoint-every", "2"]) == 0
    assert (other / "fold_0" / "state.ckpt").exists()
    assert (other / "fold_0" / "student.params").read_bytes() == (run / "fold_0" / "student.params").read_bytes()
    assert (other / "results.csv").read_bytes() == (run / "results.csv").read_bytes()


def test_ablate_writes_grid(trained_run, capsys):
    _, cfg, run = trained_run
    assert main(["ablate", "--config", cfg, "--run-dir", str(run), "--fold", "0", "--grid", "scenarios_student"]) == 0
    assert "Baseline-1C" in capsys.readouterr().out
    for name in ("grid.json", "grid.csv", "grid.txt"):
        assert (run / "ablation" / name).exists()
    assert main(["ablate", "--config", cfg, "--run-dir", str(run), "--grid", "nope"]) == 1
