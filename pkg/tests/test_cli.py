import json
import shutil
import subprocess
import sys

import pytest

from olora.cli import main

FAST = ["--n-per-task", "16", "--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--epochs", "1",
        "--lr", "0.1"]


def train(out, *extra):
    return main(["train", "--synthetic", "3", "--strategy", "olora", "--lambda1", "0.5", "--rank", "4",
                 "--seed", "7", "--out", str(out), *FAST, *extra])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "a"
    assert train(out, "--save-every-task") == 0
    return out


def test_train_writes_all_outputs(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"report.json", "acc.csv", "train_log.csv", "model.olra", "manifest.json",
            "acc.png", "train_log.png", "data"} <= names
    assert "AA" in json.loads((run_dir / "report.json").read_text())


def test_identical_invocations_give_identical_report(run_dir, tmp_path):
    assert train(tmp_path / "b", "--save-every-task") == 0
    assert (tmp_path / "b" / "report.json").read_bytes() == (run_dir / "report.json").read_bytes()
    assert (tmp_path / "b" / "model.olra").read_bytes() == (run_dir / "model.olra").read_bytes()


def test_manifest_hash_tracks_inputs(run_dir, tmp_path):
    h0 = json.loads((run_dir / "manifest.json").read_text())["input_hash"]
    assert train(tmp_path / "c", "--save-every-task") == 0
    assert json.loads((tmp_path / "c" / "manifest.json").read_text())["input_hash"] == h0
    assert train(tmp_path / "d", "--lambda1", "0.25") == 0
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["input_hash"] != h0


def test_manifest_hash_tracks_task_file_bytes(run_dir, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(run_dir / "data", data)
    args = ["train", "--sequence", str(data / "sequence.txt"), *FAST]
    assert main([*args, "--out", str(tmp_path / "x")]) == 0
    f = data / "task1.jsonl"
    f.write_bytes(f.read_bytes().replace(b'"the', b'"a', 1))
    assert main([*args, "--out", str(tmp_path / "y")]) == 0
    hx = json.loads((tmp_path / "x" / "manifest.json").read_text())["input_hash"]
    hy = json.loads((tmp_path / "y" / "manifest.json").read_text())["input_hash"]
    assert hx != hy


def test_eval_reproduces_final_row(run_dir, capsys):
    seq = run_dir / "data" / "sequence.txt"
    assert main(["eval", "--checkpoint", str(run_dir / "model.olra"), "--sequence", str(seq)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    accs = [float(line.split("\t")[1]) for line in lines[:-1]]
    report = json.loads((run_dir / "report.json").read_text())
    assert accs == report["acc"][-1]
    assert float(lines[-1].split("\t")[1]) == report["AA"]


def test_merge_then_eval_matches(run_dir, tmp_path, capsys):
    seq = str(run_dir / "data" / "sequence.txt")
    assert main(["merge", "--checkpoint", str(run_dir / "model.olra"), "--out", str(tmp_path)]) == 0
    merged = tmp_path / "model.merged.olra"
    assert merged.stat().st_size < (run_dir / "model.olra").stat().st_size
    capsys.readouterr()
    main(["eval", "--checkpoint", str(run_dir / "model.olra"), "--sequence", seq])
    before = capsys.readouterr().out
    main(["eval", "--checkpoint", str(merged), "--sequence", seq])
    assert capsys.readouterr().out == before


def test_drift_identical_checkpoints_all_zero(run_dir, tmp_path):
    ck = str(run_dir / "model.olra")
    rc = main(["drift", "--checkpoint", ck, "--checkpoint", ck,
               "--sequence", str(run_dir / "data" / "sequence.txt"), "--out", str(tmp_path)])
    assert rc == 0
    summary = json.loads((tmp_path / "drift.json").read_text())
    assert summary["mean_loss_delta"] == 0.0 and set(summary["hidden_state_drift"]) == {0.0}
    assert (tmp_path / "drift_loss.png").exists() and (tmp_path / "drift_hidden.png").exists()


def test_drift_between_task_snapshots_uses_past_tasks(run_dir, tmp_path):
    rc = main(["drift", "--checkpoint", str(run_dir / "model.task0.olra"),
               "--checkpoint", str(run_dir / "model.task1.olra"),
               "--sequence", str(run_dir / "data" / "sequence.txt"), "--out", str(tmp_path)])
    assert rc == 0
    assert json.loads((tmp_path / "drift.json").read_text())["past_tasks"] == ["task0"]


def test_sweep_default_grid(tmp_path):
    rc = main(["sweep", "--synthetic", "2", "--out", str(tmp_path), *FAST])
    assert rc == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["2", "4", "8", "16"]
    assert (tmp_path / "sweep.png").exists()


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# experiment\nstrategy = inc_lora\nlambda1 = 0.9\nepochs = 1\nn-per-task = 12\n"
                   "d_model = 16\nn_heads = 2\nn_layers = 1\n", encoding="utf-8")
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--synthetic", "2", "--lambda1", "0.1", "--out", str(out)]) == 0
    conf = json.loads((out / "report.json").read_text())["config"]
    assert conf["strategy"] == "inc_lora" and conf["lambda1"] == 0.1 and conf["d_model"] == 16


def test_unknown_config_key_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n", encoding="utf-8")
    assert main(["train", "--config", str(cfg), "--synthetic", "2", "--out", str(tmp_path)]) == 1
    assert "colour" in capsys.readouterr().err


def test_unknown_flag_exit_1_with_usage(capsys):
    assert main(["eval", "--frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_command_exit_1(capsys):
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_sequence_exit_2_names_path(tmp_path, capsys):
    missing = tmp_path / "nope" / "seq.txt"
    assert main(["train", "--sequence", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_corrupt_checkpoint_exit_2(tmp_path, run_dir):
    bad = tmp_path / "bad.olra"
    bad.write_bytes(b"nope")
    assert main(["eval", "--checkpoint", str(bad), "--sequence", str(run_dir / "data" / "sequence.txt")]) == 2


def test_bad_value_exit_1(tmp_path):
    assert main(["train", "--synthetic", "2", "--epochs", "0", "--out", str(tmp_path)]) == 1
    assert main(["train", "--synthetic", "1", "--out", str(tmp_path)]) == 1


def test_divergence_exit_3(tmp_path, capsys):
    assert main(["train", "--synthetic", "2", "--out", str(tmp_path), *FAST, "--lr", "1e6"]) == 3
    assert "numeric" in capsys.readouterr().err


def test_nothing_written_outside_out(tmp_path, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    assert main(["train", "--synthetic", "2", "--out", "o", *FAST]) == 0
    assert [p.name for p in work.iterdir()] == ["o"]


def test_console_script_runs(tmp_path):
    exe = shutil.which("olora")
    cmd = [exe] if exe else [sys.executable, "-m", "olora.cli"]
    proc = subprocess.run([*cmd, "train", "--bogus"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr
