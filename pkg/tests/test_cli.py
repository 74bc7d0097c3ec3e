import json
import subprocess
import sys

import pytest

from flashdistill.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, content_hash, main
from flashdistill.schedule import read_grid_csv

CFG = """seed = 0
t_total = 1000
grid_kind = respaced
rho = 2.25
k_target = 4
k_curriculum = 1..4
lr_scale = 1.0
lambda_js = 0.1
divergence = reverse_kl
batch_size = 4
max_iters = 2
aux_steps = 1
ema_decay = 0.9
r1_weight = 1e-3
r1_sigma = 0.01
gan_coeff = 0.2
dataset_path = {data}
out_dir = {out}
layers = 4
hidden = 8
attn_dim = 4
teacher_iters = 5
warmup_frac = 0
"""


@pytest.fixture()
def setup(tmp_path):
    data = tmp_path / "data.xyz"
    assert main(["dataset", "--n", "20", "--out", str(data)]) == EXIT_OK
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CFG.format(data=data, out=tmp_path / "run"))
    return tmp_path, data, cfg


def test_schedule_csv(tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert main(["schedule", "--n", "4", "--rho", "2.25", "--out", str(out)]) == EXIT_OK
    rows = read_grid_csv(out)
    ts = [int(r["t"]) for r in rows]
    assert len(ts) == 4 and ts == sorted(ts, reverse=True) and ts[0] == 1000


def test_schedule_low_noise_fraction_report(capsys):
    assert main(["schedule", "--n", "1000", "--rho", "7"]) == EXIT_OK
    err = capsys.readouterr().err
    assert "0.392" in err


def test_dataset_metrics_printed(tmp_path, capsys):
    assert main(["dataset", "--n", "10", "--out", str(tmp_path / "d.xyz")]) == EXIT_OK
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["valid"] == 1.0 and rec["n_samples"] == 10


def test_full_pipeline(setup, capsys):
    tmp, data, cfg = setup
    assert main(["teacher-train", "--config", str(cfg)]) == EXIT_OK
    teacher = tmp / "run" / "teacher.ckpt"
    manifest = json.loads((tmp / "run" / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["command"] == "teacher-train"
    out = tmp / "dist"
    assert main(["distill", "--config", str(cfg), "--teacher", str(teacher), "--out-dir", str(out)]) == EXIT_OK
    assert (out / "student.ckpt").exists() and (out / "metrics.jsonl").exists()
    samples = tmp / "s.xyz"
    assert main(["sample", "--ckpt", str(out / "student.ckpt"), "--n", "3", "--out", str(samples)]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--dataset", str(data), "--ckpt", str(out / "student.ckpt"), "--n", "5"]) == EXIT_OK
    rec = json.loads(capsys.readouterr().out.strip())
    assert rec["nfe"] == 4 and rec["n_samples"] == 5


def test_missing_required_key_exit_code(setup, capsys):
    tmp, data, cfg = setup
    cfg.write_text("\n".join(l for l in cfg.read_text().splitlines() if not l.startswith("lambda_js")))
    assert main(["teacher-train", "--config", str(cfg)]) == EXIT_CONFIG
    assert "lambda_js" in capsys.readouterr().err


def test_bad_override_exit_code(setup):
    _, _, cfg = setup
    assert main(["teacher-train", "--config", str(cfg), "--set", "rho"]) == EXIT_CONFIG
    assert main(["teacher-train", "--config", str(cfg), "--k-target", "x"]) == EXIT_CONFIG


def test_missing_files_exit_code(setup, tmp_path):
    _, _, cfg = setup
    assert main(["distill", "--config", str(cfg), "--teacher", str(tmp_path / "none.ckpt")]) == EXIT_CONFIG
    assert main(["teacher-train", "--config", str(cfg), "--dataset-path", str(tmp_path / "none.xyz")]) == EXIT_CONFIG
    assert main(["eval", "--dataset", str(tmp_path / "none.xyz")]) == EXIT_CONFIG


def test_numeric_abort_exit_code(setup, monkeypatch):
    from flashdistill import trainer

    tmp, _, cfg = setup
    assert main(["teacher-train", "--config", str(cfg)]) == EXIT_OK

    def boom(*a, **k):
        raise FloatingPointError("non-finite")

    monkeypatch.setattr(trainer, "dmd_step", boom)
    code = main(["distill", "--config", str(cfg), "--teacher", str(tmp / "run" / "teacher.ckpt"), "--max-iters", "12", "--aux-steps", "0"])
    assert code == EXIT_NUMERIC
    assert json.loads((tmp / "run" / "manifest.json").read_text())["status"] == "numeric_abort"


def test_content_hash_tracks_inputs(tmp_path):
    f = tmp_path / "x"
    f.write_text("a")
    h1 = content_hash({"k": 1}, f)
    f.write_text("b")
    assert content_hash({"k": 1}, f) != h1
    assert content_hash({"k": 1}, f) == content_hash({"k": 1}, f)


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "flashdistill", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "distill" in r.stdout
