"""Command-line behaviour: outputs, exit codes and reproducibility."""

import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from dninn import checkpoint as ckpt
from dninn.cli import main
from dninn.data import add_noise, read_image, write_image
from dninn.model import HParams, init_model


def _write_pgms(folder, n, size=32, seed=0):
    folder.mkdir(parents=True, exist_ok=True)
    r = np.random.default_rng(seed)
    for i in range(n):
        yy, xx = np.mgrid[:size, :size]
        img = 0.5 + 0.3 * np.sin(xx / (3 + i)) * np.cos(yy / 5) + 0.05 * r.standard_normal((size, size))
        write_image(folder / f"img{i:02d}.pgm", np.clip(img, 0, 1))
    return folder


def _save_model(path, head="st", sigma_n=25.0, theta=None, final_scale=0.3):
    model = init_model(HParams(pairs=1, depth=2, width=4, head=head), sigma_n,
                       np.random.default_rng(0), np.float32, final_scale=final_scale)
    if theta is not None:
        model.heads[0].theta[:] = theta
    ckpt.save_checkpoint(model, path)
    return path


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: "), err
    return err[0]


def _files(folder):
    return sorted(p.name for p in folder.iterdir())


# --- usage errors ------------------------------------------------------------------------


def test_train_requires_data(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "o")]) == 2
    assert "--data" in _error_line(capsys)
    assert not (tmp_path / "o").exists()


def test_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 2
    assert _error_line(capsys).startswith("error: usage:")


def test_module_entry_point_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dninn", "eval", "--checkpoint", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.count("\n") == 1 and proc.stderr.startswith("error: usage:")


# --- train ---------------------------------------------------------------------------------


def test_train_smoke_round_trip(tmp_path, capsys):
    data = _write_pgms(tmp_path / "data", 2)
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("num_patches = 50\nepochs = 1\npatch_size = 24\nbatch_size = 25\n"
                   "pairs = 1\ndepth = 2\nwidth = 4\nval_holdout = 1\n")
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    assert _files(out) == ["metrics.jsonl", "model.linn"]
    model = ckpt.load_checkpoint(out / "model.linn", expect_head="st")
    assert model.meta == {"trained_steps": 2, "seed": 3}
    rows = [json.loads(s) for s in (out / "metrics.jsonl").read_text().splitlines()]
    assert rows[-1]["val_psnr"] is not None
    # byte-for-byte reproducible under the deterministic flag
    out2 = tmp_path / "run2"
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(out2), "--seed", "3"]) == 0
    for name in _files(out):
        assert (out / name).read_bytes() == (out2 / name).read_bytes(), name
    capsys.readouterr()


def test_train_bad_config_key(tmp_path, capsys):
    data = _write_pgms(tmp_path / "data", 2)
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 1\n")
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "unknown key" in _error_line(capsys)


# --- denoise -------------------------------------------------------------------------------


def test_denoise_zero_threshold_reproduces_input(tmp_path, capsys):
    data = _write_pgms(tmp_path / "noisy", 3)
    model = _save_model(tmp_path / "m.linn", theta=0.0)
    out = tmp_path / "out"
    assert main(["denoise", "--checkpoint", str(model), "--images", str(data), "--out", str(out)]) == 0
    for f in sorted(data.iterdir()):
        a = np.asarray(Image.open(f), dtype=int)
        b = np.asarray(Image.open(out / f"{f.stem}_denoised.pgm"), dtype=int)
        assert np.max(np.abs(a - b)) <= 1  # within 8-bit quantisation
    summary = json.loads((out / "denoise.json").read_text())
    assert summary["count"] == 3
    assert capsys.readouterr().out.strip().splitlines()[-1] == "count=3"


def test_denoise_many_images_one_summary_line(tmp_path, capsys):
    data = _write_pgms(tmp_path / "clean", 68, size=16)
    model = _save_model(tmp_path / "m.linn", theta=0.02)
    out = tmp_path / "out"
    assert main(["denoise", "--checkpoint", str(model), "--images", str(data), "--sigma", "25",
                 "--out", str(out)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 69 and lines[-1].startswith("count=68 mean_psnr_noisy=")
    assert len(list(out.glob("*_denoised.pgm"))) == 68


def test_denoise_with_clean_reference(tmp_path, capsys):
    clean = _write_pgms(tmp_path / "clean", 2)
    noisy = tmp_path / "noisy"
    noisy.mkdir()
    r = np.random.default_rng(1)
    for f in sorted(clean.iterdir()):
        write_image(noisy / f.name, add_noise(read_image(f, np.float64), 10, r))
    model = _save_model(tmp_path / "m.linn", theta=0.0)
    assert main(["denoise", "--checkpoint", str(model), "--images", str(noisy), "--clean", str(clean),
                 "--out", str(tmp_path / "o")]) == 0
    rows = json.loads((tmp_path / "o" / "denoise.json").read_text())["images"]
    assert all(abs(r["psnr_noisy"] - r["psnr_denoised"]) < 0.1 for r in rows)  # identity model
    capsys.readouterr()


def test_denoise_missing_checkpoint(tmp_path, capsys):
    data = _write_pgms(tmp_path / "d", 1)
    assert main(["denoise", "--checkpoint", str(tmp_path / "none.linn"), "--images", str(data),
                 "--out", str(tmp_path / "o")]) == 1
    assert _error_line(capsys).startswith("error: input:")


def test_corrupt_checkpoint_reported(tmp_path, capsys):
    path = _save_model(tmp_path / "m.linn")
    path.write_bytes(path.read_bytes()[:-3])
    data = _write_pgms(tmp_path / "d", 1)
    assert main(["denoise", "--checkpoint", str(path), "--images", str(data), "--out", str(tmp_path / "o")]) == 1
    assert _error_line(capsys).startswith("error: checkpoint: checkpoint truncated")


# --- eval ------------------------------------------------------------------------------------


def test_eval_table_and_determinism(tmp_path, capsys):
    data = _write_pgms(tmp_path / "test", 3)
    model = _save_model(tmp_path / "m.linn", theta=0.05)
    args = ["eval", "--checkpoint", str(model), "--test-dir", str(data), "--sigmas", "15,25,50", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    text = (tmp_path / "a" / "eval.txt").read_text()
    assert text == (tmp_path / "b" / "eval.txt").read_text()
    header, noisy, den = text.strip().splitlines()
    assert header.split() == ["sigma", "15", "25", "50"]
    assert noisy.split()[0] == "noisy" and len(den.split()) == 4
    table = json.loads((tmp_path / "a" / "eval.json").read_text())["table"]
    assert list(table) == ["15", "25", "50"]
    assert table["50"]["noisy"] == pytest.approx(14.15, abs=0.15)
    capsys.readouterr()


def test_eval_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    model = _save_model(tmp_path / "m.linn")
    assert main(["eval", "--checkpoint", str(model), "--test-dir", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "o")]) == 1
    assert "no .pgm/.png images" in _error_line(capsys)


def test_eval_bad_sigma_list(tmp_path, capsys):
    model = _save_model(tmp_path / "m.linn")
    assert main(["eval", "--checkpoint", str(model), "--test-dir", str(tmp_path), "--sigmas", "a,b",
                 "--out", str(tmp_path / "o")]) == 2
    _error_line(capsys)


# --- adapt ---------------------------------------------------------------------------------------


def test_adapt_factors(tmp_path, capsys):
    src = _save_model(tmp_path / "m.linn", sigma_n=50.0, theta=[0.4, -0.2, 0.1])
    base = ckpt.load_checkpoint(src).heads[0].thresholds()
    assert main(["adapt", "--checkpoint", str(src), "--sigma-t", "50", "--out", str(tmp_path / "same")]) == 0
    same = ckpt.load_checkpoint(tmp_path / "same" / "model.linn").heads[0].thresholds()
    assert same.tobytes() == base.tobytes()
    assert main(["adapt", "--checkpoint", str(src), "--sigma-t", "25", "--out", str(tmp_path / "q")]) == 0
    quarter = ckpt.load_checkpoint(tmp_path / "q" / "model.linn").heads[0].thresholds()
    assert quarter.tobytes() == (base * np.float32(0.25)).tobytes()
    assert "factor=0.25" in capsys.readouterr().out


def test_adapt_lista_unsupported(tmp_path, capsys):
    src = _save_model(tmp_path / "m.linn", head="lista")
    assert main(["adapt", "--checkpoint", str(src), "--sigma-t", "15", "--out", str(tmp_path / "o")]) == 1
    assert _error_line(capsys).startswith("error: unsupported:")


# --- inspect ---------------------------------------------------------------------------------------


def test_inspect_outputs(tmp_path, capsys):
    clean = _write_pgms(tmp_path / "c", 1, size=48)
    noisy = tmp_path / "noisy.pgm"
    write_image(noisy, add_noise(read_image(clean / "img00.pgm"), 25, np.random.default_rng(0)))
    model = _save_model(tmp_path / "m.linn", theta=0.03)
    out = tmp_path / "o"
    assert main(["inspect", "--checkpoint", str(model), "--image", str(noisy), "--out", str(out)]) == 0
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert len(pngs) == 8
    assert pngs == sorted(["noisy.png", "denoised.png"] + [f"detail_{t}_{b}.png" for t in ("before", "after")
                                                            for b in ("LH", "HL", "HH")])
    meta = json.loads((out / "inspect.json").read_text())
    for b in ("LH", "HL", "HH"):
        before, after = meta["channels"][f"detail_before_{b}"], meta["channels"][f"detail_after_{b}"]
        assert after["variance"] < before["variance"]
        img = np.asarray(Image.open(out / f"detail_before_{b}.png"))
        assert img.min() == 0 and img.max() == 255  # min-max normalised
    assert main(["inspect", "--checkpoint", str(model), "--image", str(noisy), "--coarse",
                 "--out", str(tmp_path / "o2")]) == 0
    assert (tmp_path / "o2" / "coarse.png").exists()
    capsys.readouterr()


# --- gradcheck ---------------------------------------------------------------------------------------


def test_gradcheck_default_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("result=PASS") == 2
    for name in ("s0.pair0.P.conv0.weight", "s0.pair1.U.thr1", "s0.head.theta",
                 "s0.head.layer2.We", "s0.head.Ws"):
        assert name in out
    assert (tmp_path / "gradcheck.txt").exists()


def test_gradcheck_corrupted_backward_fails(capsys):
    code = main(["gradcheck", "--head", "st", "--corrupt", "s0.pair1.U.conv0.weight"])
    assert code != 0
    assert "result=FAIL" in capsys.readouterr().out


# --- trained-model behaviour (desk scale; slow) ------------------------------------------------------


@pytest.mark.slow
def test_denoise_improves_on_noisy_baseline(desk_models, desk_dir, tmp_path, capsys):
    model, _ = desk_models(25.0)
    held_out = sorted(desk_dir.iterdir())[-2:]
    assert main(["denoise", "--checkpoint", str(model), "--images", *map(str, held_out), "--sigma", "25",
                 "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "denoise.json").read_text())
    assert summary["mean_psnr_denoised"] > summary["mean_psnr_noisy"]
    capsys.readouterr()


@pytest.mark.slow
def test_inspect_trained_model_reduces_detail_variance(desk_models, desk_dir, tmp_path, capsys):
    model, _ = desk_models(25.0)
    noisy = tmp_path / "noisy.pgm"
    clean = read_image(sorted(desk_dir.iterdir())[-1])
    write_image(noisy, add_noise(clean, 25, np.random.default_rng(0)))
    assert main(["inspect", "--checkpoint", str(model), "--image", str(noisy), "--out", str(tmp_path / "o")]) == 0
    meta = json.loads((tmp_path / "o" / "inspect.json").read_text())["channels"]
    for b in ("LH", "HL", "HH"):
        assert meta[f"detail_after_{b}"]["variance"] < meta[f"detail_before_{b}"]["variance"]
    capsys.readouterr()
