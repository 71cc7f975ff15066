import json
import time

import numpy as np
import pytest

from conftest import run_cli, write_json
from gazeforge import io
from gazeforge.dataset import read_dataset


def test_version_and_help(capsys):
    assert run_cli("--version") == 0
    assert "gazeforge" in capsys.readouterr().out
    assert run_cli("--help") == 0


def test_bad_arguments_exit_one(tmp_path, capsys):
    assert run_cli("no-such-command") == 1
    assert run_cli("make-dataset", "--out", tmp_path) == 1
    assert run_cli("make-dataset", "--n", 2, "--size", 30, "--out", tmp_path) == 1
    assert "error" in capsys.readouterr().err


def test_gradcheck_command(tmp_path):
    assert run_cli("gradcheck", "--ops", "relu,conv2d", "--out", tmp_path / "ok") == 0
    rows = io.read_csv_dicts(tmp_path / "ok" / "gradcheck.csv")
    assert [r["op"] for r in rows] == ["relu", "conv2d"]
    assert run_cli("gradcheck", "--ops", "conv2d", "--tolerance", "1e-300", "--out", tmp_path / "strict") == 2
    assert run_cli("gradcheck", "--ops", "bogus", "--out", tmp_path / "bad") == 1


def test_make_dataset_files_and_determinism(tmp_path):
    for name in ("a", "b"):
        assert run_cli("make-dataset", "--n", 10, "--seed", 4, "--out", tmp_path / name) == 0
    images = list((tmp_path / "a" / "images").glob("*.ppm"))
    masks = list((tmp_path / "a" / "masks").glob("*.pgm"))
    assert len(images) == 10 and len(masks) >= 10
    assert len(read_dataset(tmp_path / "a" / "manifest.json")) == 10
    for path in (tmp_path / "a").rglob("*"):
        if path.is_file() and path.name != "run_manifest.json":
            assert path.read_bytes() == (tmp_path / "b" / path.relative_to(tmp_path / "a")).read_bytes()


def test_run_manifest_contents(workspace):
    manifest = json.loads((workspace / "run" / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["seed"] == 0
    assert "generator/manifest.json" in manifest["artifacts"]
    assert "train_losses.csv" in manifest["artifacts"]
    assert manifest["wall_clock_s"] > 0


def test_missing_config_key(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"dataset": "x"})
    assert run_cli("pretrain", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "steps" in capsys.readouterr().err


def test_evaluate(workspace, tmp_path):
    cfg = write_json(tmp_path / "e.json", {"dataset": str(workspace / "data" / "manifest.json"),
                                           "run": str(workspace / "run"), "n_images": 2})
    assert run_cli("evaluate", "--config", cfg, "--out", tmp_path / "ev") == 0
    rows = io.read_csv_dicts(tmp_path / "ev" / "eval.csv")
    assert len(rows) == 3 and rows[-1]["image"] == "mean"


def test_evaluate_zero_images_is_usage_error(workspace, tmp_path):
    cfg = write_json(tmp_path / "e.json", {"dataset": str(workspace / "data" / "manifest.json"),
                                           "run": str(workspace / "run"), "n_images": 0})
    assert run_cli("evaluate", "--config", cfg, "--out", tmp_path / "ev") == 1


def test_transform_identity_checkpoint(workspace, tmp_path):
    # three training steps barely move the zero-initialized head, so compare against a fresh identity run
    from gazeforge.cli import load_run
    from gazeforge.transformer import build_fgtransform

    model, gen, disc, meta = load_run(workspace / "run")
    ident, _ = build_fgtransform(gen.config, 0)
    ident.save(tmp_path / "ident" / "generator", meta)
    disc.save(tmp_path / "ident" / "discriminator", meta)
    import shutil

    shutil.copytree(workspace / "run" / "saliency", tmp_path / "ident" / "saliency")
    image = workspace / "data" / "images" / "img0000.ppm"
    spec = json.dumps({"kind": "global-scale", "k_sc": 1.0})
    assert run_cli("transform", "--checkpoint", tmp_path / "ident", "--image", image, "--target-spec", spec,
                   "--out", tmp_path / "t") == 0
    out = io.read_gzt(tmp_path / "t" / "transformed.gzt")
    assert np.array_equal(out, io.load_image(image))
    np.testing.assert_array_equal(io.read_gzt(tmp_path / "t" / "target.gzt"),
                                  io.read_gzt(tmp_path / "t" / "density_original.gzt"))
    metrics = json.loads((tmp_path / "t" / "metrics.json").read_text())
    assert metrics["kl_target_transformed"] == 0.0
    assert metrics["max_abs_pixel_change"] == 0.0


def test_transform_local_shift(workspace, tmp_path):
    image = workspace / "data" / "images" / "img0000.ppm"
    mask = workspace / "data" / "masks" / "img0000_obj1.pgm"
    spec = json.dumps({"kind": "local-shift", "k_sh": 2.0})
    assert run_cli("transform", "--checkpoint", workspace / "run", "--image", image, "--target-spec", spec,
                   "--mask", mask, "--out", tmp_path / "t") == 0
    metrics = json.loads((tmp_path / "t" / "metrics.json").read_text())
    assert {"p_obj_original", "p_obj_transformed", "d_p_obj"} <= set(metrics)
    assert run_cli("transform", "--checkpoint", workspace / "run", "--image", image, "--target-spec", spec,
                   "--out", tmp_path / "nomask") == 1
    assert run_cli("transform", "--checkpoint", workspace / "run", "--image", image, "--target-spec", "{oops",
                   "--out", tmp_path / "badspec") == 1


def test_analyze(workspace, tmp_path):
    stim = workspace / "stim"
    assert run_cli("analyze", "--fixations", stim / "fixations.csv", "--stimuli", stim / "stimuli.json",
                   "--model", workspace / "pre" / "saliency", "--out", tmp_path / "an") == 0
    rows = io.read_csv_dicts(tmp_path / "an" / "report.csv")
    assert [r["stimulus"] for r in rows] == ["a", "a_edit", "b", "mean"]
    assert float(rows[0]["d_p_obj"]) == 0.0
    assert rows[1]["model_p_obj"] != "nan"
    for sid in ("a", "a_edit", "b"):
        assert io.read_gzt(tmp_path / "an" / "densities" / f"{sid}.gzt").sum() == pytest.approx(1.0, abs=1e-6)


def test_analyze_malformed_fixations(workspace, tmp_path, capsys):
    bad = tmp_path / "f.csv"
    bad.write_text("subject,image,block,fix_index,x,y\ns0,a,1,1,1.0\n")
    assert run_cli("analyze", "--fixations", bad, "--stimuli", workspace / "stim" / "stimuli.json",
                   "--out", tmp_path / "an") == 1
    assert "line 2" in capsys.readouterr().err


def test_divergence_exit_code(workspace, tmp_path):
    cfg = write_json(tmp_path / "t.json", {"dataset": str(workspace / "data" / "manifest.json"),
                                           "saliency": str(workspace / "pre" / "saliency"), "steps": 4,
                                           "batch_size": 2, "lr": 1e300})
    with np.errstate(all="ignore"):
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "run") == 2
    assert (tmp_path / "run" / "last_good" / "generator" / "manifest.json").exists()


def test_replay_detects_difference(workspace, tmp_path):
    manifest = json.loads((workspace / "data" / "run_manifest.json").read_text())
    manifest["artifacts"]["manifest.json"] = "0" * 64
    path = write_json(tmp_path / "m.json", manifest)
    assert run_cli("replay", "--manifest", path, "--out", tmp_path / "r") == 2
    assert run_cli("replay", "--manifest", tmp_path / "missing.json", "--out", tmp_path / "r2") == 1


def test_end_to_end_smoke(tmp_path):
    start = time.perf_counter()
    assert run_cli("make-dataset", "--n", 16, "--out", tmp_path / "data") == 0
    write_json(tmp_path / "p.json", {"dataset": "data/manifest.json", "steps": 100})
    assert run_cli("pretrain", "--config", tmp_path / "p.json", "--out", tmp_path / "pre") == 0
    write_json(tmp_path / "t.json", {"dataset": "data/manifest.json", "saliency": "pre/saliency", "steps": 200,
                                     "report_every": 10, "eval_images": 3})
    assert run_cli("train", "--config", tmp_path / "t.json", "--out", tmp_path / "run") == 0
    write_json(tmp_path / "e.json", {"dataset": "data/manifest.json", "run": "run"})
    assert run_cli("evaluate", "--config", tmp_path / "e.json", "--out", tmp_path / "ev") == 0
    assert len(io.read_csv_dicts(tmp_path / "run" / "train_losses.csv")) == 20
    assert time.perf_counter() - start < 600
