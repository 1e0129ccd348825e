import json
import os

import numpy as np
import pytest

from mstok.cli import main
from mstok.config import RunConfig, TokenizerConfig
from mstok.data import generate_synthetic_folder
from mstok.imageio import load_ppm
from mstok.latent_stats import read_latents
from mstok.train import train

SMALL = ["image_size=16", "patch=4", "enc_layers=1", "dec_layers=1", "enc_width=16",
         "dec_width=16", "heads=2", "latent_dim=4", "scales=1,2,4"]


def sets(pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


def small_checkpoint(tmp_path, steps=2):
    cfg = RunConfig(
        tokenizer=TokenizerConfig(image_size=16, patch=4, enc_layers=1, dec_layers=1,
                                  enc_width=16, dec_width=16, heads=2, latent_dim=4,
                                  scales=(1, 2, 4), seed=0),
        data_dir="synthetic:12", steps=steps, batch_size=4,
        checkpoint=str(tmp_path / "tok.htok"), eval_fraction=0.25,
    )
    return train(cfg)["checkpoint"]


def test_dump_mask_matches_oracle(capsys):
    assert main(["dump-mask", "--set", "scales=1,2", "--set", "regime=scalecausal"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    matrix = np.array([[int(v) for v in row.split()] for row in rows])
    expected = np.ones((5, 5), dtype=int)
    expected[0, 1:] = 0
    np.testing.assert_array_equal(matrix, expected)


def test_dump_mask_scale_independent(capsys):
    assert main(["dump-mask", "--set", "scales=1,2", "--set", "regime=scaleindependent"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    matrix = np.array([[int(v) for v in row.split()] for row in rows])
    expected = np.zeros((5, 5), dtype=int)
    expected[0, 0] = 1
    expected[1:, 1:] = 1
    np.testing.assert_array_equal(matrix, expected)


def test_unknown_subcommand_usage_error(capsys):
    assert main(["frobnicate"]) == 1


def test_missing_subcommand_usage_error():
    assert main([]) == 1


def test_unknown_config_key_usage_error(tmp_path):
    assert main(["train", "--set", "not_a_key=1"]) == 1


def test_train_reconstruct_flow(tmp_path, capsys):
    ckpt = str(tmp_path / "out" / "tok.htok")
    rc = main(["train"] + sets(SMALL + [
        "data_dir=synthetic:12", "steps=2", "batch_size=4", "eval_fraction=0.25",
        f"checkpoint={ckpt}",
    ]))
    assert rc == 0
    out = capsys.readouterr().out
    done = [json.loads(l) for l in out.splitlines() if '"event": "done"' in l]
    assert done and done[0]["checkpoint"] == ckpt

    in_dir = str(tmp_path / "inputs")
    generate_synthetic_folder(in_dir, 2, 16, seed=9)
    out_dir = str(tmp_path / "recon")
    assert main(["reconstruct", ckpt, in_dir, out_dir]) == 0
    produced = sorted(os.listdir(out_dir))
    assert produced == [
        "synthetic_00000_s16.ppm", "synthetic_00000_s4.ppm", "synthetic_00000_s8.ppm",
        "synthetic_00001_s16.ppm", "synthetic_00001_s4.ppm", "synthetic_00001_s8.ppm",
    ]
    for name in produced:
        side = int(name.rsplit("_s", 1)[1].split(".")[0])
        img = load_ppm(os.path.join(out_dir, name))
        assert img.shape == (3, side, side)


def test_export_and_analyze_latents(tmp_path, capsys):
    ckpt = small_checkpoint(tmp_path)
    hlat = str(tmp_path / "latents.hlat")
    rc = main(["export-latents", ckpt, hlat, "--set", "data_dir=synthetic:12", "--set", "batch_size=4"])
    assert rc == 0
    vectors = read_latents(hlat)
    assert vectors.shape == (12, 4 * 4 * 4)

    report_path = str(tmp_path / "stats.json")
    rc = main(["analyze-latent", hlat, "--grid", "16", "--out", report_path])
    assert rc == 0
    report = json.loads(open(report_path).read())
    for key in ("density_cv", "gini", "norm_entropy", "n_points", "grid_size", "bandwidth"):
        assert key in report
    assert report["n_points"] == 12 and report["grid_size"] == 16


def test_reconstruct_bad_checkpoint_data_error(tmp_path):
    bad = tmp_path / "bad.htok"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert main(["reconstruct", str(bad), str(tmp_path), str(tmp_path / "o")]) == 2


def test_analyze_latent_bad_file_data_error(tmp_path):
    bad = tmp_path / "bad.hlat"
    bad.write_bytes(b"XXXX\x00\x00\x00\x00\x00\x00\x00\x00")
    assert main(["analyze-latent", str(bad)]) == 2


def test_reconstruct_malformed_ppm_data_error(tmp_path):
    ckpt = small_checkpoint(tmp_path)
    in_dir = tmp_path / "badppm"
    in_dir.mkdir()
    (in_dir / "x.ppm").write_bytes(b"P6\n4 4\n255\nshort")
    assert main(["reconstruct", ckpt, str(in_dir), str(tmp_path / "o")]) == 2
