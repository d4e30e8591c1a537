import json
import os

import numpy as np
import pytest

from conftest import planted_image
from sada.cli import EXIT_IO, EXIT_NUMERIC, EXIT_USAGE, main, run_grad_checks
from sada.imaging import RgbImage, load_ppm, save_ppm
from sada.synth import default_domains, synth_dataset


def read_bytes(folder):
    return {name: open(os.path.join(folder, name), "rb").read()
            for name in sorted(os.listdir(folder))}


@pytest.fixture
def planted_ppm(tmp_path):
    px, _, _ = planted_image(np.random.default_rng(0))
    path = tmp_path / "planted.ppm"
    save_ppm(RgbImage(px), str(path))
    return str(path)


@pytest.fixture
def batch_dir(tmp_path):
    domains = synth_dataset(default_domains(), 1, [1, 1], seed=0, image_size=16)
    folder = tmp_path / "batch"
    folder.mkdir()
    i = 0
    for dom in domains:
        for img in dom.images:
            save_ppm(RgbImage(img), str(folder / f"img{i:02d}.ppm"))
            i += 1
    return str(folder)


# ------------------------------------------------------------------ decompose

def test_decompose_planted_rank2(tmp_path, planted_ppm, capsys):
    out = tmp_path / "dec"
    assert main(["decompose", planted_ppm, "--lambda", "0", "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["rmse"] < 1e-3
    assert stats["version"]
    assert stats["objective_trace_length"] >= 2
    assert sorted(os.listdir(out)) == ["H.csv", "W.csv", "reconstruction.ppm", "stats.json"]
    recon = load_ppm(str(out / "reconstruction.ppm"))
    assert recon.width == 24 and recon.height == 24


def test_decompose_too_many_stains(tmp_path, planted_ppm, capsys):
    out = tmp_path / "dec"
    assert main(["decompose", planted_ppm, "--stains", "5", "--out", str(out)]) == EXIT_USAGE
    assert "r must be ≤ 3" in capsys.readouterr().err
    assert not out.exists() or not os.listdir(out)


def test_decompose_missing_input(tmp_path, capsys):
    assert main(["decompose", str(tmp_path / "nope.ppm"), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_decompose_malformed_input(tmp_path, capsys):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    assert main(["decompose", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_decompose_unwritable_output(tmp_path, planted_ppm, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["decompose", planted_ppm, "--out", str(blocker / "sub")]) == EXIT_IO


def test_decompose_deterministic(tmp_path, planted_ppm, capsys):
    for name in ("a", "b"):
        assert main(["decompose", planted_ppm, "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")


# -------------------------------------------------------------------- augment

def test_augment_counts_and_manifest(tmp_path, batch_dir, capsys):
    out = tmp_path / "aug"
    assert main(["augment", batch_dir, "--k", "3", "--seed", "1", "--out", str(out)]) == 0
    files = [f for f in os.listdir(out) if f.endswith(".ppm")]
    assert len(files) == 12
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["version"]
    assert len(manifest["entries"]) == 12
    for entry in manifest["entries"]:
        assert entry["donor_cluster"] != entry["source_cluster"]
        assert entry["output"] in files
        assert entry["output"] == f"aug_{entry['source_index']}_{entry['donor_cluster']}.ppm"


def test_augment_deterministic(tmp_path, batch_dir, capsys):
    for name in ("a", "b"):
        assert main(["augment", batch_dir, "--k", "3", "--seed", "7",
                     "--out", str(tmp_path / name)]) == 0
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")


def test_augment_too_few_images(tmp_path, batch_dir, capsys):
    assert main(["augment", batch_dir, "--k", "7", "--seed", "0",
                 "--out", str(tmp_path / "aug")]) == EXIT_USAGE


def test_augment_requires_seed(tmp_path, batch_dir, capsys):
    assert main(["augment", batch_dir, "--out", str(tmp_path / "aug")]) == EXIT_USAGE


# ----------------------------------------------------------------- grad-check

def test_grad_check_default_passes(tmp_path, capsys):
    out = tmp_path / "grad.json"
    assert main(["grad-check", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["version"]
    assert {r["loss_name"] for r in report["results"]} >= {
        "local_align_loss", "disc_loss", "cross_entropy_softmax", "rep_loss"}
    for r in report["results"]:
        assert r["passed"] and r["max_rel_err"] < 1e-4 and r["n_coords"] >= 200


def test_grad_check_failure_exit_code(monkeypatch, capsys):
    import sada.cli as cli

    monkeypatch.setattr(cli, "GRAD_TOLERANCE", -1.0)
    assert cli.main(["grad-check", "--loss", "rep_loss", "--n-coords", "5"]) == EXIT_NUMERIC


def test_run_grad_checks_seeded():
    a = run_grad_checks(seed=4, n_coords=20)
    b = run_grad_checks(seed=4, n_coords=20)
    assert a == b


# ----------------------------------------------------------------------- eval

def write_labels(path, labels, header=True):
    lines = (["id,label"] if header else []) + [f"{i},{v}" for i, v in enumerate(labels)]
    path.write_text("\n".join(lines) + "\n")


def test_eval_identical(tmp_path, capsys):
    write_labels(tmp_path / "p.csv", [0, 1, 2, 2, 1])
    write_labels(tmp_path / "t.csv", [0, 1, 2, 2, 1], header=False)
    out = tmp_path / "m.json"
    assert main(["eval", str(tmp_path / "p.csv"), str(tmp_path / "t.csv"), "--out", str(out)]) == 0
    m = json.loads(out.read_text())
    assert m["f1_micro"] == 1.0 and m["f1_macro"] == 1.0
    assert m["per_class"] == [1.0, 1.0, 1.0] and m["version"]


def test_eval_known_matrix(tmp_path, capsys):
    truth = [0] * 10 + [1] * 10
    pred = [0] * 5 + [1] * 5 + [1] * 10
    write_labels(tmp_path / "p.csv", pred)
    write_labels(tmp_path / "t.csv", truth)
    assert main(["eval", str(tmp_path / "p.csv"), str(tmp_path / "t.csv")]) == 0
    m = json.loads(capsys.readouterr().out)
    assert m["f1_micro"] == pytest.approx(0.75, abs=1e-9)
    assert m["f1_macro"] == pytest.approx(0.7333333333, abs=1e-9)


def test_eval_length_mismatch(tmp_path, capsys):
    write_labels(tmp_path / "p.csv", [0, 1, 1])
    write_labels(tmp_path / "t.csv", [0, 1])
    assert main(["eval", str(tmp_path / "p.csv"), str(tmp_path / "t.csv")]) == EXIT_USAGE


# ------------------------------------------------------------------ train-toy

TINY = {
    "seed": 0,
    "data": {"n_per_class": 4, "class_ratios": [1, 1], "image_size": 16, "test_fraction": 0.25},
    "sada": {"steps": 4, "batch_size": 8,
             "snmf": {"max_iters": 10, "tol": 1e-3}},
    "erm": {"steps": 4, "batch_size": 8},
}


def test_train_toy_schema_error(tmp_path, capsys):
    bad = json.loads(json.dumps(TINY))
    bad["sada"]["tau"] = "hot"
    path = tmp_path / "c.json"
    path.write_text(json.dumps(bad))
    assert main(["train-toy", str(path), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "sada.tau" in capsys.readouterr().err


def test_train_toy_unknown_field(tmp_path, capsys):
    bad = {**TINY, "data": {**TINY["data"], "colour": 1}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(bad))
    assert main(["train-toy", str(path), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "data.colour" in capsys.readouterr().err


def test_train_toy_tiny_run_deterministic(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    for name in ("a", "b"):
        assert main(["train-toy", str(path), "--out", str(tmp_path / name)]) == 0
    a = read_bytes(tmp_path / "a")
    assert a == read_bytes(tmp_path / "b")
    report = json.loads(a["report.json"])
    assert report["version"] and len(report["folds"]) == 3
    for fold in report["folds"]:
        for method in ("sada", "erm"):
            assert 0 <= fold[method]["f1_macro"] <= 1
    assert a["curve_erm_domain0.csv"].startswith(b"step,value\n")
