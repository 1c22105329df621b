import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from petpipe import io as pio
from petpipe.classifier import TracerClassifier, fusion_config, plane_config, train_classifier
from petpipe.cli import main, phantom_features
from petpipe.volume import BinaryMask


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    samples = phantom_features(10, seed=500)
    path = tmp_path_factory.mktemp("model") / "model.json"
    train_classifier(samples, plane_config(1), fusion_config(1)).save(path)
    return path


@pytest.fixture(scope="module")
def fdg_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fdg")
    assert main(["phantom", "--tracer", "fdg", "--seed", "3", "--out", str(out)]) == 0
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_phantom_outputs(fdg_dir):
    names = {p.name for p in fdg_dir.iterdir()}
    assert names == {"pet.nii.gz", "ct.nii.gz", "gt.nii.gz", "anatomy.nii.gz", "spec.json"}
    spec = json.loads((fdg_dir / "spec.json").read_text())
    assert spec["tracer"] == "fdg" and spec["rng_seed"] == 3
    assert pio.read_labels(fdg_dir / "gt.nii.gz").labels.any()


def test_eval_identical_masks(capsys, fdg_dir):
    gt = fdg_dir / "gt.nii.gz"
    code, out, _ = run(capsys, "eval", "--pred", gt, "--gt", gt)
    assert code == 0
    doc = json.loads(out)
    assert doc["cases"][0]["dice"] == 1.0 and doc["aggregate"]["mean_fpv_ml"] == 0.0


def test_eval_geometry_mismatch(capsys, tmp_path, fdg_dir):
    small = BinaryMask(np.zeros((4, 4, 4), dtype=bool), (4, 4, 4))
    pio.write_volume(small, tmp_path / "small.nii")
    code, _, err = run(capsys, "eval", "--pred", tmp_path / "small.nii", "--gt", fdg_dir / "gt.nii.gz")
    assert code == 2
    assert "(4, 4, 4)" in err and "(64, 64, 128)" in err


def test_exit_codes(capsys, tmp_path, fdg_dir):
    (tmp_path / "junk.nii").write_bytes(b"not a nifti file")
    assert run(capsys, "eval", "--pred", tmp_path / "junk.nii", "--gt", fdg_dir / "gt.nii.gz")[0] == 3
    assert run(capsys, "eval", "--pred", tmp_path / "missing.nii", "--gt", fdg_dir / "gt.nii.gz")[0] == 2
    assert run(capsys, "classify", "--pet", fdg_dir / "pet.nii.gz", "--model", tmp_path / "none.json")[0] == 2
    assert run(capsys, "sweep", "--kind", "cc", "--thresholds", "3,2", "--phantom-cases", 2)[0] == 2


def test_eval_manifest_csv(capsys, tmp_path, fdg_dir):
    gt = fdg_dir / "gt.nii.gz"
    empty = BinaryMask(np.zeros((64, 64, 128), dtype=bool), (4, 4, 4))
    pio.write_volume(empty, tmp_path / "empty.nii.gz")
    with open(tmp_path / "cases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerows([["case_id", "pred", "gt"], ["b", str(gt), str(gt)], ["a", "empty.nii.gz", str(gt)]])
    code, out, _ = run(capsys, "eval", "--manifest", tmp_path / "cases.csv", "--format", "csv", "--jobs", 2)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "case_id,dice,fpv_ml,fnv_ml"
    assert lines[1].startswith("a,0.00000,0.00000,") and lines[2].startswith("b,1.00000,")


def test_sweep_csv(capsys, tmp_path):
    out = tmp_path / "sweep.csv"
    code, _, _ = run(capsys, "sweep", "--kind", "cc", "--thresholds", "1,2,3,5,10",
                     "--phantom-cases", 4, "--format", "csv", "--out", out)
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert [float(r["threshold"]) for r in rows] == [1, 2, 3, 5, 10]
    fnv = [float(r["delta_fnv_ml"]) for r in rows]
    assert fnv == sorted(fnv) and fnv[0] == 0.0


def test_classify_and_pipeline(capsys, tmp_path, fdg_dir, model_path):
    code, out, _ = run(capsys, "classify", "--pet", fdg_dir / "pet.nii.gz", "--model", model_path)
    assert code == 0 and json.loads(out)["tracer"] == "fdg"

    base = ["pipeline", "--pet", fdg_dir / "pet.nii.gz", "--ct", fdg_dir / "ct.nii.gz",
            "--pred", fdg_dir / "gt.nii.gz", "--gt", fdg_dir / "gt.nii.gz"]
    code, out, _ = run(capsys, *base, "--model", model_path, "--out", tmp_path / "a.nii.gz")
    doc = json.loads(out)
    assert code == 0 and doc["tracer"] == "fdg" and doc["classified"]
    assert doc["suv_threshold"] == 1.5 and doc["metrics"]["dice"] == 1.0
    code, out, _ = run(capsys, *base, "--tracer", "fdg", "--out", tmp_path / "b.nii.gz")
    assert code == 0 and not json.loads(out)["classified"]
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_pipeline_empty_prediction(capsys, tmp_path, fdg_dir):
    empty = BinaryMask(np.zeros((64, 64, 128), dtype=bool), (4, 4, 4))
    pio.write_volume(empty, tmp_path / "empty.nii.gz")
    code, out, _ = run(capsys, "pipeline", "--pet", fdg_dir / "pet.nii.gz", "--pred", tmp_path / "empty.nii.gz",
                       "--gt", fdg_dir / "gt.nii.gz", "--tracer", "psma", "--out", tmp_path / "final.nii.gz")
    m = json.loads(out)["metrics"]
    assert code == 0 and m["fpv_ml"] == 0.0 and m["dice"] == 0.0
    assert not pio.read_labels(tmp_path / "final.nii.gz").labels.any()


def test_pipeline_needs_model_or_tracer(capsys, fdg_dir):
    code, _, err = run(capsys, "pipeline", "--pet", fdg_dir / "pet.nii.gz", "--pred", fdg_dir / "gt.nii.gz")
    assert code == 2 and "--model" in err


def test_postproc(capsys, tmp_path, fdg_dir):
    out = tmp_path / "pp.nii.gz"
    code, _, _ = run(capsys, "postproc", "--pred", fdg_dir / "gt.nii.gz", "--pet", fdg_dir / "pet.nii.gz",
                     "--suv-thresh", 1e9, "--out", out)
    assert code == 0 and not pio.read_labels(out).labels.any()
    code, _, _ = run(capsys, "postproc", "--pred", fdg_dir / "gt.nii.gz", "--min-cc", 1, "--out", out)
    assert code == 0
    assert np.array_equal(pio.read_labels(out).labels, pio.read_labels(fdg_dir / "gt.nii.gz").labels)


def test_loss_check(capsys):
    code, out, _ = run(capsys, "loss-check", "--seed", 4)
    doc = json.loads(out)
    assert code == 0 and doc["passed"] and doc["max_relative_error"] < 1e-4
    code, out, _ = run(capsys, "loss-check", "--no-dice-include-background", "--classes", 3)
    assert code == 0 and json.loads(out)["passed"]


def test_mip_and_normalize(capsys, tmp_path, fdg_dir):
    assert run(capsys, "mip", "--pet", fdg_dir / "pet.nii.gz", "--out", tmp_path / "m", "--resize")[0] == 0
    assert (tmp_path / "m_coronal.pgm").read_bytes().startswith(b"P5\n224 224\n")
    (tmp_path / "pets.csv").write_text(f"pet\n{fdg_dir / 'pet.nii.gz'}\n")
    assert run(capsys, "normalize", "--manifest", tmp_path / "pets.csv", "--out", tmp_path / "norm")[0] == 0
    normed = pio.read_volume(tmp_path / "norm" / "pet.nii.gz").data
    assert abs(float(normed.mean())) < 1e-3


def test_train_classifier_cli(capsys, tmp_path):
    code, out, _ = run(capsys, "train-classifier", "--phantom-cohort", 4, "--cv", 2, "--model", tmp_path / "m.json")
    assert code == 0
    summary = json.loads(out)
    assert summary["n_samples"] == 8 and len(summary["cv"]["fusion"]) == 2
    assert TracerClassifier.load(tmp_path / "m.json").coronal is not None


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "petpipe.cli", "loss-check", "--classes", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["passed"]
