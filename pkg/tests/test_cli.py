"""End-to-end command-line driver checks, all in-process via main()."""

import json

import numpy as np
import pytest
from PIL import Image

from hsid.cli import CANONICAL_CONFIG, main
from hsid.datacube import load_bundle, load_samples, normalize_bands
from hsid.pseudo_env import load_pseudo


def write_config(path, bundle, out, *, epochs=2, lr=0.01, num_centers=2,
                 per_class="[8, 12]"):
    path.write_text(f"""\
data:
  bundle: {bundle}
  split:
    seed: 0
    per_class:
      1: {per_class}
      2: {per_class}
      3: {per_class}
cluster:
  num_centers: {num_centers}
  seed: 0
network:
  backbone: compact3d
  feature_dim: 8
  projection_dims: [8, 6, 5]
  discriminator_dims: [8, 6, 2]
  patch_size: 3
loss:
  alpha: 1.0
  beta: 1.0
  gamma: 1.0
train:
  learning_rate: {lr}
  epochs: {epochs}
  batch_size: 16
  seed: 0
output: {out}
""")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One full synth -> split -> cluster -> train -> eval -> map -> ablate
    pass on a 16x16x6 scene; tests inspect the artifacts."""
    ws = tmp_path_factory.mktemp("cli")
    scene = ws / "scene"
    run = ws / "run"
    assert main(["synth", "--out", str(scene), "--rows", "16", "--cols", "16",
                 "--bands", "6", "--classes", "3", "--noise", "0.01",
                 "--seed", "1"]) == 0
    config = ws / "config.yaml"
    write_config(config, scene, run)
    grid = ws / "grid.yaml"
    grid.write_text("gamma: [0.0]\n")
    codes = {
        "split": main(["split", "--config", str(config)]),
        "cluster": main(["cluster", "--config", str(config)]),
        "train": main(["train", "--config", str(config)]),
        "eval": main(["eval", "--config", str(config)]),
        "map": main(["map", "--config", str(config)]),
        "ablate": main(["ablate", "--config", str(config), "--grid", str(grid)]),
    }
    return ws, scene, run, config, codes


def test_every_stage_exits_zero(workspace):
    *_, codes = workspace
    assert codes == {name: 0 for name in codes}


def test_help_config_prints_the_canonical_defaults(capsys):
    assert main(["--help-config"]) == 0
    out = capsys.readouterr().out
    assert out == CANONICAL_CONFIG
    assert main([]) == 2  # no command: help plus config exit code


def test_synth_writes_a_loadable_reproducible_bundle(workspace, tmp_path):
    ws, scene, *_ = workspace
    cube = load_bundle(scene)
    assert (cube.rows, cube.cols, cube.bands) == (16, 16, 6)
    assert cube.num_classes == 3
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), "--rows", "16", "--cols", "16",
                 "--bands", "6", "--classes", "3", "--noise", "0.01",
                 "--seed", "1"]) == 0
    assert (again / "cube.bin").read_bytes() == (scene / "cube.bin").read_bytes()
    assert (again / "labels.bin").read_bytes() == (scene / "labels.bin").read_bytes()


def test_split_artifacts_hold_the_requested_counts(workspace):
    _, _, run, _, _ = workspace
    train_set = load_samples(run / "train_samples.json")
    test_set = load_samples(run / "test_samples.json")
    assert len(train_set) == 24 and len(test_set) == 36
    for cid in (1, 2, 3):
        assert (train_set.labels == cid).sum() == 8
        assert (test_set.labels == cid).sum() == 12
    overlap = set(map(tuple, train_set.indices.tolist())) & set(
        map(tuple, test_set.indices.tolist()))
    assert not overlap


def test_cluster_objective_is_recomputable_from_artifacts(workspace):
    _, scene, run, _, _ = workspace
    model, labels, seed = load_pseudo(run / "pseudo.json")
    train_set = load_samples(run / "train_samples.json")
    assert seed == 0
    assert model.centers.shape == (2, 6)
    assert len(labels) == len(train_set)
    cube = normalize_bands(load_bundle(scene))
    spectra = cube.values[train_set.indices[:, 0], train_set.indices[:, 1]].astype(np.float64)
    d2 = ((spectra[:, None, :] - model.centers[None, :, :]) ** 2).sum(axis=2)
    assert abs(d2.min(axis=1).sum() - model.objective) <= 1e-9
    assert np.array_equal(d2.argmin(axis=1) + 1, labels)


def test_single_center_is_the_spectral_mean(workspace, tmp_path):
    ws, scene, _, _, _ = workspace
    out = tmp_path / "l1"
    config = tmp_path / "l1.yaml"
    write_config(config, scene, out, num_centers=1)
    assert main(["split", "--config", str(config)]) == 0
    assert main(["cluster", "--config", str(config)]) == 0
    model, labels, _ = load_pseudo(out / "pseudo.json")
    train_set = load_samples(out / "train_samples.json")
    cube = normalize_bands(load_bundle(scene))
    spectra = cube.values[train_set.indices[:, 0], train_set.indices[:, 1]].astype(np.float64)
    assert np.allclose(model.centers[0], spectra.mean(axis=0), atol=1e-12)
    assert set(labels) == {1}


def test_train_artifacts(workspace):
    _, _, run, _, _ = workspace
    assert (run / "ckpt_0.bin").exists()
    assert (run / "ckpt_2.bin").exists()
    log = (run / "train_log.csv").read_text().strip().splitlines()
    assert log[0] == "epoch,step,L0,Le,Lc,Ld,total"
    assert len(log) == 1 + 2 * 2  # 24 samples / batch 16 = 2 steps per epoch
    report = json.loads((run / "train_report.json").read_text())
    assert report["epochs_run"] == 2
    assert report["diverged_at"] is None


def test_zero_learning_rate_checkpoints_are_identical(workspace, tmp_path):
    ws, scene, _, _, _ = workspace
    out = tmp_path / "lr0"
    config = tmp_path / "lr0.yaml"
    write_config(config, scene, out, epochs=1, lr=0.0)
    for stage in ("split", "cluster", "train"):
        assert main([stage, "--config", str(config)]) == 0
    assert (out / "ckpt_0.bin").read_bytes() == (out / "ckpt_1.bin").read_bytes()


def test_eval_and_map_artifacts(workspace):
    _, _, run, _, _ = workspace
    metrics = json.loads((run / "metrics.json").read_text())
    assert set(metrics) >= {"oa", "aa", "kappa", "per_class", "confusion"}
    assert 0.0 <= metrics["oa"] <= 1.0
    assert np.asarray(metrics["confusion"]).sum() == 36
    text = (run / "metrics.txt").read_text()
    assert "overall accuracy" in text
    img = Image.open(run / "map.png")
    assert img.size == (16, 16)


def test_ablation_artifact(workspace):
    _, _, run, _, _ = workspace
    lines = (run / "ablation.csv").read_text().strip().splitlines()
    assert lines[0] == "label,parameter,value,lambda,oa,aa,kappa,diverged"
    assert len(lines) == 3
    assert lines[1].startswith("gamma=0.0,gamma,")
    assert lines[2].startswith("baseline,,")


def test_explicit_checkpoint_flag(workspace, capsys):
    _, _, run, config, _ = workspace
    rc = main(["eval", "--config", str(config), "--checkpoint", str(run / "ckpt_0.bin")])
    assert rc == 0
    assert "overall accuracy" in capsys.readouterr().out


def test_seed_override_reaches_every_stage(workspace, tmp_path):
    ws, scene, _, _, _ = workspace
    out = tmp_path / "seeded"
    config = tmp_path / "seeded.yaml"
    write_config(config, scene, out)
    assert main(["split", "--config", str(config), "--seed", "99"]) == 0
    assert main(["cluster", "--config", str(config), "--seed", "99"]) == 0
    _, _, seed = load_pseudo(out / "pseudo.json")
    assert seed == 99
    base = load_samples(ws / "run" / "train_samples.json")
    seeded = load_samples(out / "train_samples.json")
    assert not np.array_equal(base.indices, seeded.indices)


def test_out_override_redirects_artifacts(workspace, tmp_path):
    _, _, _, config, _ = workspace
    out = tmp_path / "redirect"
    assert main(["split", "--config", str(config), "--out", str(out)]) == 0
    assert (out / "train_samples.json").exists()


# -- failure modes -------------------------------------------------------------

def test_config_errors_exit_2(workspace, tmp_path, capsys):
    ws, scene, *_ = workspace
    missing = tmp_path / "nope.yaml"
    assert main(["split", "--config", str(missing)]) == 2

    bad = tmp_path / "bad.yaml"
    bad.write_text("data:\n  bundle: x\nturbo: true\n")
    assert main(["split", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err

    invalid = tmp_path / "invalid.yaml"
    write_config(invalid, scene, tmp_path / "o", lr=-1.0)
    assert main(["train", "--config", str(invalid)]) == 2


def test_data_errors_exit_3(workspace, tmp_path, capsys):
    ws, scene, _, _, _ = workspace
    config = tmp_path / "cfg.yaml"
    write_config(config, tmp_path / "missing_bundle", tmp_path / "o")
    assert main(["split", "--config", str(config)]) == 3

    fresh = tmp_path / "fresh"
    config2 = tmp_path / "cfg2.yaml"
    write_config(config2, scene, fresh)
    assert main(["split", "--config", str(config2)]) == 0
    assert main(["train", "--config", str(config2)]) == 3  # no pseudo.json yet
    assert "cluster" in capsys.readouterr().err
    assert main(["eval", "--config", str(config2)]) == 3  # no checkpoint yet

    config3 = tmp_path / "cfg3.yaml"
    write_config(config3, scene, tmp_path / "o2", per_class="[500, 500]")
    assert main(["split", "--config", str(config3)]) == 3  # more pixels than exist


def test_bad_grid_exits_2(workspace, tmp_path):
    _, _, _, config, _ = workspace
    grid = tmp_path / "grid.yaml"
    grid.write_text("dropout: [0.5]\n")
    assert main(["ablate", "--config", str(config), "--grid", str(grid)]) == 2
    grid.write_text("gamma: {}\n")
    assert main(["ablate", "--config", str(config), "--grid", str(grid)]) == 2
    assert main(["ablate", "--config", str(config), "--grid", str(tmp_path / "no.yaml")]) == 2


def test_invalid_synth_requests_exit_3(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s"), "--zones", "0"]) == 3
    assert main(["synth", "--out", str(tmp_path / "s"), "--noise", "-0.5"]) == 3
