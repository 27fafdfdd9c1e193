import json

import numpy as np
import pytest

from msmatch.cli import main
from msmatch.config import RunConfig, save_config
from msmatch.datahub import synth_pair, write_gray
from msmatch.network import ModelConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = RunConfig(model=ModelConfig(channels=16, encoder_widths=(4, 8, 8), descriptor_dim=8, head_mid=8,
                                      head_pool=4, head_hidden=16))
    cfg.adaptation.n_homographies = 3
    cfg.train.steps = 2
    cfg.train.batch_size = 2
    cfg.train.sample.crop_size = 32
    save_config(cfg, root / "cfg.json")
    assert main(["synth", "--out", str(root / "data"), "--n-pairs", "3", "--height", "32", "--width", "40",
                 "--seed", "1"]) == 0
    return root


def run(workspace, *argv):
    return main([argv[0], "--config", str(workspace / "cfg.json"), *map(str, argv[1:])])


def test_label_writes_files_and_summary(workspace):
    out = workspace / "label"
    assert run(workspace, "label", "--out", out, "--workers", 1, workspace / "data") == 0
    files = sorted((out / "labels").glob("*.json"))
    assert len(files) == 3
    summary = json.loads((out / "summary.json").read_text())
    counts = [len(json.loads(f.read_text())["keypoints"]) for f in files]
    assert summary["total_keypoints"] == sum(counts) and summary["pairs"] == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "label" and man["config"]["adaptation"]["n_homographies"] == 3


def test_label_is_deterministic(workspace):
    a, b = workspace / "la", workspace / "lb"
    for out, workers in ((a, 1), (b, 2)):
        assert run(workspace, "label", "--out", out, "--workers", workers, workspace / "data") == 0
    for f in sorted((a / "labels").glob("*.json")):
        assert f.read_bytes() == (b / "labels" / f.name).read_bytes()


@pytest.fixture(scope="module")
def trained(workspace):
    assert run(workspace, "label", "--out", workspace / "lab", "--workers", 1, workspace / "data") == 0
    out = workspace / "model"
    assert run(workspace, "train", "--out", out, "--labels", workspace / "lab" / "labels", workspace / "data") == 0
    return out / "checkpoint.pt"


def test_train_outputs(workspace, trained):
    out = trained.parent
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 2
    man = json.loads((out / "manifest.json").read_text())
    assert man["batch_size"] == 2 and man["optimizer"] == "adam"


def test_train_missing_labels_is_data_error(workspace):
    assert run(workspace, "train", "--out", workspace / "m2", "--labels", workspace / "nowhere", workspace / "data") == 3


def test_eval_outputs_and_determinism(workspace, trained):
    outs = [workspace / "ev1", workspace / "ev2"]
    for out in outs:
        assert run(workspace, "eval", "--out", out, "--checkpoint", trained, "--det-threshold", 0.0,
                   workspace / "data") == 0
    for name in ("report.json", "pairs.csv", "corner_accuracy.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rep = json.loads((outs[0] / "report.json").read_text())
    assert rep["mean_repeatability"] == pytest.approx(np.mean([p["repeatability"] for p in rep["pairs"]]))
    assert len(rep["mean_corner_accuracy"]) == 10


def test_eval_identity_self_pairs(workspace, trained):
    out = workspace / "ev_id"
    assert run(workspace, "eval", "--out", out, "--checkpoint", trained, "--det-threshold", 0.0,
               "--identity", "--self-pairs", workspace / "data") == 0
    rep = json.loads((out / "report.json").read_text())
    assert all(p["repeatability"] == 1.0 for p in rep["pairs"])


def test_eval_bad_manifest(workspace, trained, tmp_path):
    import torch

    blob = torch.load(trained, weights_only=False)
    blob["manifest"]["in_cell_order"] = "column-major"
    torch.save(blob, tmp_path / "bad.pt")
    assert run(workspace, "eval", "--out", tmp_path / "o", "--checkpoint", tmp_path / "bad.pt",
               workspace / "data") == 3


def test_missing_checkpoint_is_clean_error(workspace, tmp_path, capsys):
    img = tmp_path / "a.png"
    write_gray(img, synth_pair(0, (32, 32)).image_a)
    code = run(workspace, "register", "--out", tmp_path / "r", "--checkpoint", tmp_path / "none.pt", img, img)
    assert code == 3
    assert "checkpoint not found" in capsys.readouterr().err


def test_config_error_exit_code(workspace, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"fit": {"reproj_threshold": -1}}))
    assert main(["eval", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o"), "--untrained",
                 str(workspace / "data")]) == 2


def test_unpaired_dataset_exit_code(workspace, tmp_path):
    write_gray(tmp_path / "spectrum_a" / "x.png", np.zeros((32, 32)))
    assert run(workspace, "label", "--out", tmp_path / "o", tmp_path) == 3


def test_match_writes_outputs(workspace, trained, tmp_path):
    pair = synth_pair(3, (32, 32))
    write_gray(tmp_path / "a.png", pair.image_a)
    write_gray(tmp_path / "b.png", pair.image_b)
    assert run(workspace, "match", "--out", tmp_path / "m", "--checkpoint", trained, "--det-threshold", 0.0,
               tmp_path / "a.png", tmp_path / "b.png") == 0
    data = json.loads((tmp_path / "m" / "matches.json").read_text())
    assert data["n_matches"] == len(data["matches"]) > 0
    assert (tmp_path / "m" / "matches.png").is_file() and (tmp_path / "m" / "manifest.json").is_file()


def test_register_outputs_or_no_consensus(workspace, trained, tmp_path):
    pair = synth_pair(4, (32, 32))
    write_gray(tmp_path / "a.png", pair.image_a)
    code = run(workspace, "register", "--out", tmp_path / "r", "--checkpoint", trained, "--det-threshold", 0.0,
               tmp_path / "a.png", tmp_path / "a.png")
    assert code in (0, 4)
    assert (tmp_path / "r" / "matches.json").is_file()
    if code == 0:
        from msmatch import geometry as geo

        H = geo.from_list(json.loads((tmp_path / "r" / "homography.json").read_text())["homography"])
        c = geo.image_corners((32, 32))
        assert np.abs(geo.warp_points(c, H) - c).max() < 0.5  # same image on both sides
        assert (tmp_path / "r" / "overlay.png").is_file()


def test_register_no_consensus_exit(workspace, trained, tmp_path):
    blank = tmp_path / "blank.png"
    write_gray(blank, np.full((32, 32), 0.5))
    code = run(workspace, "register", "--out", tmp_path / "r", "--checkpoint", trained, "--det-threshold", 0.9,
               blank, blank)
    assert code == 4
    assert json.loads((tmp_path / "r" / "matches.json").read_text())["n_matches"] == 0
