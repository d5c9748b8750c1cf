import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from flowvid.cli import main
from flowvid.dataset import read_dataset
from flowvid.scene import BACKGROUND_CLASSES, derive_background_mask

TINY_TRAIN_CONFIG = {
    "batch_size": 2,
    "phases": [{"resolution": 32, "clip_frames": 6, "epochs": 0, "steps": 6}],
    "generator": {"scales": 1, "base_channels": 16, "res_blocks": 2, "downsamples": 2},
    "discriminator": {"base_channels": 16},
}


def _dir_digest(root):
    """Hash of the data files; run_config.json holds run metadata (the
    output path itself), so it is not part of the dataset contract."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name != "run_config.json":
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset_dir(workdir):
    out = workdir / "data"
    rc = main(
        [
            "make-data", "--out", str(out), "--train", "3", "--val", "2",
            "--size", "32", "--frames", "8", "--seed", "5",
        ]
    )
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(workdir, dataset_dir):
    cfg_file = workdir / "train_config.json"
    cfg_file.write_text(json.dumps(TINY_TRAIN_CONFIG))
    out = workdir / "run"
    rc = main(
        [
            "train", "--data", str(dataset_dir / "train"), "--out", str(out),
            "--config", str(cfg_file), "--seed", "1",
        ]
    )
    assert rc == 0
    return out / "checkpoint.ckpt"


def test_make_data_writes_expected_counts(dataset_dir):
    train = read_dataset(dataset_dir / "train")
    val = read_dataset(dataset_dir / "val")
    assert len(train) == 3 and len(val) == 2
    seq = train.load(0)
    assert seq.frames.shape == (8, 3, 32, 32)
    assert (dataset_dir / "run_config.json").exists()


def test_make_data_is_seed_deterministic(tmp_path):
    for sub in ("a", "b"):
        rc = main(
            [
                "make-data", "--out", str(tmp_path / sub), "--train", "1",
                "--val", "1", "--size", "32", "--frames", "6", "--seed", "7",
            ]
        )
        assert rc == 0
    da = _dir_digest(tmp_path / "a")
    db = _dir_digest(tmp_path / "b")
    assert da == db


def test_make_data_rejects_indivisible_size(tmp_path, capsys):
    rc = main(["make-data", "--out", str(tmp_path / "x"), "--size", "63"])
    assert rc == 1
    assert "divisible" in capsys.readouterr().err


def test_train_produces_checkpoint_log_and_config(checkpoint):
    run_dir = checkpoint.parent
    assert checkpoint.exists()
    log_lines = (run_dir / "train_log.ndjson").read_text().strip().splitlines()
    assert len(log_lines) == 6
    record = json.loads(log_lines[0])
    assert {"step", "g_total", "d_image"} <= set(record)
    resolved = json.loads((run_dir / "run_config.json").read_text())
    assert resolved["command"] == "train"
    assert resolved["config"]["seed"] == 1


def test_infer_writes_frames_and_is_reproducible(workdir, dataset_dir, checkpoint):
    outs = []
    for sub in ("infer_a", "infer_b"):
        out = workdir / sub
        rc = main(
            [
                "infer", "--checkpoint", str(checkpoint), "--source",
                str(dataset_dir / "val"), "--index", "0", "--out", str(out),
                "--feature-seed", "3",
            ]
        )
        assert rc == 0
        outs.append(out)
    frames = sorted((outs[0] / "frames").glob("*.png"))
    assert len(frames) == 8
    assert _dir_digest(outs[0] / "frames") == _dir_digest(outs[1] / "frames")


def test_infer_multimodal_seed_changes_output(workdir, dataset_dir, checkpoint):
    out = workdir / "infer_c"
    rc = main(
        [
            "infer", "--checkpoint", str(checkpoint), "--source",
            str(dataset_dir / "val"), "--index", "0", "--out", str(out),
            "--feature-seed", "4",
        ]
    )
    assert rc == 0
    a = np.asarray(Image.open(workdir / "infer_a" / "frames" / "0007.png"), dtype=np.int16)
    c = np.asarray(Image.open(out / "frames" / "0007.png"), dtype=np.int16)
    assert np.abs(a - c).mean() > 0


def test_infer_rejects_too_many_frames(workdir, dataset_dir, checkpoint):
    rc = main(
        [
            "infer", "--checkpoint", str(checkpoint), "--source",
            str(dataset_dir / "val"), "--index", "0", "--frames", "99",
            "--out", str(workdir / "never"),
        ]
    )
    assert rc == 1


def test_eval_appends_structured_report(workdir, dataset_dir, checkpoint):
    report = workdir / "report.ndjson"
    for _ in range(2):
        rc = main(
            [
                "eval", "--checkpoint", str(checkpoint), "--data",
                str(dataset_dir / "val"), "--out", str(report), "--seed", "2",
            ]
        )
        assert rc == 0
    lines = report.read_text().strip().splitlines()
    assert len(lines) == 2  # append-only
    rec = json.loads(lines[0])
    assert {"fid", "flicker", "warp_error", "extractor_seed", "clip_policy"} <= set(rec)
    assert rec["fid"] >= 0


def test_manipulate_identity_keeps_labels(workdir, dataset_dir):
    out = workdir / "manip_id"
    rc = main(
        [
            "manipulate", "--source", str(dataset_dir / "val"), "--out", str(out),
            "--relabel", "circle=circle",
        ]
    )
    assert rc == 0
    src = read_dataset(dataset_dir / "val").load(0)
    dst = read_dataset(out).load(0)
    np.testing.assert_array_equal(src.labels, dst.labels)
    np.testing.assert_array_equal(src.frames, dst.frames)


def test_manipulate_swaps_classes_and_grows_background(workdir, dataset_dir):
    out = workdir / "manip_swap"
    rc = main(
        [
            "manipulate", "--source", str(dataset_dir / "val"), "--out", str(out),
            "--relabel", "circle=background",
        ]
    )
    assert rc == 0
    src = read_dataset(dataset_dir / "val").load(0)
    dst = read_dataset(out).load(0)
    assert not np.any(dst.labels == 1)
    np.testing.assert_array_equal(dst.instances, src.instances)  # geometry unchanged
    before = derive_background_mask(src.labels[0], BACKGROUND_CLASSES)
    after = derive_background_mask(dst.labels[0], BACKGROUND_CLASSES)
    grown = (after == 1) & (before == 0)
    np.testing.assert_array_equal(grown, src.labels[0] == 1)


def test_manipulate_rejects_unknown_class(workdir, dataset_dir, capsys):
    rc = main(
        [
            "manipulate", "--source", str(dataset_dir / "val"), "--out",
            str(workdir / "manip_bad"), "--relabel", "circle=spiral",
        ]
    )
    assert rc == 1
    assert "unknown class" in capsys.readouterr().err


def test_predict_future_output_length_and_horizon_validation(workdir, dataset_dir, checkpoint):
    out = workdir / "future"
    rc = main(
        [
            "predict-future", "--checkpoint", str(checkpoint), "--source",
            str(dataset_dir / "val"), "--index", "1", "--observed", "2",
            "--horizon", "3", "--out", str(out),
        ]
    )
    assert rc == 0
    assert len(sorted((out / "frames").glob("*.png"))) == 3
    rc = main(
        [
            "predict-future", "--checkpoint", str(checkpoint), "--source",
            str(dataset_dir / "val"), "--horizon", "0", "--out", str(workdir / "f0"),
        ]
    )
    assert rc == 1


def test_missing_dataset_gives_data_error_exit_code(workdir, checkpoint, tmp_path):
    rc = main(
        [
            "infer", "--checkpoint", str(checkpoint), "--source", str(tmp_path),
            "--out", str(workdir / "missing"),
        ]
    )
    assert rc == 2
