"""Dataset directory layout and lossless round-trip I/O.

Layout per sequence::

    <root>/manifest.json
    <root>/<id>/frames/%04d.png      8-bit RGB
    <root>/<id>/labels/%04d.png      8-bit class IDs
    <root>/<id>/instances/%04d.png   8-bit instance IDs
    <root>/<id>/flow/%04d.flo        Middlebury float32 (u, v)
    <root>/<id>/valid/%04d.png       8-bit, 0 or 255

Frames are quantized to the 8-bit lattice already at render time, so
write followed by read reproduces every field bit-exactly.
"""

import dataclasses
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .flo_io import read_flo, write_flo
from .scene import NUM_CLASSES, BACKGROUND_CLASSES, PairedSequence, SceneConfig, ShapeSpec

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def config_to_dict(config: SceneConfig) -> dict:
    d = dataclasses.asdict(config)
    if config.shapes is not None:
        d["shapes"] = [dataclasses.asdict(s) for s in config.shapes]
    return d


def config_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    d["shape_kinds"] = tuple(d["shape_kinds"])
    d["size_range"] = tuple(d["size_range"])
    d["camera_pan"] = tuple(d["camera_pan"])
    if d.get("shapes") is not None:
        d["shapes"] = tuple(
            ShapeSpec(
                kind=s["kind"],
                center=tuple(s["center"]),
                size=tuple(s["size"]),
                color=tuple(s["color"]),
                velocity=tuple(s["velocity"]),
            )
            for s in d["shapes"]
        )
    return SceneConfig(**d)


def _write_gray(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def _read_image(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing frame file: {p}")
    return np.asarray(Image.open(p))


def frame_to_uint8(frame):
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    return np.clip(np.rint((np.moveaxis(frame, 0, -1) + 1.0) * 127.5), 0, 255).astype(
        np.uint8
    )


def uint8_to_frame(img):
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    return np.moveaxis(img.astype(np.float32) / 127.5 - 1.0, -1, 0)


def write_sequence(seq: PairedSequence, seq_dir):
    seq_dir = Path(seq_dir)
    for sub in ("frames", "labels", "instances", "flow", "valid"):
        (seq_dir / sub).mkdir(parents=True, exist_ok=True)
    T = seq.num_frames
    for t in range(T):
        Image.fromarray(frame_to_uint8(seq.frames[t]), mode="RGB").save(
            seq_dir / "frames" / f"{t:04d}.png"
        )
        _write_gray(seq_dir / "labels" / f"{t:04d}.png", seq.labels[t])
        _write_gray(seq_dir / "instances" / f"{t:04d}.png", seq.instances[t])
    for t in range(T - 1):
        write_flo(seq_dir / "flow" / f"{t:04d}.flo", seq.flows[t])
        _write_gray(seq_dir / "valid" / f"{t:04d}.png", seq.valid[t].astype(np.uint8) * 255)


def write_dataset(sequences, directory, ids=None):
    """Write sequences plus a manifest; returns the manifest dict."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, seq in enumerate(sequences):
        seq_id = ids[i] if ids is not None else f"seq{i:04d}"
        write_sequence(seq, root / seq_id)
        entries.append(
            {
                "id": seq_id,
                "num_frames": int(seq.num_frames),
                "height": int(seq.config.height),
                "width": int(seq.config.width),
                "config": config_to_dict(seq.config),
            }
        )
    manifest = {
        "format_version": MANIFEST_VERSION,
        "num_classes": NUM_CLASSES,
        "background_classes": list(BACKGROUND_CLASSES),
        "sequences": entries,
    }
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


class SequenceReader:
    """Lazy per-frame access to one sequence directory.

    Used by streaming inference so memory stays independent of the
    sequence length.
    """

    def __init__(self, seq_dir, entry):
        self.dir = Path(seq_dir)
        self.entry = entry
        self.num_frames = entry["num_frames"]

    def label(self, t):
        return _read_image(self.dir / "labels" / f"{t:04d}.png")

    def instance(self, t):
        return _read_image(self.dir / "instances" / f"{t:04d}.png")

    def frame(self, t):
        return uint8_to_frame(_read_image(self.dir / "frames" / f"{t:04d}.png"))

    def flow(self, t):
        p = self.dir / "flow" / f"{t:04d}.flo"
        if not p.exists():
            raise DataError(f"missing frame file: {p}")
        return read_flo(p)

    def valid(self, t):
        return _read_image(self.dir / "valid" / f"{t:04d}.png") > 0

    def load(self) -> PairedSequence:
        T = self.num_frames
        return PairedSequence(
            config=config_from_dict(self.entry["config"]),
            labels=np.stack([self.label(t) for t in range(T)]).astype(np.uint8),
            instances=np.stack([self.instance(t) for t in range(T)]).astype(np.uint8),
            frames=np.stack([self.frame(t) for t in range(T)]),
            flows=np.stack([self.flow(t) for t in range(T - 1)]),
            valid=np.stack([self.valid(t) for t in range(T - 1)]),
        )


class DatasetHandle:
    def __init__(self, root, manifest):
        self.root = Path(root)
        self.manifest = manifest
        self.entries = manifest["sequences"]

    def __len__(self):
        return len(self.entries)

    def reader(self, i) -> SequenceReader:
        entry = self.entries[i]
        return SequenceReader(self.root / entry["id"], entry)

    def load(self, i) -> PairedSequence:
        return self.reader(i).load()

    def load_all(self):
        return [self.load(i) for i in range(len(self))]


def read_dataset(directory) -> DatasetHandle:
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no manifest in {root}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"corrupt manifest {manifest_path}: {e}") from e
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataError(
            f"manifest {manifest_path} has format_version "
            f"{manifest.get('format_version')}, expected {MANIFEST_VERSION}"
        )
    return DatasetHandle(root, manifest)
