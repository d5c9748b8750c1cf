"""Versioned checkpoint files with byte-deterministic serialization.

``torch.save`` embeds a per-process serialization id, so identical
states would not produce identical files. Checkpoints here are plain
pickles of a nested structure in which every tensor is converted to a
numpy array (tagged so it comes back as a tensor), preceded by a magic
string and a format version.
"""

import io
import pickle

import numpy as np
import torch

from .errors import DataError

MAGIC = b"FLOWVIDCKPT\x00"
FORMAT_VERSION = 1

_TENSOR_TAG = "__torch_tensor__"


def _pack(obj):
    if isinstance(obj, torch.Tensor):
        return {_TENSOR_TAG: obj.detach().cpu().numpy()}
    if isinstance(obj, dict):
        return {k: _pack(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        packed = [_pack(v) for v in obj]
        return packed if isinstance(obj, list) else tuple(packed)
    return obj


def _unpack(obj):
    if isinstance(obj, dict):
        if set(obj.keys()) == {_TENSOR_TAG}:
            return torch.from_numpy(obj[_TENSOR_TAG].copy())
        return {k: _unpack(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        unpacked = [_unpack(v) for v in obj]
        return unpacked if isinstance(obj, list) else tuple(unpacked)
    return obj


def save_checkpoint(state: dict, path):
    """Write a checkpoint; identical states yield identical bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(np.uint32(FORMAT_VERSION).tobytes())
    pickle.dump(_pack(state), buf, protocol=4)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        raw_version = f.read(4)
        if len(raw_version) != 4:
            raise DataError(f"{path}: truncated checkpoint header")
        version = int(np.frombuffer(raw_version, dtype=np.uint32)[0])
        if version != FORMAT_VERSION:
            raise DataError(
                f"{path}: checkpoint format version {version}, "
                f"this build reads version {FORMAT_VERSION}"
            )
        try:
            payload = pickle.load(f)
        except (pickle.UnpicklingError, EOFError, ValueError) as e:
            raise DataError(f"{path}: truncated or corrupt checkpoint: {e}") from e
    return _unpack(payload)
