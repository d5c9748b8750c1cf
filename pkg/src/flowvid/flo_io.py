"""Middlebury .flo binary flow file reader/writer.

Layout: magic float32 202021.25, int32 width, int32 height, then
interleaved float32 (u, v) pairs in row-major order. u is the
horizontal (x) displacement, v the vertical (y) displacement.
"""

import numpy as np

from .errors import DataError

FLO_MAGIC = 202021.25


def write_flo(path, flow):
    """Write a (2, H, W) or (H, W, 2) float flow field to ``path``."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3:
        raise ValueError(f"flow must be 3-dimensional, got shape {flow.shape}")
    if flow.shape[0] == 2 and flow.shape[-1] != 2:
        flow = np.moveaxis(flow, 0, -1)
    if flow.shape[-1] != 2:
        raise ValueError(f"flow must have 2 components, got shape {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype=np.float32).tofile(f)
        np.array([w, h], dtype=np.int32).tofile(f)
        flow.astype(np.float32).tofile(f)


def read_flo(path):
    """Read a .flo file and return the flow as a (2, H, W) float32 array."""
    with open(path, "rb") as f:
        magic = np.fromfile(f, np.float32, count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise DataError(f"{path}: bad magic number, not a .flo file")
        dims = np.fromfile(f, np.int32, count=2)
        if dims.size != 2 or dims[0] <= 0 or dims[1] <= 0:
            raise DataError(f"{path}: corrupt .flo header")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(f, np.float32, count=2 * w * h)
        if data.size != 2 * w * h:
            raise DataError(f"{path}: truncated .flo file")
    return np.moveaxis(data.reshape(h, w, 2), -1, 0)
