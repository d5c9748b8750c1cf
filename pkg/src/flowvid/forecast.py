"""Constant-velocity semantic-label forecasting.

Future prediction splits into two stages: extrapolate the source label
maps forward, then run the usual synthesis on the extrapolated source.
This module is stage one: per-instance velocities estimated from the
last two observed frames, instances shifted rigidly, background
filling the vacated pixels.
"""

import numpy as np


def estimate_instance_velocities(instances_prev, instances_last):
    """Per-instance centroid displacement (x, y), rounded to integers."""
    velocities = {}
    for i in np.unique(instances_last):
        if i == 0:
            continue
        cur = np.argwhere(instances_last == i)
        prev = np.argwhere(instances_prev == i)
        if len(cur) == 0 or len(prev) == 0:
            velocities[int(i)] = (0, 0)
            continue
        dy, dx = cur.mean(axis=0) - prev.mean(axis=0)
        velocities[int(i)] = (int(np.rint(dx)), int(np.rint(dy)))
    return velocities


def forecast_labels(labels, instances, horizon):
    """Extrapolate label/instance maps ``horizon`` frames forward.

    labels/instances: (T_obs, H, W) with T_obs >= 2. Returns a pair of
    (horizon, H, W) arrays. Instances move at the constant velocity
    estimated from the last two observed frames; later instance IDs
    stay on top, matching the renderer's z-order.
    """
    labels = np.asarray(labels)
    instances = np.asarray(instances)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if labels.shape[0] < 2:
        raise ValueError("need at least 2 observed frames to estimate motion")
    h, w = labels.shape[-2:]
    velocities = estimate_instance_velocities(instances[-2], instances[-1])
    last_labels, last_inst = labels[-1], instances[-1]

    out_labels = np.zeros((horizon,) + last_labels.shape, dtype=labels.dtype)
    out_inst = np.zeros((horizon,) + last_inst.shape, dtype=instances.dtype)
    for step in range(1, horizon + 1):
        lab = np.zeros_like(last_labels)
        inst = np.zeros_like(last_inst)
        for i in sorted(velocities):
            vx, vy = velocities[i]
            ys, xs = np.nonzero(last_inst == i)
            if len(ys) == 0:
                continue
            ny, nx = ys + step * vy, xs + step * vx
            keep = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            cls = last_labels[ys[0], xs[0]]
            lab[ny[keep], nx[keep]] = cls
            inst[ny[keep], nx[keep]] = i
        out_labels[step - 1] = lab
        out_inst[step - 1] = inst
    return out_labels, out_inst
