"""Differentiable backward warping and occlusion-mask compositing.

Conventions used throughout the package:

* Frames are float tensors shaped (C, H, W) or (B, C, H, W), values
  nominally in [-1, 1].
* Flow fields are shaped (2, H, W) or (B, 2, H, W). Channel 0 is the
  horizontal displacement u (x axis, width), channel 1 the vertical
  displacement v (y axis, height), both in pixels.
* Flow is target-to-source: ``warp(frame, flow)[p] = frame[p + flow[p]]``
  via bilinear sampling, so warping frame t with the flow of transition
  t -> t+1 produces an estimate of frame t+1.

Out-of-bounds sample coordinates are clamped to the image border
(replication, not zero fill), which keeps camera-pan sequences free of
spurious dark edges.
"""

import torch
import torch.nn.functional as F

from .errors import NumericalError


def _as_batched(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected a 3D or 4D tensor, got shape {tuple(x.shape)}")


def warp(frame, flow):
    """Bilinear backward warp of ``frame`` by ``flow``.

    Differentiable with respect to both the frame values and the flow.
    Implemented as an explicit gather in pixel coordinates rather than
    ``grid_sample`` so that integer flows (zero flow in particular)
    reproduce source pixels bit-exactly, which the generator's
    identity-chain diagnostics rely on.
    """
    frame_b, squeeze = _as_batched(frame)
    flow_b, _ = _as_batched(flow)
    if flow_b.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got {flow_b.shape[1]}")
    if frame_b.shape[-2:] != flow_b.shape[-2:]:
        raise ValueError(
            f"frame spatial size {tuple(frame_b.shape[-2:])} does not match "
            f"flow spatial size {tuple(flow_b.shape[-2:])}"
        )
    if frame_b.shape[0] != flow_b.shape[0]:
        if flow_b.shape[0] == 1:
            flow_b = flow_b.expand(frame_b.shape[0], -1, -1, -1)
        else:
            raise ValueError("frame/flow batch sizes differ")

    if not torch.isfinite(flow_b).all():
        raise NumericalError("non-finite flow values passed to warp")

    b, c, h, w = frame_b.shape
    dtype, device = flow_b.dtype, flow_b.device
    ys = torch.arange(h, dtype=dtype, device=device).view(1, 1, h, 1)
    xs = torch.arange(w, dtype=dtype, device=device).view(1, 1, 1, w)
    # Sample coordinates, clamped to the image bounds (border replication).
    sx = (xs + flow_b[:, 0:1]).clamp(0, w - 1)
    sy = (ys + flow_b[:, 1:2]).clamp(0, h - 1)

    x0 = sx.floor()
    y0 = sy.floor()
    fx = sx - x0  # floor() has zero gradient, so fx carries d/d(flow)
    fy = sy - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = frame_b.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00, v01 = gather(y0, x0), gather(y0, x1)
    v10, v11 = gather(y1, x0), gather(y1, x1)
    out = (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )
    return out.squeeze(0) if squeeze else out


def _check_unit_range(mask, name):
    if mask.min().item() < 0.0 or mask.max().item() > 1.0:
        raise ValueError(
            f"{name} has values outside [0, 1] "
            f"(min={mask.min().item():.4g}, max={mask.max().item():.4g}); "
            "the producing network is missing its output squashing"
        )


def compose(warped, hallucinated, mask):
    """Convex per-pixel blend: (1 - mask) * warped + mask * hallucinated."""
    if warped.shape[-2:] != hallucinated.shape[-2:] or warped.shape[-2:] != mask.shape[-2:]:
        raise ValueError("compose inputs must share spatial size")
    _check_unit_range(mask, "mask")
    return (1.0 - mask) * warped + mask * hallucinated


def compose_fg_bg(warped, h_fg, h_bg, mask, bg_mask):
    """Blend with a foreground/background split of the hallucination.

    ``bg_mask`` must be binary: 1 where the source labels belong to a
    background class, 0 elsewhere. The hallucinated content is taken
    from ``h_bg`` on background pixels and ``h_fg`` on foreground
    pixels before the usual warp/hallucinate blend.
    """
    if not torch.logical_or(bg_mask == 0, bg_mask == 1).all():
        raise ValueError("bg_mask must be binary-valued {0, 1}")
    hallucinated = (1.0 - bg_mask) * h_fg + bg_mask * h_bg
    return compose(warped, hallucinated, mask)


def rescale_flow(flow, factor):
    """Spatially resample a flow field and scale its displacements.

    ``factor`` must yield integer output dimensions. Downsampling by
    0.5 equals 2x2 average pooling of the displacements followed by
    halving them.
    """
    flow_b, squeeze = _as_batched(flow)
    if factor == 1:
        return flow
    h, w = flow_b.shape[-2:]
    new_h, new_w = h * factor, w * factor
    if new_h != int(new_h) or new_w != int(new_w):
        raise ValueError(
            f"factor {factor} maps {h}x{w} to non-integer dimensions {new_h}x{new_w}"
        )
    out = F.interpolate(
        flow_b, size=(int(new_h), int(new_w)), mode="bilinear", align_corners=False
    )
    out = out * factor
    return out.squeeze(0) if squeeze else out


def compose_flow_chain(flows):
    """Accumulate consecutive target-to-source flows into one flow.

    ``flows[k]`` maps frame k+1 pixels back into frame k. The result
    maps the last frame's pixels back into the first frame: each step
    is added after warping the earlier flow to the latest grid. For a
    pure translation this reduces to the plain sum of the flows.
    """
    if len(flows) == 0:
        raise ValueError("compose_flow_chain needs at least one flow")
    total = flows[-1]
    for f in reversed(flows[:-1]):
        total = total + warp(f, total)
    return total
