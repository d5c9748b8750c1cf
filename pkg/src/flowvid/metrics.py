"""Video quality metrics: a Frechet distance over clip features plus
warp-consistency diagnostics.

The clip feature extractor is a frozen, seed-fixed spatio-temporal
conv network, so absolute distance values are specific to this
artifact; only comparisons made with the same extractor are
meaningful.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn

from .errors import NumericalError
from .warp import warp

CLIP_LENGTH = 8
CLIP_STRIDE = 4


class ClipFeatureExtractor(nn.Module):
    """Three space-time conv layers, global average pool, 64-d output."""

    def __init__(self, seed=1234, feature_dim=64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        channels = [(3, 16, (1, 2, 2)), (16, 32, (2, 2, 2)), (32, feature_dim, (2, 2, 2))]
        convs = []
        for cin, cout, stride in channels:
            conv = nn.Conv3d(cin, cout, 3, stride, 1)
            with torch.no_grad():
                fan_in = cin * 27
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
                )
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        self.feature_dim = feature_dim
        self.seed = seed
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def forward(self, clips):
        """clips: (B, 3, T, H, W) -> (B, feature_dim)."""
        x = clips
        for conv in self.convs:
            x = torch.relu(conv(x))
        return x.mean(dim=(2, 3, 4))


def extract_clips(frames, clip_length=CLIP_LENGTH, stride=CLIP_STRIDE):
    """Slice a (T, 3, H, W) video into (3, clip_length, H, W) clips."""
    t = frames.shape[0]
    if t < clip_length:
        raise ValueError(f"video of length {t} shorter than clip length {clip_length}")
    starts = range(0, t - clip_length + 1, stride)
    return [frames[s : s + clip_length].movedim(0, 1) for s in starts]


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int


def accumulate_stats(clips, extractor, batch_size=16) -> GaussianStats:
    """Streaming mean/covariance of extractor features over clips."""
    d = extractor.feature_dim
    total = np.zeros(d)
    outer = np.zeros((d, d))
    n = 0
    batch = []

    def flush():
        nonlocal total, outer, n
        if not batch:
            return
        feats = extractor(torch.stack(batch)).double().numpy()
        total += feats.sum(axis=0)
        outer += feats.T @ feats
        n += len(feats)
        batch.clear()

    for clip in clips:
        batch.append(torch.as_tensor(clip))
        if len(batch) == batch_size:
            flush()
    flush()
    if n < 2:
        raise ValueError(f"need at least 2 clips to estimate covariance, got {n}")
    mean = total / n
    cov = (outer - n * np.outer(mean, mean)) / (n - 1)
    cov = (cov + cov.T) / 2.0  # enforce symmetry after accumulation
    return GaussianStats(mean=mean, covariance=cov, count=n)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mean_a - mean_b||^2 + Tr(cov_a + cov_b - 2 sqrt(cov_a cov_b))."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("feature dimensions differ")
    diff = a.mean - b.mean
    prod = a.covariance @ b.covariance
    try:
        sqrt_prod, _ = scipy.linalg.sqrtm(prod, disp=False)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise NumericalError(f"matrix square root failed: {e}") from e
    if not np.isfinite(sqrt_prod).all():
        raise NumericalError("matrix square root did not converge")
    if np.iscomplexobj(sqrt_prod):
        scale = max(np.abs(sqrt_prod.real).max(), 1e-12)
        if np.abs(sqrt_prod.imag).max() / scale > 1e-6:
            raise NumericalError("matrix square root has a large imaginary part")
        sqrt_prod = sqrt_prod.real
    value = float(
        diff @ diff + np.trace(a.covariance + b.covariance - 2.0 * sqrt_prod)
    )
    eps = 1e-6 * max(1.0, abs(np.trace(a.covariance)) + abs(np.trace(b.covariance)))
    if value < -eps:
        raise NumericalError(f"frechet distance {value} below -{eps}")
    return max(value, 0.0)


def video_fid(real_clips, generated_clips, extractor) -> float:
    """Frechet distance between feature Gaussians of two clip sets."""
    return frechet_distance(
        accumulate_stats(real_clips, extractor),
        accumulate_stats(generated_clips, extractor),
    )


def _masked_warp_l1(frames, flows, valid):
    """Mean masked L1 of warp(x_t, w_t) vs x_{t+1} over all transitions."""
    t_total = frames.shape[0]
    if len(flows) != t_total - 1:
        raise ValueError(f"{len(flows)} flows for {t_total} frames")
    total, count = 0.0, 0
    for t in range(t_total - 1):
        warped = warp(frames[t], flows[t])
        err = (warped - frames[t + 1]).abs()
        m = valid[t]
        mask = torch.as_tensor(m, dtype=err.dtype).expand_as(err)
        total += float((err * mask).sum())
        count += float(mask.sum())
    if count == 0:
        raise ValueError("no valid pixels")
    return total / count


def warp_error(frames, flows, valid) -> float:
    """Flow-consistency of (usually real) frames under given flows."""
    return _masked_warp_l1(frames, flows, valid)


def temporal_flicker(generated_frames, gt_flows, valid) -> float:
    """Warp residual of generated frames under ground-truth flow."""
    return _masked_warp_l1(generated_frames, gt_flows, valid)
