"""Conditional image and temporally multi-scale video discriminators.

Both are spatially multi-scale patch discriminators. The image
discriminator scores a frame conditioned on its one-hot source map;
the video discriminator scores stacks of consecutive frames
conditioned on the ground-truth flows between them, and runs one
branch per temporal scale: scale 1 sees consecutive frames, scale 2
frames strided by the clip length, and so on, with flows accumulated
across the skipped transitions.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .warp import compose_flow_chain


@dataclass(frozen=True)
class DiscriminatorConfig:
    clip_length: int = 3  # K frames per video clip
    spatial_scales: int = 2
    temporal_scales: int = 3
    base_channels: int = 32
    num_classes: int = 4
    condition_on_source: bool = False  # optionally feed source maps to D_V

    def temporal_stride(self, scale):
        return self.clip_length ** (scale - 1)

    def span(self, scale):
        """Frames of original footage covered by one clip at this scale."""
        return self.temporal_stride(scale) * (self.clip_length - 1) + 1


@dataclass
class ImagePairSample:
    frame: torch.Tensor
    source: torch.Tensor
    index: int


@dataclass
class VideoClipSample:
    frames: torch.Tensor  # (K, 3, H, W)
    flows: torch.Tensor  # (K-1, 2, H, W)
    sources: torch.Tensor  # (K, C, H, W)
    start: int
    stride: int = 1


def sample_image_pair(frames, sources, rng, lo=0) -> ImagePairSample:
    """Uniformly sample one aligned (frame, source) pair."""
    t = frames.shape[0]
    if t <= lo:
        raise ValueError("cannot sample an image pair from an empty range")
    i = int(rng.integers(lo, t))
    return ImagePairSample(frames[i], sources[i], i)


def sample_video_clip(flows, frames, sources, clip_length, rng, stride=1, lo=0):
    """Sample ``clip_length`` frames spaced ``stride`` apart plus their flows.

    Flows between sampled frames are the originals for stride 1 and
    accumulated chains across the skipped transitions otherwise.
    """
    t = frames.shape[0]
    span = stride * (clip_length - 1) + 1
    if t - lo < span:
        raise ValueError(
            f"sequence of length {t} (from {lo}) too short for a clip spanning {span}"
        )
    start = int(rng.integers(lo, t - span + 1))
    idx = [start + stride * j for j in range(clip_length)]
    clip_frames = frames[idx]
    clip_sources = sources[idx]
    if stride == 1:
        clip_flows = flows[start : start + clip_length - 1]
    else:
        chains = []
        for j in range(clip_length - 1):
            a = start + stride * j
            chains.append(compose_flow_chain([flows[k] for k in range(a, a + stride)]))
        clip_flows = torch.stack(chains)
    return VideoClipSample(clip_frames, clip_flows, clip_sources, start, stride)


class PatchDiscriminator(nn.Module):
    """PatchGAN tower returning intermediate features plus a score map."""

    def __init__(self, in_channels, base_channels=32):
        super().__init__()
        ch = base_channels
        self.blocks = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(in_channels, ch, 4, 2, 1), nn.LeakyReLU(0.2, True)),
                nn.Sequential(
                    nn.Conv2d(ch, ch * 2, 4, 2, 1),
                    nn.InstanceNorm2d(ch * 2),
                    nn.LeakyReLU(0.2, True),
                ),
                nn.Sequential(
                    nn.Conv2d(ch * 2, ch * 4, 4, 1, 1),
                    nn.InstanceNorm2d(ch * 4),
                    nn.LeakyReLU(0.2, True),
                ),
            ]
        )
        self.score = nn.Conv2d(ch * 4, 1, 4, 1, 1)

    def forward(self, x):
        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        return features, self.score(x)


class MultiScalePatchDiscriminator(nn.Module):
    """Runs PatchDiscriminators on progressively downsampled input."""

    def __init__(self, in_channels, num_scales=2, base_channels=32):
        super().__init__()
        self.towers = nn.ModuleList(
            [PatchDiscriminator(in_channels, base_channels) for _ in range(num_scales)]
        )

    def forward(self, x):
        outputs = []
        for i, tower in enumerate(self.towers):
            if i > 0:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            outputs.append(tower(x))
        scores = [score for _, score in outputs]
        features = [feats for feats, _ in outputs]
        return scores, features


class ImageDiscriminator(nn.Module):
    """Scores (frame, source) pairs at several spatial scales."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.net = MultiScalePatchDiscriminator(
            3 + config.num_classes, config.spatial_scales, config.base_channels
        )

    def forward(self, frame, source_onehot):
        if frame.shape[-2:] != source_onehot.shape[-2:]:
            raise ValueError("frame and source map sizes differ")
        return self.net(torch.cat([frame, source_onehot], dim=1))


class VideoDiscriminator(nn.Module):
    """Flow-conditioned clip discriminator, one branch per temporal scale."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        k = config.clip_length
        in_ch = k * 3 + (k - 1) * 2
        if config.condition_on_source:
            in_ch += k * config.num_classes
        self.branches = nn.ModuleList(
            [
                MultiScalePatchDiscriminator(
                    in_ch, config.spatial_scales, config.base_channels
                )
                for _ in range(config.temporal_scales)
            ]
        )

    def active_scales(self, num_frames):
        """Temporal scales whose clip span fits in ``num_frames``."""
        return [
            s
            for s in range(1, self.config.temporal_scales + 1)
            if self.config.span(s) <= num_frames
        ]

    def forward_scale(self, scale, frames, flows, sources=None):
        """Score a batch of clips sampled at one temporal scale.

        frames: (B, K, 3, H, W); flows: (B, K-1, 2, H, W); sources only
        when the config conditions on them.
        """
        k = self.config.clip_length
        if frames.shape[1] != k or flows.shape[1] != k - 1:
            raise ValueError(
                f"clip must hold {k} frames and {k - 1} flows, got "
                f"{frames.shape[1]} and {flows.shape[1]}"
            )
        b, _, _, h, w = frames.shape
        parts = [frames.reshape(b, k * 3, h, w), flows.reshape(b, (k - 1) * 2, h, w)]
        if self.config.condition_on_source:
            if sources is None:
                raise ValueError("config.condition_on_source requires source maps")
            parts.append(sources.reshape(b, -1, h, w))
        return self.branches[scale - 1](torch.cat(parts, dim=1))
