"""Objective terms for adversarial training.

All pieces return scalar tensors. Score maps arrive as lists (one per
spatial scale) from the image discriminator, or lists of such lists
(one per temporal scale) from the video discriminator; every level is
averaged so scales contribute equally.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError
from .warp import warp

GAN_MODES = ("least-squares", "log")


@dataclass(frozen=True)
class LossWeights:
    flow: float = 10.0  # weight of the flow estimation loss
    fm_disc: float = 10.0  # discriminator feature matching
    fm_percep: float = 10.0  # fixed perceptual-network feature matching
    gan_mode: str = "least-squares"

    def __post_init__(self):
        if self.flow < 0 or self.fm_disc < 0 or self.fm_percep < 0:
            raise ValueError("loss weights must be >= 0")
        if self.gan_mode not in GAN_MODES:
            raise ValueError(f"gan_mode must be one of {GAN_MODES}")


def _scale_mean(score_maps, target):
    losses = [((s - target) ** 2).mean() for s in score_maps]
    return torch.stack(losses).mean()


def _scale_log(score_maps, real_side):
    # literal log-form objective evaluated with sigmoid scores
    losses = []
    for s in score_maps:
        p = torch.sigmoid(s)
        losses.append(torch.log(p if real_side else 1 - p).mean())
    return torch.stack(losses).mean()


def gan_loss_image(scores_real, scores_fake, role, mode="least-squares"):
    """GAN loss over image-discriminator score maps.

    role 'discriminator': push real scores to 1 and fake to 0.
    role 'generator': push fake scores to 1 (least-squares) or minimize
    the literal log(1 - D) term (log mode). ``scores_real`` may be None
    for the generator role.
    """
    if mode not in GAN_MODES:
        raise ValueError(f"unknown gan mode {mode!r}")
    if role == "discriminator":
        if mode == "least-squares":
            return _scale_mean(scores_real, 1.0) + _scale_mean(scores_fake, 0.0)
        return -(_scale_log(scores_real, True) + _scale_log(scores_fake, False))
    if role == "generator":
        if mode == "least-squares":
            return _scale_mean(scores_fake, 1.0)
        return _scale_log(scores_fake, False)
    raise ValueError(f"unknown role {role!r}")


def gan_loss_video(scores_real, scores_fake, role, mode="least-squares"):
    """Video GAN loss: the image kernel averaged over temporal scales.

    Inputs are lists over temporal scales (entries may be None for
    skipped scales); each entry is a list of spatial-scale score maps.
    """
    per_scale = []
    fake_iter = scores_fake if scores_fake is not None else [None] * len(scores_real)
    real_iter = scores_real if scores_real is not None else [None] * len(scores_fake)
    for real, fake in zip(real_iter, fake_iter):
        if real is None and fake is None:
            continue
        per_scale.append(gan_loss_image(real, fake, role, mode))
    if not per_scale:
        raise ValueError("no active temporal scales")
    return torch.stack(per_scale).mean()


def flow_loss(pred_flows, gt_flows, frames):
    """Mean endpoint error plus warping error, averaged over transitions.

    pred_flows / gt_flows: sequences of (B, 2, H, W) flows, aligned;
    frames: (B, T, 3, H, W) real frames with T = len(flows) + 1. Both
    terms are means over pixels and channels so their magnitudes are
    comparable.
    """
    if len(pred_flows) != len(gt_flows):
        raise ValueError(
            f"{len(pred_flows)} predicted flows vs {len(gt_flows)} ground-truth"
        )
    if frames.shape[1] != len(gt_flows) + 1:
        raise ValueError("frames must hold one more entry than flows")
    terms = []
    for t, (pred, gt) in enumerate(zip(pred_flows, gt_flows)):
        endpoint = (pred - gt).abs().mean()
        warped = warp(frames[:, t], pred)
        photometric = (warped - frames[:, t + 1]).abs().mean()
        terms.append(endpoint + photometric)
    return torch.stack(terms).mean()


def feature_matching_loss(features_real, features_fake):
    """Sum over layers of the mean absolute feature difference."""
    if len(features_real) != len(features_fake):
        raise ValueError(
            f"layer count mismatch: {len(features_real)} vs {len(features_fake)}"
        )
    terms = [
        (real.detach() - fake).abs().mean()
        for real, fake in zip(features_real, features_fake)
    ]
    return torch.stack(terms).sum()


def total_generator_objective(components, weights: LossWeights):
    """Weighted sum of the generator-side loss components.

    components: dict with any of the keys gan_image, gan_video, flow,
    fm_disc, fm_percep (missing keys contribute nothing). A NaN
    component raises with its name.
    """
    scale = {
        "gan_image": 1.0,
        "gan_video": 1.0,
        "flow": weights.flow,
        "fm_disc": weights.fm_disc,
        "fm_percep": weights.fm_percep,
    }
    total = None
    for name, value in components.items():
        if name not in scale:
            raise ValueError(f"unknown loss component {name!r}")
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericalError("non-finite loss", component=name)
        term = scale[name] * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss components given")
    return total


class PerceptualFeatures(nn.Module):
    """Fixed random conv features standing in for a pretrained extractor.

    Three strided conv layers with frozen, seed-fixed weights; the
    activations after each layer are the tapped features.
    """

    def __init__(self, seed=97, channels=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, 2, 1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen)
                    * (2.0 / (cin * 9)) ** 0.5
                )
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats
