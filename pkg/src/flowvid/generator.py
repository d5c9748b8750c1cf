"""Sequential flow-warping video generator.

Each output frame is produced from a sliding window of source label
maps and previously generated frames: a shared two-branch encoder
feeds two head networks, one hallucinating an image directly and one
predicting the optical flow to warp the previous output plus a soft
occlusion mask that blends the two. The mask and flow heads share
every weight except their final output convolutions.

A coarse-to-fine stack refines resolution: the coarsest stage runs on
2x-downsampled inputs and its final feature layer is summed into the
next stage's post-encoder features. With the foreground/background
split enabled, hallucination comes from two networks: a foreground one
seeing only the source window and a background one that also sees the
previously generated frames.
"""

from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import InstanceEncoder
from .warp import compose, compose_fg_bg, warp


@dataclass(frozen=True)
class GeneratorConfig:
    window: int = 2  # L past frames
    scales: int = 2
    base_channels: int = 32
    res_blocks: int = 4  # per stage, split between trunk and head paths
    downsamples: int = 3  # in the coarsest stage; finer stages use 1
    num_classes: int = 4
    fg_bg_enabled: bool = True
    feature_dim: int = 3
    multimodal_enabled: bool = True
    warp_enabled: bool = True  # False = pure hallucination ablation
    flow_scale: float = 1.0  # multiplies the linear flow head output
    background_classes: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.window < 1 or self.scales < 1 or self.feature_dim < 1:
            raise ValueError("window, scales and feature_dim must be >= 1")

    @property
    def label_channels(self):
        per_frame = self.num_classes
        if self.multimodal_enabled:
            per_frame += self.feature_dim
        return (self.window + 1) * per_frame

    @property
    def image_channels(self):
        return self.window * 3


def _conv_block(cin, cout, stride=1):
    return [nn.Conv2d(cin, cout, 3, stride, 1), nn.InstanceNorm2d(cout), nn.ReLU(True)]


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1),
            nn.InstanceNorm2d(ch),
            nn.ReLU(True),
            nn.Conv2d(ch, ch, 3, 1, 1),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class _Encoder(nn.Module):
    """Front conv plus ``downs`` stride-2 convs, doubling channels."""

    def __init__(self, cin, base, downs):
        super().__init__()
        layers = _conv_block(cin, base)
        ch = base
        for _ in range(downs):
            layers += _conv_block(ch, ch * 2, stride=2)
            ch *= 2
        self.net = nn.Sequential(*layers)
        self.out_channels = ch

    def forward(self, x):
        return self.net(x)


class _HeadPath(nn.Module):
    """Residual blocks then mirrored upsampling back to input resolution."""

    def __init__(self, ch, blocks, ups):
        super().__init__()
        layers = [ResidualBlock(ch) for _ in range(blocks)]
        for _ in range(ups):
            layers += [nn.Upsample(scale_factor=2, mode="nearest")]
            layers += _conv_block(ch, ch // 2)
            ch //= 2
        self.net = nn.Sequential(*layers)
        self.out_channels = ch

    def forward(self, x):
        return self.net(x)


class SynthStage(nn.Module):
    """One resolution level: shared encoders, trunk, and head paths."""

    def __init__(self, config: GeneratorConfig, base, downs, with_mw=True):
        super().__init__()
        trunk_blocks = config.res_blocks // 2
        head_blocks = config.res_blocks - trunk_blocks
        self.label_enc = _Encoder(config.label_channels, base, downs)
        self.image_enc = _Encoder(config.image_channels, base, downs)
        ch = self.label_enc.out_channels
        self.trunk = nn.Sequential(*[ResidualBlock(ch) for _ in range(trunk_blocks)])
        self.h_path = _HeadPath(ch, head_blocks, downs)
        self.h_out = nn.Conv2d(self.h_path.out_channels, 3, 3, 1, 1)
        if with_mw:
            self.mw_path = _HeadPath(ch, head_blocks, downs)
            self.flow_out = nn.Conv2d(self.mw_path.out_channels, 2, 3, 1, 1)
            self.mask_out = nn.Conv2d(self.mw_path.out_channels, 1, 3, 1, 1)
        else:
            self.mw_path = None
        self.flow_scale = config.flow_scale

    def forward(self, labels, images, extra_features=None):
        feats = self.label_enc(labels) + self.image_enc(images)
        if extra_features is not None:
            feats = feats + extra_features
        feats = self.trunk(feats)
        h_feats = self.h_path(feats)
        out = {
            "hallucination": torch.tanh(self.h_out(h_feats)),
            "features": h_feats,
        }
        if self.mw_path is not None:
            mw = self.mw_path(feats)
            out["flow"] = self.flow_out(mw) * self.flow_scale
            out["mask"] = torch.sigmoid(self.mask_out(mw))
        return out


class ForegroundStage(nn.Module):
    """Hallucinates foreground content from the source window alone."""

    def __init__(self, config: GeneratorConfig, base, downs):
        super().__init__()
        head_blocks = config.res_blocks - config.res_blocks // 2
        self.label_enc = _Encoder(config.label_channels, base, downs)
        ch = self.label_enc.out_channels
        self.trunk = nn.Sequential(
            *[ResidualBlock(ch) for _ in range(config.res_blocks // 2)]
        )
        self.h_path = _HeadPath(ch, head_blocks, downs)
        self.h_out = nn.Conv2d(self.h_path.out_channels, 3, 3, 1, 1)

    def forward(self, labels):
        feats = self.trunk(self.label_enc(labels))
        return torch.tanh(self.h_out(self.h_path(feats)))


@dataclass
class RolloutResult:
    frames: torch.Tensor  # (B, T, 3, H, W)
    flows: list  # length T-1; None where no step was run
    masks: list  # length T; None where no step was run
    hallucinations: list  # length T; None where no step was run


class VideoSynthesizer(nn.Module):
    """Coarse-to-fine stack of SynthStages applied recursively over time."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        stages = []
        fg_stages = []
        for s in range(config.scales):
            if s == 0:
                base, downs = config.base_channels, config.downsamples
            else:
                # each enhancer halves the base again so its
                # post-downsample width matches the previous stage's
                # final feature layer
                base, downs = max(config.base_channels >> s, 8), 1
            stages.append(SynthStage(config, base, downs, with_mw=config.warp_enabled))
            if config.fg_bg_enabled:
                fg_stages.append(ForegroundStage(config, base, downs))
        self.stages = nn.ModuleList(stages)
        self.fg_stages = nn.ModuleList(fg_stages) if config.fg_bg_enabled else None
        self.encoder = (
            InstanceEncoder(config.feature_dim) if config.multimodal_enabled else None
        )

    # -- structural helpers -------------------------------------------------

    @classmethod
    def stacked(cls, prev: "VideoSynthesizer") -> "VideoSynthesizer":
        """New synthesizer with one more scale, reusing trained stages."""
        config = replace(prev.config, scales=prev.config.scales + 1)
        model = cls(config)
        state = prev.state_dict()
        missing, unexpected = model.load_state_dict(state, strict=False)
        if unexpected:
            raise ValueError(f"stale parameters when stacking: {unexpected[:3]}")
        return model

    def load_coarse_checkpoint(self, state_dict, from_scales):
        if from_scales != self.config.scales - 1 and from_scales != self.config.scales:
            raise ValueError(
                f"checkpoint has {from_scales} scales, cannot load into a "
                f"{self.config.scales}-scale generator"
            )
        missing, unexpected = self.load_state_dict(state_dict, strict=False)
        if unexpected:
            raise ValueError(f"checkpoint scale mismatch: {unexpected[:3]}")

    def freeze_coarse(self, upto=None):
        """Disable gradients for every stage below the finest one."""
        upto = self.config.scales - 1 if upto is None else upto
        for s in range(upto):
            for p in self.stages[s].parameters():
                p.requires_grad_(False)
            if self.fg_stages is not None:
                for p in self.fg_stages[s].parameters():
                    p.requires_grad_(False)

    def mask_flow_parameter_split(self):
        """Parameter id sets for the mask and flow sub-networks.

        Both consist of the shared encoders, trunk and mw head path;
        they differ only in the final output convolution.
        """
        shared, mask_only, flow_only = [], [], []
        for stage in self.stages:
            if stage.mw_path is None:
                continue
            for mod in (stage.label_enc, stage.image_enc, stage.trunk, stage.mw_path):
                shared.extend(mod.parameters())
            mask_only.extend(stage.mask_out.parameters())
            flow_only.extend(stage.flow_out.parameters())
        return shared, mask_only, flow_only

    # -- synthesis ----------------------------------------------------------

    def step(
        self,
        source_window,
        prev_frames,
        bg_mask=None,
        mask_override=None,
        zero_flow=False,
    ):
        """Synthesize one frame.

        source_window: (B, L+1, C, H, W) one-hot labels (+ feature map
        channels when multimodal); prev_frames: (B, L, 3, H, W);
        bg_mask: (B, 1, H, W) binary, required when fg_bg is enabled.
        mask_override / zero_flow are diagnostic hooks.
        """
        cfg = self.config
        b, lp1, c, h, w = source_window.shape
        if lp1 != cfg.window + 1 or c != cfg.label_channels // (cfg.window + 1):
            raise ValueError(
                f"source window shape {tuple(source_window.shape)} does not match "
                f"config (window={cfg.window}, per-frame channels="
                f"{cfg.label_channels // (cfg.window + 1)})"
            )
        if prev_frames.shape[1] != cfg.window:
            raise ValueError("prev_frames must hold exactly `window` frames")
        if h % 2 ** (cfg.scales - 1) or w % 2 ** (cfg.scales - 1):
            raise ValueError(
                f"resolution {h}x{w} not divisible by 2^(scales-1)={2 ** (cfg.scales - 1)}"
            )
        if cfg.fg_bg_enabled and bg_mask is None:
            raise ValueError("fg/bg composition needs bg_mask")

        labels = source_window.reshape(b, lp1 * c, h, w)
        images = prev_frames.reshape(b, cfg.window * 3, h, w)

        feats = None
        out = None
        h_fg = None
        for s, stage in enumerate(self.stages):
            factor = 2 ** (cfg.scales - 1 - s)
            if factor > 1:
                lab_s = F.avg_pool2d(labels, factor)
                img_s = F.avg_pool2d(images, factor)
            else:
                lab_s, img_s = labels, images
            out = stage(lab_s, img_s, extra_features=feats)
            if self.fg_stages is not None:
                h_fg = self.fg_stages[s](lab_s)
            if s + 1 < cfg.scales:
                # this stage's final features sit at the next stage's
                # post-downsample resolution already
                feats = out["features"]

        hallucination = out["hallucination"]
        if not cfg.warp_enabled:
            if cfg.fg_bg_enabled:
                frame = (1.0 - bg_mask) * h_fg + bg_mask * hallucination
            else:
                frame = hallucination
            return {"frame": frame, "flow": None, "mask": None, "hallucination": frame}

        flow = out["flow"]
        mask = out["mask"]
        if zero_flow:
            flow = torch.zeros_like(flow)
        if mask_override is not None:
            mask = torch.full_like(mask, float(mask_override))
        warped = warp(prev_frames[:, -1], flow)
        if cfg.fg_bg_enabled:
            frame = compose_fg_bg(warped, h_fg, hallucination, mask, bg_mask)
        else:
            frame = compose(warped, hallucination, mask)
        return {
            "frame": frame,
            "flow": flow,
            "mask": mask,
            "hallucination": hallucination,
        }

    def rollout(
        self,
        source_feats,
        warmup_frames=None,
        bg_masks=None,
        mask_override=None,
        zero_flow=False,
    ) -> RolloutResult:
        """Generate a full sequence frame by frame.

        source_feats: (B, T, C, H, W); warmup_frames: (B, Tw, 3, H, W)
        with 0 <= Tw <= window, echoed into the output. Cold start
        (Tw=0) synthesizes the first frame with the hallucination path
        alone (mask forced to 1) and primes the window with copies.
        """
        cfg = self.config
        b, t_total = source_feats.shape[:2]
        L = cfg.window
        n_warm = 0 if warmup_frames is None else warmup_frames.shape[1]
        if n_warm > L:
            raise ValueError(f"warmup length {n_warm} exceeds window {L}")
        if cfg.fg_bg_enabled and bg_masks is None:
            raise ValueError("fg/bg composition needs bg_masks")

        def window_sources(t):
            idx = [max(i, 0) for i in range(t - L, t + 1)]
            return source_feats[:, idx]

        frames = []
        flows = [None] * (t_total - 1) if t_total > 1 else []
        masks = [None] * t_total
        hallucinations = [None] * t_total

        if n_warm > 0:
            frames = [warmup_frames[:, i] for i in range(n_warm)]
            start = n_warm
        else:
            first = self.step(
                window_sources(0),
                torch.zeros(
                    b, L, 3, *source_feats.shape[-2:], device=source_feats.device
                ),
                bg_mask=bg_masks[:, 0] if bg_masks is not None else None,
                mask_override=1.0 if cfg.warp_enabled else None,
            )
            frames = [first["frame"]]
            masks[0] = first["mask"]
            hallucinations[0] = first["hallucination"]
            start = 1
        if start >= t_total:
            return RolloutResult(
                torch.stack(frames[:t_total], dim=1), flows, masks, hallucinations
            )

        window = [frames[max(i, 0)] for i in range(start - L, start)]
        for t in range(start, t_total):
            out = self.step(
                window_sources(t),
                torch.stack(window, dim=1),
                bg_mask=bg_masks[:, t] if bg_masks is not None else None,
                mask_override=mask_override,
                zero_flow=zero_flow,
            )
            frames.append(out["frame"])
            flows[t - 1] = out["flow"]
            masks[t] = out["mask"]
            hallucinations[t] = out["hallucination"]
            window = window[1:] + [out["frame"]]

        return RolloutResult(torch.stack(frames, dim=1), flows, masks, hallucinations)


def one_hot_labels(labels, num_classes):
    """(…, H, W) integer labels -> (…, num_classes, H, W) float one-hot."""
    t = torch.as_tensor(labels, dtype=torch.long)
    oh = F.one_hot(t, num_classes=num_classes)
    return oh.movedim(-1, -3).float()
