"""Alternating adversarial optimization with a progressive schedule.

Training walks through phases of increasing resolution and clip
length. Each step samples a batch of clips, rolls the generator out
over them (primed with real frames), updates the discriminators on
detached outputs, then updates the generator through the full rollout.
On a resolution transition a new refinement stage is stacked onto the
generator and fresh discriminators are built; on a clip-length-only
transition optimizer state carries over.

All randomness flows through two owned streams (torch's global RNG for
initialization, one numpy generator for sampling), both captured in
checkpoints, so an interrupted run resumes bit-exactly.
"""

import dataclasses
import json
import math
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .discriminator import DiscriminatorConfig, ImageDiscriminator, VideoDiscriminator
from .encoder import InstanceFeatureModel, instance_average_pool
from .errors import NumericalError
from .generator import GeneratorConfig, VideoSynthesizer, one_hot_labels
from .losses import (
    LossWeights,
    PerceptualFeatures,
    feature_matching_loss,
    flow_loss,
    gan_loss_image,
    gan_loss_video,
    total_generator_objective,
)
from .scene import resize_paired_sequence
from .warp import compose_flow_chain

ABLATIONS = ("full", "no_fg_bg", "no_video_disc", "no_flow_warp")


@dataclass(frozen=True)
class PhaseConfig:
    resolution: int
    clip_frames: int
    epochs: int = 0
    steps: int = 0  # overrides epochs when > 0


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 2
    phases: tuple[PhaseConfig, ...] = (
        PhaseConfig(resolution=32, clip_frames=6, epochs=10),
        PhaseConfig(resolution=64, clip_frames=12, epochs=30),
    )
    ablation: str = "full"
    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    weights: LossWeights = LossWeights()
    gmm_components: int = 3
    debug_audit: bool = False

    def validate(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        last_res, last_clip = 0, 0
        for p in self.phases:
            if p.resolution < last_res or p.clip_frames < last_clip:
                raise ValueError("phases must be nondecreasing in scale and length")
            last_res, last_clip = p.resolution, p.clip_frames
        for p in self.phases:
            if p.clip_frames < max(self.generator.window + 1, self.discriminator.clip_length):
                raise ValueError(
                    f"phase clip length {p.clip_frames} below "
                    f"max(window+1, K)"
                )


def effective_generator_config(config: TrainConfig) -> GeneratorConfig:
    g = config.generator
    if config.ablation == "no_fg_bg":
        g = replace(g, fg_bg_enabled=False)
    if config.ablation == "no_flow_warp":
        g = replace(g, warp_enabled=False)
    return g


def config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["betas"] = tuple(d["betas"])
    d["phases"] = tuple(PhaseConfig(**p) for p in d["phases"])
    gen = dict(d["generator"])
    gen["background_classes"] = tuple(gen["background_classes"])
    d["generator"] = GeneratorConfig(**gen)
    d["discriminator"] = DiscriminatorConfig(**d["discriminator"])
    d["weights"] = LossWeights(**d["weights"])
    return TrainConfig(**d)


def _phase_tensors(seq, factor):
    """Resize one sequence for a phase and convert to torch tensors."""
    s = resize_paired_sequence(seq, factor)
    return {
        "frames": torch.from_numpy(s.frames),
        "labels": torch.from_numpy(s.labels.astype(np.int64)),
        "instances": torch.from_numpy(s.instances.astype(np.int64)),
        "flows": torch.from_numpy(s.flows),
        "bg": torch.from_numpy(s.background_masks).unsqueeze(1),
    }


class Trainer:
    def __init__(self, sequences, config: TrainConfig, log_path=None):
        config.validate()
        if not sequences:
            raise ValueError("empty training set")
        full_res = min(sequences[0].config.height, sequences[0].config.width)
        for p in config.phases:
            if p.resolution > full_res:
                raise ValueError(
                    f"phase resolution {p.resolution} exceeds dataset resolution {full_res}"
                )
            if any(p.clip_frames > s.num_frames for s in sequences):
                raise ValueError("phase clip length exceeds a sequence length")

        self.sequences = sequences
        self.config = config
        self.gen_config = effective_generator_config(config)
        self.full_res = config.phases[-1].resolution
        self.log_path = log_path
        self.log = []

        torch.manual_seed(config.seed)
        self.data_rng = np.random.default_rng(config.seed + 1)
        self.perceptual = PerceptualFeatures()
        self.feature_model = None

        self.phase_index = 0
        self.step_index = 0
        self.step_in_phase = 0
        self.model = None
        self.d_image = None
        self.d_video = None
        self._enter_phase(0)

    # -- structure ----------------------------------------------------------

    def _scales_for_phase(self, phase_index):
        res = self.config.phases[phase_index].resolution
        halvings = int(round(math.log2(self.full_res / res)))
        scales = self.gen_config.scales - halvings
        if scales < 1:
            raise ValueError(
                f"phase resolution {res} needs more halvings than the "
                f"generator has scales"
            )
        return scales

    def _enter_phase(self, phase_index):
        """Build or grow networks for a phase and prepare its data."""
        phase = self.config.phases[phase_index]
        scales = self._scales_for_phase(phase_index)
        self.phase_index = phase_index
        self.step_in_phase = 0

        spatial_change = False
        if self.model is None:
            self.model = VideoSynthesizer(replace(self.gen_config, scales=scales))
            spatial_change = True
        elif scales > self.model.config.scales:
            while self.model.config.scales < scales:
                self.model = VideoSynthesizer.stacked(self.model)
            spatial_change = True

        if spatial_change:
            self.d_image = ImageDiscriminator(self.config.discriminator)
            if self.config.ablation != "no_video_disc":
                self.d_video = VideoDiscriminator(self.config.discriminator)
            self.opt_g = torch.optim.Adam(
                self.model.parameters(), lr=self.config.lr, betas=self.config.betas
            )
            self.opt_di = torch.optim.Adam(
                self.d_image.parameters(), lr=self.config.lr, betas=self.config.betas
            )
            self.opt_dv = (
                torch.optim.Adam(
                    self.d_video.parameters(), lr=self.config.lr, betas=self.config.betas
                )
                if self.d_video is not None
                else None
            )

        base_res = self.sequences[0].config.height
        data_factor = phase.resolution / base_res
        self.phase_data = [_phase_tensors(s, data_factor) for s in self.sequences]
        self.phase_clip = phase.clip_frames

    def _phase_steps(self, phase_index):
        phase = self.config.phases[phase_index]
        if phase.steps > 0:
            return phase.steps
        steps_per_epoch = math.ceil(len(self.sequences) / self.config.batch_size)
        return steps_per_epoch * phase.epochs

    # -- batching -----------------------------------------------------------

    def _sample_batch(self):
        b = self.config.batch_size
        clip = self.phase_clip
        idx = self.data_rng.integers(0, len(self.phase_data), size=b)
        frames, labels, instances, flows, bg = [], [], [], [], []
        for i in idx:
            d = self.phase_data[int(i)]
            t_total = d["frames"].shape[0]
            start = int(self.data_rng.integers(0, t_total - clip + 1))
            frames.append(d["frames"][start : start + clip])
            labels.append(d["labels"][start : start + clip])
            instances.append(d["instances"][start : start + clip])
            flows.append(d["flows"][start : start + clip - 1])
            bg.append(d["bg"][start : start + clip])
        return {
            "frames": torch.stack(frames),
            "labels": torch.stack(labels),
            "instances": torch.stack(instances),
            "flows": torch.stack(flows),
            "bg": torch.stack(bg),
        }

    def _source_features(self, batch):
        """One-hot labels plus pooled encoder features when multimodal."""
        oh = one_hot_labels(batch["labels"], self.gen_config.num_classes)
        if not self.gen_config.multimodal_enabled:
            return oh
        b, t = batch["frames"].shape[:2]
        flat_frames = batch["frames"].reshape(b * t, *batch["frames"].shape[2:])
        flat_inst = batch["instances"].reshape(b * t, *batch["instances"].shape[2:])
        z = instance_average_pool(self.model.encoder(flat_frames), flat_inst)
        z = z.reshape(b, t, *z.shape[1:])
        return torch.cat([oh, z], dim=2)

    # -- one optimization step ----------------------------------------------

    def _video_clip_batches(self, batch, fake_frames, gen_lo, t_total):
        """Sample one clip per sequence for every active temporal scale.

        Returns a list over temporal scales of either None (skipped) or
        (real_frames, fake_frames, flows) batched tensors. Fake frames
        stay connected to the generator graph; callers detach for the
        discriminator side.
        """
        if self.d_video is None:
            return []
        cfg = self.config.discriminator
        k = cfg.clip_length
        b = batch["frames"].shape[0]
        out = []
        for scale in range(1, cfg.temporal_scales + 1):
            stride = cfg.temporal_stride(scale)
            span = cfg.span(scale)
            if span > t_total - gen_lo:
                out.append(None)
                continue
            reals, fakes, flows = [], [], []
            for i in range(b):
                start = int(self.data_rng.integers(gen_lo, t_total - span + 1))
                idx = [start + stride * j for j in range(k)]
                reals.append(batch["frames"][i, idx])
                fakes.append(fake_frames[i, idx])
                gap_flows = []
                for j in range(k - 1):
                    a = start + stride * j
                    chain = [batch["flows"][i, c] for c in range(a, a + stride)]
                    gap_flows.append(
                        chain[0] if stride == 1 else compose_flow_chain(chain)
                    )
                flows.append(torch.stack(gap_flows))
            out.append((torch.stack(reals), torch.stack(fakes), torch.stack(flows)))
        return out

    def train_step(self, batch):
        cfg = self.config
        L = self.gen_config.window
        b, t_total = batch["frames"].shape[:2]
        feats = self._source_features(batch)
        bg = batch["bg"] if self.gen_config.fg_bg_enabled else None

        try:
            rollout = self.model.rollout(
                feats, warmup_frames=batch["frames"][:, :L], bg_masks=bg
            )
        except NumericalError as e:
            raise NumericalError(
                str(e), component="rollout", step=self.step_index
            ) from e
        fake_frames = rollout.frames
        gen_lo = L

        # sampling indices (fixed draw order keeps runs reproducible)
        img_idx = self.data_rng.integers(gen_lo, t_total, size=b)
        clip_batches = self._video_clip_batches(batch, fake_frames, gen_lo, t_total)

        rows = torch.arange(b)
        onehot = one_hot_labels(batch["labels"], self.gen_config.num_classes)
        real_imgs = batch["frames"][rows, img_idx]
        fake_imgs = fake_frames[rows, img_idx]
        img_sources = onehot[rows, img_idx]

        # discriminator update on detached generator outputs; generator
        # grads are cleared first so the partition audit sees only what
        # this backward produces
        self.opt_g.zero_grad(set_to_none=True)
        self.opt_di.zero_grad(set_to_none=True)
        if self.opt_dv is not None:
            self.opt_dv.zero_grad(set_to_none=True)
        scores_real_i, _ = self.d_image(real_imgs, img_sources)
        scores_fake_i, _ = self.d_image(fake_imgs.detach(), img_sources)
        d_loss_i = gan_loss_image(
            scores_real_i, scores_fake_i, "discriminator", cfg.weights.gan_mode
        )
        d_loss_v = None
        if self.d_video is not None:
            real_scores, fake_scores = [], []
            for scale, entry in enumerate(clip_batches, start=1):
                if entry is None:
                    real_scores.append(None)
                    fake_scores.append(None)
                    continue
                creal, cfake, cflows = entry
                real_scores.append(self.d_video.forward_scale(scale, creal, cflows)[0])
                fake_scores.append(
                    self.d_video.forward_scale(scale, cfake.detach(), cflows)[0]
                )
            d_loss_v = gan_loss_video(
                real_scores, fake_scores, "discriminator", cfg.weights.gan_mode
            )
        d_total = d_loss_i if d_loss_v is None else d_loss_i + d_loss_v
        if not torch.isfinite(d_total):
            raise NumericalError(
                "non-finite loss", component="discriminator", step=self.step_index
            )
        d_total.backward()
        if cfg.debug_audit:
            leaked = [
                n
                for n, p in self.model.named_parameters()
                if p.grad is not None and p.grad.abs().sum() > 0
            ]
            if leaked:
                raise AssertionError(
                    f"discriminator update leaked gradients into generator: {leaked[:3]}"
                )
        self.opt_di.step()
        if self.opt_dv is not None:
            self.opt_dv.step()

        # generator update through the full rollout and the updated critics
        self.opt_g.zero_grad(set_to_none=True)
        scores_fake_g, feats_fake_i = self.d_image(fake_imgs, img_sources)
        with torch.no_grad():
            _, feats_real_i = self.d_image(real_imgs, img_sources)
        components = {
            "gan_image": gan_loss_image(None, scores_fake_g, "generator", cfg.weights.gan_mode)
        }
        fm_disc = feature_matching_loss(
            [f for tower in feats_real_i for f in tower],
            [f for tower in feats_fake_i for f in tower],
        )
        if self.d_video is not None:
            fake_scores_g = []
            fm_video_terms = []
            for scale, entry in enumerate(clip_batches, start=1):
                if entry is None:
                    fake_scores_g.append(None)
                    continue
                creal, cfake, cflows = entry
                scores, feats_fake_v = self.d_video.forward_scale(scale, cfake, cflows)
                fake_scores_g.append(scores)
                with torch.no_grad():
                    _, feats_real_v = self.d_video.forward_scale(scale, creal, cflows)
                fm_video_terms.append(
                    feature_matching_loss(
                        [f for tower in feats_real_v for f in tower],
                        [f for tower in feats_fake_v for f in tower],
                    )
                )
            components["gan_video"] = gan_loss_video(
                None, fake_scores_g, "generator", cfg.weights.gan_mode
            )
            fm_disc = fm_disc + torch.stack(fm_video_terms).mean()
        components["fm_disc"] = fm_disc

        real_pf = self.perceptual(real_imgs)
        fake_pf = self.perceptual(fake_imgs)
        components["fm_percep"] = feature_matching_loss(real_pf, fake_pf)

        if self.gen_config.warp_enabled:
            pred_flows = rollout.flows[gen_lo - 1 :]
            gt_flows = [batch["flows"][:, t] for t in range(gen_lo - 1, t_total - 1)]
            components["flow"] = flow_loss(
                pred_flows, gt_flows, batch["frames"][:, gen_lo - 1 :]
            )

        try:
            g_total = total_generator_objective(components, cfg.weights)
        except NumericalError as e:
            raise NumericalError(
                "non-finite loss", component=e.component, step=self.step_index
            ) from e
        g_total.backward()
        if cfg.debug_audit:
            got_grad = any(
                p.grad is not None and p.grad.abs().sum() > 0
                for p in self.model.parameters()
            )
            if not got_grad:
                raise AssertionError("generator update produced no gradients")
        self.opt_g.step()

        record = {
            "step": self.step_index,
            "phase": self.phase_index,
            "d_image": float(d_loss_i.detach()),
            "g_total": float(g_total.detach()),
            "skipped_video_scales": [
                s + 1 for s, entry in enumerate(clip_batches) if entry is None
            ],
        }
        if d_loss_v is not None:
            record["d_video"] = float(d_loss_v.detach())
        for name, value in components.items():
            record[name] = float(value.detach())
        return record

    # -- schedule -----------------------------------------------------------

    def run(self, max_steps=None):
        """Execute the remaining schedule; returns the step log."""
        t0 = time.time()
        done = 0
        for phase_index in range(self.phase_index, len(self.config.phases)):
            if phase_index != self.phase_index:
                self._enter_phase(phase_index)
            target = self._phase_steps(phase_index)
            while self.step_in_phase < target:
                record = self.train_step(self._sample_batch())
                record["wall"] = round(time.time() - t0, 3)
                self.log.append(record)
                if self.log_path is not None:
                    with open(self.log_path, "a") as f:
                        f.write(json.dumps(record) + "\n")
                self.step_index += 1
                self.step_in_phase += 1
                done += 1
                if max_steps is not None and done >= max_steps:
                    return self.log
        if self.gen_config.multimodal_enabled and self.feature_model is None:
            self.fit_feature_model()
        return self.log

    # -- multimodal feature model --------------------------------------------

    def fit_feature_model(self, frame_stride=4):
        """Fit per-class appearance mixtures on pooled training features."""
        vectors, classes = [], []
        with torch.no_grad():
            for d in self.phase_data:
                t_total = d["frames"].shape[0]
                for t in range(0, t_total, frame_stride):
                    z = instance_average_pool(
                        self.model.encoder(d["frames"][t : t + 1]),
                        d["instances"][t : t + 1],
                    )[0]
                    inst = d["instances"][t]
                    lab = d["labels"][t]
                    for i in torch.unique(inst):
                        pix = inst == i
                        vectors.append(z[:, pix][:, 0].numpy())
                        classes.append(int(lab[pix][0]))
        self.feature_model = InstanceFeatureModel.fit(
            np.array(vectors),
            np.array(classes),
            n_components=self.config.gmm_components,
            seed=self.config.seed,
        )
        return self.feature_model

    # -- checkpointing --------------------------------------------------------

    def checkpoint_state(self):
        state = {
            "config": config_to_dict(self.config),
            "phase_index": self.phase_index,
            "step_index": self.step_index,
            "step_in_phase": self.step_in_phase,
            "model": self.model.state_dict(),
            "model_scales": self.model.config.scales,
            "d_image": self.d_image.state_dict(),
            "d_video": self.d_video.state_dict() if self.d_video is not None else None,
            "opt_g": self.opt_g.state_dict(),
            "opt_di": self.opt_di.state_dict(),
            "opt_dv": self.opt_dv.state_dict() if self.opt_dv is not None else None,
            "torch_rng": torch.get_rng_state(),
            "data_rng": self.data_rng.bit_generator.state,
            "feature_model": (
                self.feature_model.to_dict() if self.feature_model is not None else None
            ),
        }
        return state

    def save(self, path):
        save_checkpoint(self.checkpoint_state(), path)

    @classmethod
    def from_checkpoint(cls, path, sequences, log_path=None):
        state = load_checkpoint(path)
        config = config_from_dict(state["config"])
        trainer = cls(sequences, config, log_path=log_path)
        for p in range(1, state["phase_index"] + 1):
            trainer._enter_phase(p)
        trainer.model.load_state_dict(state["model"])
        trainer.d_image.load_state_dict(state["d_image"])
        if state["d_video"] is not None:
            trainer.d_video.load_state_dict(state["d_video"])
        trainer.opt_g.load_state_dict(state["opt_g"])
        trainer.opt_di.load_state_dict(state["opt_di"])
        if state["opt_dv"] is not None:
            trainer.opt_dv.load_state_dict(state["opt_dv"])
        trainer.phase_index = state["phase_index"]
        trainer.step_index = state["step_index"]
        trainer.step_in_phase = state["step_in_phase"]
        torch.set_rng_state(state["torch_rng"].to(torch.uint8))
        trainer.data_rng.bit_generator.state = state["data_rng"]
        if state["feature_model"] is not None:
            trainer.feature_model = InstanceFeatureModel.from_dict(state["feature_model"])
        return trainer


def generator_from_checkpoint(path):
    """Load just the trained generator (plus feature model) for inference."""
    state = load_checkpoint(path)
    config = config_from_dict(state["config"])
    gen_config = replace(
        effective_generator_config(config), scales=state["model_scales"]
    )
    model = VideoSynthesizer(gen_config)
    model.load_state_dict(state["model"])
    model.eval()
    feature_model = None
    if state.get("feature_model") is not None:
        feature_model = InstanceFeatureModel.from_dict(state["feature_model"])
    return model, feature_model, config
