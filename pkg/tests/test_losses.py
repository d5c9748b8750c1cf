import numpy as np
import pytest
import torch

from flowvid.errors import NumericalError
from flowvid.losses import (
    LossWeights,
    PerceptualFeatures,
    feature_matching_loss,
    flow_loss,
    gan_loss_image,
    gan_loss_video,
    total_generator_objective,
)
from flowvid.scene import SceneConfig, ShapeSpec, render_sequence
from flowvid.warp import warp


def maps(value, shapes=((1, 1, 6, 6), (1, 1, 3, 3))):
    return [torch.full(s, float(value)) for s in shapes]


def test_lsgan_discriminator_loss_zero_at_targets():
    loss = gan_loss_image(maps(1.0), maps(0.0), "discriminator")
    assert loss.item() == 0.0


def test_lsgan_generator_loss_zero_when_fake_scores_one():
    loss = gan_loss_image(None, maps(1.0), "generator")
    assert loss.item() == 0.0


def test_lsgan_discriminator_loss_midpoint_value():
    loss = gan_loss_image(maps(0.5), maps(0.5), "discriminator")
    assert abs(loss.item() - 0.5) < 1e-7


def test_generator_loss_on_zero_scores_is_one():
    loss = gan_loss_image(None, maps(0.0), "generator")
    assert abs(loss.item() - 1.0) < 1e-7


def test_video_loss_single_scale_equals_image_kernel():
    real = [maps(0.7)]
    fake = [maps(0.2)]
    v = gan_loss_video(real, fake, "discriminator")
    i = gan_loss_image(real[0], fake[0], "discriminator")
    assert torch.allclose(v, i)


def test_video_loss_averages_over_temporal_scales():
    fakes = [maps(0.0), maps(0.5), maps(1.0)]  # losses 1.0, 0.25, 0.0
    v = gan_loss_video(None, fakes, "generator")
    assert abs(v.item() - (1.0 + 0.25 + 0.0) / 3) < 1e-7


def test_video_loss_skips_inactive_scales():
    fakes = [maps(0.0), None, maps(1.0)]
    v = gan_loss_video(None, fakes, "generator")
    assert abs(v.item() - 0.5) < 1e-7


def test_log_mode_discriminator_loss_positive():
    loss = gan_loss_image(maps(2.0), maps(-2.0), "discriminator", mode="log")
    assert loss.item() > 0


def test_flow_loss_zero_on_static_scene():
    frames = torch.zeros(1, 4, 3, 8, 8)
    zeros = [torch.zeros(1, 2, 8, 8)] * 3
    assert flow_loss(zeros, zeros, frames).item() == 0.0


def test_flow_loss_on_ground_truth_flow_is_interpolation_only():
    shp = ShapeSpec("rectangle", (20.0, 30.0), (12.0, 10.0), (0.5, -0.5, 0.2), (3, 0))
    cfg = SceneConfig(seed=1, num_frames=5, shapes=(shp,), num_shapes=1)
    seq = render_sequence(cfg)
    frames = torch.from_numpy(seq.frames).unsqueeze(0)
    flows = [torch.from_numpy(f).unsqueeze(0) for f in seq.flows]
    loss = flow_loss(flows, flows, frames)
    # endpoint term is exactly zero; the rest is the warp residual
    warp_terms = []
    for t in range(4):
        res = (warp(frames[:, t], flows[t]) - frames[:, t + 1]).abs()
        warp_terms.append(res.mean())
        masked = res[0][:, seq.valid[t]]
        assert masked.mean().item() < 1e-3  # validity-true pixels: interpolation only
    assert abs(loss.item() - torch.stack(warp_terms).mean().item()) < 1e-7


def test_flow_loss_unit_offset_on_constant_static_frames():
    frames = torch.full((1, 3, 3, 8, 8), 0.25)
    gt = [torch.zeros(1, 2, 8, 8)] * 2
    pred = []
    for _ in range(2):
        p = torch.zeros(1, 2, 8, 8)
        p[:, 0] = 1.0
        pred.append(p)
    loss = flow_loss(pred, gt, frames)
    assert abs(loss.item() - 0.5) < 1e-7  # endpoint |(1,0)| mean = 0.5, warp term 0


def test_flow_loss_length_mismatch_rejected():
    frames = torch.zeros(1, 4, 3, 8, 8)
    with pytest.raises(ValueError):
        flow_loss([torch.zeros(1, 2, 8, 8)] * 2, [torch.zeros(1, 2, 8, 8)] * 3, frames)


def test_feature_matching_identical_is_zero():
    feats = [torch.randn(1, 4, 4, 4), torch.randn(1, 8, 2, 2)]
    assert feature_matching_loss(feats, feats).item() == 0.0


def test_feature_matching_constant_offset():
    a = [torch.zeros(1, 1, 2, 2)]
    b = [torch.full((1, 1, 2, 2), 0.1)]
    assert abs(feature_matching_loss(a, b).item() - 0.1) < 1e-7


def test_feature_matching_layer_normalization():
    a = [torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 4, 4)]
    b = [torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 4, 4)]
    b[0][0, 0, 0, 0] = 1.0  # total abs diff 1 over P=4
    b[1][0, 0, 0, 0] = 1.0  # total abs diff 1 over P=16
    got = feature_matching_loss(a, b).item()
    assert abs(got - (1 / 4 + 1 / 16)) < 1e-7


def test_feature_matching_layer_count_mismatch_rejected():
    with pytest.raises(ValueError):
        feature_matching_loss([torch.zeros(1, 1, 2, 2)], [])


def test_total_objective_direct_evaluations():
    w = LossWeights()
    zero = torch.tensor(0.0)
    assert total_generator_objective({"gan_image": zero, "flow": zero}, w).item() == 0.0
    only_flow = total_generator_objective({"flow": torch.tensor(1.0)}, w)
    assert abs(only_flow.item() - 10.0) < 1e-7
    comps = {
        "gan_image": torch.tensor(0.5),
        "gan_video": torch.tensor(0.5),
        "flow": torch.tensor(0.1),
        "fm_disc": torch.tensor(0.02),
        "fm_percep": torch.tensor(0.03),
    }
    assert abs(total_generator_objective(comps, w).item() - 2.5) < 1e-6


def test_total_objective_flow_weight_scales_linearly():
    comps = {"flow": torch.tensor(0.7)}
    base = total_generator_objective(comps, LossWeights(flow=10.0)).item()
    tripled = total_generator_objective(comps, LossWeights(flow=30.0)).item()
    assert abs(tripled - 3 * base) < 1e-9


def test_total_objective_names_nan_component():
    comps = {"gan_image": torch.tensor(0.1), "fm_disc": torch.tensor(float("nan"))}
    with pytest.raises(NumericalError, match="fm_disc"):
        total_generator_objective(comps, LossWeights())


def test_losses_nonnegative_in_least_squares_mode():
    rng = np.random.default_rng(0)
    for _ in range(10):
        real = [torch.from_numpy(rng.normal(size=(1, 1, 4, 4)))]
        fake = [torch.from_numpy(rng.normal(size=(1, 1, 4, 4)))]
        assert gan_loss_image(real, fake, "discriminator").item() >= 0
        assert gan_loss_image(None, fake, "generator").item() >= 0


def test_perceptual_features_are_frozen_and_seed_fixed():
    a = PerceptualFeatures(seed=97)
    b = PerceptualFeatures(seed=97)
    x = torch.randn(1, 3, 32, 32)
    fa, fb = a(x), b(x)
    assert len(fa) == 3
    for u, v in zip(fa, fb):
        assert torch.equal(u, v)
    assert all(not p.requires_grad for p in a.parameters())
    c = PerceptualFeatures(seed=98)
    assert not torch.equal(a(x)[0], c(x)[0])


def test_invalid_weights_and_modes_rejected():
    with pytest.raises(ValueError):
        LossWeights(flow=-1.0)
    with pytest.raises(ValueError):
        LossWeights(gan_mode="wasserstein")
    with pytest.raises(ValueError):
        gan_loss_image(maps(1.0), maps(0.0), "referee")
