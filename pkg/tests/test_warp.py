import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowvid.warp import compose, compose_flow_chain, compose_fg_bg, rescale_flow, warp


def bilinear_oracle(img, flow):
    """Scalar nested-loop bilinear sampler with border clamping."""
    C, H, W = img.shape
    out = np.zeros_like(img)
    for y in range(H):
        for x in range(W):
            sx = min(max(x + flow[0, y, x], 0.0), W - 1.0)
            sy = min(max(y + flow[1, y, x], 0.0), H - 1.0)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
            fx, fy = sx - x0, sy - y0
            for c in range(C):
                out[c, y, x] = (
                    img[c, y0, x0] * (1 - fx) * (1 - fy)
                    + img[c, y0, x1] * fx * (1 - fy)
                    + img[c, y1, x0] * (1 - fx) * fy
                    + img[c, y1, x1] * fx * fy
                )
    return out


def test_zero_flow_is_identity():
    img = torch.rand(3, 8, 8) * 2 - 1
    flow = torch.zeros(2, 8, 8)
    assert torch.equal(warp(img, flow), img)


def test_integer_shift_recovers_unshifted_image():
    rng = np.random.default_rng(0)
    base = rng.uniform(-1, 1, size=(1, 6, 9)).astype(np.float32)
    W = base.shape[2]
    # Copy of `base` with the sampling window moved right by 3, right
    # border replicated: shifted[x] = base[min(x + 3, W - 1)].
    idx = np.minimum(np.arange(W) + 3, W - 1)
    shifted = base[:, :, idx]
    flow = np.zeros((2, 6, W), dtype=np.float32)
    flow[0] = -3.0
    out = warp(torch.from_numpy(shifted), torch.from_numpy(flow)).numpy()
    # Integer offsets make bilinear sampling exact away from the border.
    np.testing.assert_allclose(out[:, :, 3:], base[:, :, 3:], atol=1e-6)


def test_half_pixel_flow_matches_hand_blend():
    rng = np.random.default_rng(1)
    img = rng.uniform(-1, 1, size=(1, 5, 5)).astype(np.float64)
    flow = np.zeros((2, 5, 5), dtype=np.float64)
    flow[0] = 0.5
    out = warp(torch.from_numpy(img), torch.from_numpy(flow)).numpy()
    expected = np.empty_like(img)
    expected[:, :, :-1] = 0.5 * img[:, :, :-1] + 0.5 * img[:, :, 1:]
    expected[:, :, -1] = img[:, :, -1]  # clamped edge column
    np.testing.assert_allclose(out, expected, atol=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_warp_matches_nested_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(-1, 1, size=(2, 7, 6)).astype(np.float64)
    flow = rng.uniform(-3, 3, size=(2, 7, 6)).astype(np.float64)
    out = warp(torch.from_numpy(img), torch.from_numpy(flow)).numpy()
    np.testing.assert_allclose(out, bilinear_oracle(img, flow), atol=1e-6)


def test_warp_linearity():
    rng = np.random.default_rng(3)
    a = torch.from_numpy(rng.uniform(-1, 1, size=(3, 8, 8)))
    b = torch.from_numpy(rng.uniform(-1, 1, size=(3, 8, 8)))
    flow = torch.from_numpy(rng.uniform(-2, 2, size=(2, 8, 8)))
    lhs = warp(0.3 * a + 0.7 * b, flow)
    rhs = 0.3 * warp(a, flow) + 0.7 * warp(b, flow)
    assert (lhs - rhs).abs().max().item() < 1e-6


def test_warp_size_mismatch_raises():
    with pytest.raises(ValueError):
        warp(torch.zeros(3, 8, 8), torch.zeros(2, 4, 4))


def _fd_gradient(fn, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def test_warp_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    img = torch.tensor(rng.uniform(-1, 1, size=(1, 4, 4)), requires_grad=True)
    # fractional offsets well away from bilinear kinks at integers
    flow = torch.tensor(
        rng.integers(-1, 2, size=(2, 4, 4)) + rng.uniform(0.2, 0.8, size=(2, 4, 4)),
        requires_grad=True,
    )
    weights = torch.tensor(rng.uniform(-1, 1, size=(1, 4, 4)))

    def scalar():
        return (warp(img, flow) * weights).sum()

    loss = scalar()
    gi, gf = torch.autograd.grad(loss, [img, flow])
    with torch.no_grad():
        fd_i = _fd_gradient(scalar, img)
        fd_f = _fd_gradient(scalar, flow)
    for analytic, fd in [(gi, fd_i), (gf, fd_f)]:
        rel = (analytic - fd).norm() / fd.norm().clamp_min(1e-12)
        assert rel.item() < 1e-4


def test_compose_endpoints_and_midpoint():
    warped = torch.full((3, 4, 4), -1.0)
    hall = torch.full((3, 4, 4), 1.0)
    assert torch.equal(compose(warped, hall, torch.zeros(1, 4, 4)), warped)
    assert torch.equal(compose(warped, hall, torch.ones(1, 4, 4)), hall)
    mid = compose(warped, hall, torch.full((1, 4, 4), 0.5))
    assert torch.equal(mid, torch.zeros(3, 4, 4))


def test_compose_rejects_out_of_range_mask():
    with pytest.raises(ValueError):
        compose(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), torch.full((1, 2, 2), 1.5))
    with pytest.raises(ValueError):
        compose(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), torch.full((1, 2, 2), -0.1))


@settings(max_examples=30, deadline=None)
@given(
    lo=st.floats(min_value=-1.0, max_value=0.5),
    span=st.floats(min_value=0.0, max_value=1.0),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_compose_stays_in_range(lo, span, seed):
    rng = np.random.default_rng(seed)
    hi = lo + span
    w = torch.from_numpy(rng.uniform(lo, hi, size=(2, 5, 5)))
    h = torch.from_numpy(rng.uniform(lo, hi, size=(2, 5, 5)))
    m = torch.from_numpy(rng.uniform(0, 1, size=(1, 5, 5)))
    out = compose(w, h, m)
    assert out.min().item() >= lo - 1e-12
    assert out.max().item() <= hi + 1e-12


def test_fg_bg_composition_degenerates_to_plain_compose():
    rng = np.random.default_rng(7)
    w = torch.from_numpy(rng.uniform(-1, 1, size=(3, 6, 6)))
    h_fg = torch.from_numpy(rng.uniform(-1, 1, size=(3, 6, 6)))
    h_bg = torch.from_numpy(rng.uniform(-1, 1, size=(3, 6, 6)))
    m = torch.from_numpy(rng.uniform(0, 1, size=(1, 6, 6)))
    ones = torch.ones(1, 6, 6)
    zeros = torch.zeros(1, 6, 6)
    assert torch.equal(compose_fg_bg(w, h_fg, h_bg, m, ones), compose(w, h_bg, m))
    assert torch.equal(compose_fg_bg(w, h_fg, h_bg, m, zeros), compose(w, h_fg, m))
    assert torch.equal(compose_fg_bg(w, h_fg, h_bg, zeros, ones), w)


def test_fg_bg_rejects_soft_bg_mask():
    z = torch.zeros(1, 2, 2)
    with pytest.raises(ValueError):
        compose_fg_bg(z, z, z, z, torch.full((1, 2, 2), 0.5))


def test_rescale_flow_identity_and_constant():
    flow = torch.zeros(2, 4, 4)
    flow[0], flow[1] = 4.0, 2.0
    assert torch.equal(rescale_flow(flow, 1), flow)
    half = rescale_flow(flow, 0.5)
    assert half.shape == (2, 2, 2)
    assert torch.allclose(half[0], torch.full((2, 2), 2.0))
    assert torch.allclose(half[1], torch.full((2, 2), 1.0))


def test_rescale_flow_matches_average_pool_oracle():
    rng = np.random.default_rng(11)
    flow = rng.uniform(-4, 4, size=(2, 6, 8)).astype(np.float64)
    out = rescale_flow(torch.from_numpy(flow), 0.5).numpy()
    # oracle: 2x2 average pool, then halve the displacement values
    pooled = flow.reshape(2, 3, 2, 4, 2).mean(axis=(2, 4)) * 0.5
    np.testing.assert_allclose(out, pooled, atol=1e-6)


def test_rescale_flow_rejects_non_integer_dims():
    with pytest.raises(ValueError):
        rescale_flow(torch.zeros(2, 5, 5), 0.5)


def test_flow_chain_accumulates_pure_translation():
    flows = []
    for ux, vy in [(1.0, -2.0), (3.0, 0.5), (-1.5, 1.0)]:
        f = torch.zeros(2, 8, 8)
        f[0], f[1] = ux, vy
        flows.append(f)
    total = compose_flow_chain(flows)
    assert torch.allclose(total[0], torch.full((8, 8), 2.5), atol=1e-5)
    assert torch.allclose(total[1], torch.full((8, 8), -0.5), atol=1e-5)
