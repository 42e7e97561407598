import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoreid.nets import (
    Backbone,
    BackboneConfig,
    BNNeck,
    ConfigError,
    GeM,
    gem_pool,
    mgf_fuse,
    mgf_hidden,
    part_reduce,
    partition_parts,
    stripe_heights,
)

torch.set_default_dtype(torch.float32)


def _map(values):
    return torch.tensor(values, dtype=torch.float64)[None, None]


def test_gem_n1_is_mean():
    assert gem_pool(_map([[1.0, 3.0], [5.0, 7.0]]), 1.0).item() == pytest.approx(4.0, abs=1e-12)


@pytest.mark.parametrize("n", [1.0, 2.0, 3.0, 10.0, 50.0])
def test_gem_constant_map(n):
    out = gem_pool(torch.full((1, 2, 3, 4), 2.5, dtype=torch.float64), n)
    np.testing.assert_allclose(out.numpy(), 2.5, rtol=1e-12)


def test_gem_high_exponent_against_mpmath():
    mpmath.mp.dps = 50
    vals = [1, 3, 5, 7]
    ref = (sum(mpmath.mpf(v) ** 100 for v in vals) / 4) ** (mpmath.mpf(1) / 100)
    got = gem_pool(_map([[1.0, 3.0], [5.0, 7.0]]), 100.0).item()
    assert got == pytest.approx(float(ref), rel=1e-12)
    assert got > 6.9


def test_gem_module_exponent_starts_at_three_and_stays_above_one():
    g = GeM()
    assert g.n.item() == pytest.approx(3.0, abs=1e-6)
    with torch.no_grad():
        g.raw.fill_(-50.0)
    assert g.n.item() >= 1.0


@settings(max_examples=60, deadline=None)
@given(
    a=arrays(np.float64, (3, 4, 5), elements=st.floats(0.0, 10.0)),
    n=st.floats(1.0, 20.0),
)
def test_gem_power_mean_sandwich(a, n):
    x = torch.from_numpy(a)[None]
    clamped = np.maximum(a, 1e-6)
    out = gem_pool(x, n)[0].numpy()
    lo = clamped.mean(axis=(1, 2))
    hi = clamped.max(axis=(1, 2))
    assert np.all(out >= lo * (1 - 1e-9))
    assert np.all(out <= hi * (1 + 1e-9))


@settings(max_examples=40, deadline=None)
@given(a=arrays(np.float64, (2, 3, 3), elements=st.floats(0.01, 5.0)))
def test_gem_monotone_in_exponent(a):
    x = torch.from_numpy(a)[None]
    grid = [1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 13.0]
    outs = np.stack([gem_pool(x, n)[0].numpy() for n in grid])
    assert np.all(np.diff(outs, axis=0) >= -1e-9 * outs[1:])


@pytest.mark.parametrize(
    "cfg,hw",
    [
        (BackboneConfig(widths=(8, 8, 8, 8), stage_strides=(2, 2, 4), final_stage_stride=1, input_size=(384, 192)), (24, 12)),
        (BackboneConfig(widths=(8, 8, 8, 8), stage_strides=(2, 2, 2), final_stage_stride=1, input_size=(64, 32)), (8, 4)),
        (BackboneConfig(widths=(8, 8, 8, 8), stage_strides=(2, 2, 2), final_stage_stride=2, input_size=(64, 32)), (4, 2)),
    ],
)
def test_backbone_output_size(cfg, hw):
    h0, w0 = cfg.input_size
    total = np.prod(cfg.strides)
    assert hw == (h0 // total, w0 // total)
    assert cfg.output_hw() == hw
    net = Backbone(cfg).eval()
    with torch.no_grad():
        out = net(torch.rand(1, 3, h0, w0))
    assert tuple(out.shape) == (1, cfg.out_dim, *hw)
    assert bool((out >= 0).all())


def test_final_stride_one_doubles_resolution():
    a = BackboneConfig(final_stage_stride=1).output_hw()
    b = BackboneConfig(final_stage_stride=2).output_hw()
    assert a == (2 * b[0], 2 * b[1])


def test_backbone_zero_images_finite_and_shape_checked():
    net = Backbone(BackboneConfig(widths=(4, 4, 4, 8))).eval()
    with torch.no_grad():
        out = net(torch.zeros(2, 3, 64, 32))
    assert torch.isfinite(out).all()
    with pytest.raises(ValueError, match="expected images"):
        net(torch.zeros(2, 3, 32, 32))


def test_bnneck_identity_with_init_stats():
    neck = BNNeck(5).eval()
    x = torch.randn(7, 5)
    np.testing.assert_allclose(neck(x).detach().numpy(), x.numpy(), rtol=1e-5, atol=1e-6)


def test_bnneck_constant_batch_gives_zero():
    neck = BNNeck(4).train()
    out = neck(torch.full((6, 4), 3.0))
    # float32 rounding of the batch mean is amplified by 1/sqrt(1e-5)
    np.testing.assert_allclose(out.detach().numpy(), 0.0, atol=1e-4)


def test_bnneck_batch_statistics():
    neck = BNNeck(3).train()
    with torch.no_grad():
        neck.weight.copy_(torch.tensor([0.5, 1.0, 2.0]))
    x = torch.randn(256, 3, dtype=torch.float32) * 4 + 1
    out = neck(x).detach().double().numpy()
    np.testing.assert_allclose(out.mean(0), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(0), np.array([0.25, 1.0, 4.0]), rtol=1e-3)
    # running statistics moved only in train mode
    rm = neck.running_mean.clone()
    neck.eval()
    neck(x)
    assert torch.equal(rm, neck.running_mean)
    assert torch.equal(neck.bias, torch.zeros(3))


@pytest.mark.parametrize("h,p,expected", [(24, 8, [3] * 8), (7, 3, [3, 2, 2]), (5, 1, [5])])
def test_stripe_heights(h, p, expected):
    assert stripe_heights(h, p) == expected


def test_partition_errors_when_too_many_parts():
    with pytest.raises(ConfigError):
        partition_parts(torch.zeros(1, 2, 3, 2), 4)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 30), data=st.data())
def test_partition_reconstructs(h, data):
    p = data.draw(st.integers(1, h))
    fmap = torch.randn(2, 3, h, 4)
    stripes = partition_parts(fmap, p)
    heights = [s.shape[-2] for s in stripes]
    assert sum(heights) == h and max(heights) - min(heights) <= 1
    assert heights == sorted(heights, reverse=True)
    assert torch.equal(torch.cat(stripes, dim=-2), fmap)


def test_part_reduce_identity_and_zero():
    stripe = torch.rand(2, 6, 3, 4, dtype=torch.float64)
    eye = torch.eye(6, dtype=torch.float64)
    assert torch.allclose(part_reduce(stripe, 3.0, eye), gem_pool(stripe, 3.0))
    assert torch.equal(part_reduce(stripe, 3.0, torch.zeros(6, 2, dtype=torch.float64)), torch.zeros(2, 2, dtype=torch.float64))


def test_part_reduce_matches_manual_product():
    rng = np.random.default_rng(0)
    stripe = rng.random((1, 4, 2, 3))
    proj = rng.normal(size=(4, 5))
    pooled = np.power(np.mean(np.power(np.maximum(stripe, 1e-6), 2.5), axis=(2, 3)), 1 / 2.5)[0]
    manual = [sum(pooled[i] * proj[i, j] for i in range(4)) for j in range(5)]
    got = part_reduce(torch.from_numpy(stripe), 2.5, torch.from_numpy(proj))[0].numpy()
    np.testing.assert_allclose(got, manual, rtol=1e-12)


def test_mgf_zero_params_halves():
    f = torch.randn(3, 8, dtype=torch.float64)
    parts = [torch.randn(3, 4, dtype=torch.float64) for _ in range(2)]
    D = 8 + 2 * 4
    hidden = mgf_hidden(D, 4)
    assert (D, hidden) == (16, 4)
    z = lambda *s: torch.zeros(*s, dtype=torch.float64)
    f_bar, f_tilde = mgf_fuse(f, parts, z(D, hidden), z(hidden), z(hidden, D), z(D))
    assert f_tilde.shape == (3, 16)
    assert torch.allclose(f_tilde, 0.5 * f_bar)


def test_mgf_shape_mismatch():
    with pytest.raises(ValueError):
        mgf_fuse(torch.zeros(1, 8), [torch.zeros(1, 4)], torch.zeros(16, 4), torch.zeros(4), torch.zeros(4, 16), torch.zeros(16))


@pytest.mark.parametrize("seed", range(10))
def test_mgf_gate_strictly_shrinks(seed):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    f, parts = r(4, 8), [r(4, 4), r(4, 4)]
    w1, b1, w2, b2 = r(16, 4), r(4), r(4, 16), r(16)
    f_bar, f_tilde = mgf_fuse(f, parts, w1, b1, w2, b2)
    # recompute the gate with numpy
    fb = f_bar.numpy()
    gate = 1 / (1 + np.exp(-(np.maximum(fb @ w1.numpy() + b1.numpy(), 0) @ w2.numpy() + b2.numpy())))
    assert np.all((gate > 0) & (gate < 1))
    np.testing.assert_allclose(f_tilde.numpy(), gate * fb, rtol=1e-12)
    nz = fb != 0
    assert np.all(np.abs(f_tilde.numpy()[nz]) < np.abs(fb[nz]))


def test_concurrent_inference_matches_sequential():
    from concurrent.futures import ThreadPoolExecutor

    net = Backbone(BackboneConfig(widths=(4, 4, 8, 8))).eval()
    xs = [torch.rand(2, 3, 64, 32, generator=torch.Generator().manual_seed(i)) for i in range(4)]
    with torch.no_grad():
        seq = [net(x) for x in xs]
        with ThreadPoolExecutor(2) as ex:
            par = list(ex.map(net, xs))
    for a, b in zip(seq, par):
        assert torch.equal(a, b)
