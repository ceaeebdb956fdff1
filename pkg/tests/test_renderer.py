"""Volume rendering: density law, stratified sampling, compositing."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from uwsdf.assets import PipelineConfig
from uwsdf.errors import MissError, ShapeError, ValidationError
from uwsdf.field import (
    LambertianAppearance,
    PositionalEncoding,
    RadianceNetwork,
    SdfNetwork,
    SphereField,
)
from uwsdf.geometry import Ray
from uwsdf.renderer import (
    RaySamples,
    composite,
    density_from_sdf,
    render_image,
    render_ray,
    render_rays,
    sample_ray,
    sample_rays,
)


class _ConstantRng:
    """Stand-in rng returning a constant; only .random(shape) is used."""

    def __init__(self, value: float):
        self.value = value

    def random(self, shape=None):
        return np.full(shape if shape is not None else (), self.value)


# ---------------------------------------------------------------------------
# density law
# ---------------------------------------------------------------------------

def test_density_hand_values():
    assert density_from_sdf(0.0, 0.1) == 0.5 / 0.1
    expected_inside = (1.0 - 0.5 * math.exp(-1.0)) / 0.1
    assert abs(density_from_sdf(-0.1, 0.1) - expected_inside) < 1e-12
    expected_outside = 0.5 * math.exp(-1.0) / 0.1
    assert abs(density_from_sdf(0.1, 0.1) - expected_outside) < 1e-12


def test_density_branches_agree_at_zero():
    for beta in (1e-3, 0.05, 1.0, 7.5):
        inside = (1.0 - 0.5 * math.exp(0.0 / beta)) / beta
        outside = 0.5 * math.exp(-0.0 / beta) / beta
        assert abs(inside - outside) < 1e-12
        assert abs(density_from_sdf(0.0, beta) - 0.5 / beta) < 1e-12
        assert abs(density_from_sdf(1e-300, beta) - density_from_sdf(-1e-300, beta)) < 1e-12


def test_density_is_monotone_nonincreasing():
    s = np.sort(np.random.default_rng(0).uniform(-5, 5, size=10_000))
    sigma = density_from_sdf(s, 0.07)
    assert (np.diff(sigma) <= 0).all()


def test_density_limits():
    beta = 0.1
    assert abs(density_from_sdf(-50.0, beta) - 1.0 / beta) < 1e-12
    assert density_from_sdf(10.0, beta) < 1e-40
    assert density_from_sdf(10.0, beta) >= 0.0


def test_density_rejects_nonpositive_beta():
    with pytest.raises(ValidationError):
        density_from_sdf(0.0, 0.0)
    with pytest.raises(ValidationError):
        density_from_sdf(np.zeros(3), -0.1)


def test_density_torch_matches_numpy_and_extreme_grads_finite():
    s_np = np.linspace(-3, 3, 101)
    sigma_np = density_from_sdf(s_np, 0.05)
    s_t = torch.tensor(s_np, requires_grad=True)
    sigma_t = density_from_sdf(s_t, 0.05)
    np.testing.assert_allclose(sigma_t.detach().numpy(), sigma_np, atol=1e-12)
    # Overflow-prone inputs must keep both value and gradient finite.
    s_big = torch.tensor([-50.0, 50.0], requires_grad=True)
    out = density_from_sdf(s_big, 1e-3).sum()
    out.backward()
    assert torch.isfinite(s_big.grad).all()


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(1e-3, 10.0))
def test_density_monotonicity_property(s1, s2, beta):
    lo, hi = min(s1, s2), max(s1, s2)
    assert density_from_sdf(lo, beta) >= density_from_sdf(hi, beta) - 1e-12


# ---------------------------------------------------------------------------
# stratified sampling
# ---------------------------------------------------------------------------

def test_sample_ray_midpoints_with_constant_rng():
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, -1.0]))
    samples = sample_ray(ray, 1.0, 3.0, 4, _ConstantRng(0.5))
    width = 0.5
    np.testing.assert_allclose(samples.t, 1.0 + (np.arange(4) + 0.5) * width)
    np.testing.assert_allclose(samples.delta[:-1], width)
    np.testing.assert_allclose(samples.delta[-1], 3.0 - samples.t[-1])
    np.testing.assert_allclose(
        samples.points, ray.origin + samples.t[:, None] * ray.direction
    )


@pytest.mark.parametrize("seed", range(10))
def test_sample_ray_respects_bins(seed):
    ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
    m = 16
    samples = sample_ray(ray, 0.5, 2.5, m, np.random.default_rng(seed))
    width = 2.0 / m
    for k in range(m):
        assert 0.5 + k * width <= samples.t[k] <= 0.5 + (k + 1) * width
    assert (np.diff(samples.t) > 0).all()
    assert samples.delta.sum() == pytest.approx(2.5 - samples.t[0], abs=1e-12)


def test_sample_ray_bin_means_converge_to_centers():
    ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
    m, n = 8, 10_000
    rng = np.random.default_rng(123)
    acc = np.zeros(m)
    for _ in range(n):
        acc += sample_ray(ray, 1.0, 2.0, m, rng).t
    means = acc / n
    centers = 1.0 + (np.arange(m) + 0.5) / m
    assert np.abs(means - centers).max() < 0.01 * 1.0  # 1% of the span


def test_sample_ray_rejects_bad_arguments():
    ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]))
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        sample_ray(ray, 2.0, 1.0, 8, rng)
    with pytest.raises(ValidationError):
        sample_ray(ray, 1.0, 1.0, 8, rng)
    with pytest.raises(ValidationError):
        sample_ray(ray, 1.0, 2.0, 1, rng)


def test_ray_samples_validation():
    good_t = np.array([1.0, 2.0])
    pts = np.zeros((2, 3))
    with pytest.raises(ValidationError):
        RaySamples(np.array([2.0, 1.0]), np.ones(2), pts)
    with pytest.raises(ValidationError):
        RaySamples(good_t, np.array([1.0, 0.0]), pts)
    with pytest.raises(ValidationError):
        RaySamples(np.array([1.0]), np.ones(1), np.zeros((1, 3)))


def test_sample_rays_matches_scalar_sampler_per_ray():
    origins = np.zeros((3, 3))
    dirs = np.eye(3)
    t_near = np.array([0.5, 1.0, 0.25])
    t_far = np.array([1.5, 3.0, 2.0])
    batched = sample_rays(origins, dirs, t_near, t_far, 8, np.random.default_rng(7))
    rng = np.random.default_rng(7)
    for i in range(3):
        single = sample_ray(Ray(origins[i], dirs[i]), t_near[i], t_far[i], 8, rng)
        np.testing.assert_allclose(batched.t[i], single.t, atol=1e-15)
        np.testing.assert_allclose(batched.delta[i], single.delta, atol=1e-15)
        np.testing.assert_allclose(batched.points[i], single.points, atol=1e-15)


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def _two_sample(t0=1.0, t1=2.0):
    t = np.array([t0, t1])
    delta = np.array([t1 - t0, t1 - t0])
    pts = np.zeros((2, 3))
    return RaySamples(t, delta, pts)


def test_composite_vacuum_is_empty():
    samples = _two_sample()
    out = composite(samples, np.zeros(2), np.ones((2, 3)), np.ones((2, 3)))
    np.testing.assert_array_equal(out.color, 0.0)
    assert out.depth == 0.0
    assert out.opacity == 0.0
    np.testing.assert_array_equal(out.weights, 0.0)


def test_composite_half_transparent_hand_case():
    # alpha = 1 - exp(-ln2) = 1/2 in both bins: weights (1/2, 1/4).
    samples = _two_sample(1.0, 2.0)
    sigma = np.array([math.log(2.0), math.log(2.0)])
    rgb = np.array([[1.0, 0.0, 0.2], [0.0, 1.0, 0.4]])
    normals = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = composite(samples, sigma, rgb, normals)
    np.testing.assert_allclose(out.weights, [0.5, 0.25], atol=1e-12)
    np.testing.assert_allclose(out.color, [0.5, 0.25, 0.2], atol=1e-12)
    assert abs(out.depth - 1.0) < 1e-12
    np.testing.assert_allclose(out.normal, [0.5, 0.25, 0.0], atol=1e-12)
    assert abs(out.opacity - 0.75) < 1e-12


def test_composite_loop_oracle_random_rays():
    rng = np.random.default_rng(11)
    for _ in range(20):
        m = int(rng.integers(2, 9))
        t = np.sort(rng.uniform(0.1, 3.0, size=m))
        t += np.arange(m) * 1e-3  # ensure strictly increasing
        delta = np.concatenate([np.diff(t), [0.1]])
        samples = RaySamples(t, delta, np.zeros((m, 3)))
        sigma = rng.uniform(0, 5, size=m)
        rgb = rng.random((m, 3))
        normals = rng.standard_normal((m, 3))
        out = composite(samples, sigma, rgb, normals)
        color, depth, normal, opacity, weights = oracles.composite_loop(
            t, delta, sigma, rgb, normals
        )
        np.testing.assert_allclose(out.color, color, atol=1e-12)
        np.testing.assert_allclose(out.depth, depth, atol=1e-12)
        np.testing.assert_allclose(out.normal, normal, atol=1e-12)
        np.testing.assert_allclose(out.opacity, opacity, atol=1e-12)
        np.testing.assert_allclose(out.weights, weights, atol=1e-12)


def test_composite_opaque_first_sample_wins():
    samples = _two_sample()
    out = composite(
        samples,
        np.array([1e12, 3.0]),
        np.array([[0.3, 0.6, 0.9], [1.0, 1.0, 1.0]]),
        np.zeros((2, 3)),
    )
    np.testing.assert_allclose(out.color, [0.3, 0.6, 0.9], atol=1e-12)
    assert abs(out.depth - 1.0) < 1e-12
    assert abs(out.opacity - 1.0) < 1e-12


def test_composite_rejects_bad_inputs():
    samples = _two_sample()
    with pytest.raises(ValidationError):
        composite(samples, np.array([-1.0, 0.0]), np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        composite(samples, np.zeros(3), np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        composite(
            samples,
            torch.tensor([-1.0, 0.0]),
            torch.zeros(2, 3),
            torch.zeros(2, 3),
        )


def test_composite_weights_bounded_over_many_rays():
    rng = np.random.default_rng(13)
    n, m = 100_000, 16
    t = np.sort(rng.uniform(0.1, 3.0, size=(n, m)), axis=-1)
    t += np.arange(m) * 1e-4
    delta = np.concatenate([np.diff(t, axis=-1), np.full((n, 1), 0.05)], axis=-1)
    samples = RaySamples(t, delta, np.zeros((n, m, 3)))
    sigma = rng.uniform(0, 50, size=(n, m))
    out = composite(samples, sigma, rng.random((n, m, 3)), rng.standard_normal((n, m, 3)))
    assert out.weights.min() >= 0.0
    assert out.weights.max() <= 1.0
    assert out.weights.sum(axis=-1).max() <= 1.0 + 1e-9
    np.testing.assert_allclose(out.opacity, out.weights.sum(axis=-1), atol=1e-12)


def test_composite_opacity_monotone_in_density():
    rng = np.random.default_rng(17)
    m = 8
    t = np.sort(rng.uniform(0.1, 2.0, size=m))
    t += np.arange(m) * 1e-3
    delta = np.concatenate([np.diff(t), [0.1]])
    samples = RaySamples(t, delta, np.zeros((m, 3)))
    sigma = rng.uniform(0, 3, size=m)
    rgb = rng.random((m, 3))
    normals = rng.standard_normal((m, 3))
    base = composite(samples, sigma, rgb, normals).opacity
    for i in range(m):
        bumped = sigma.copy()
        bumped[i] += rng.uniform(0.1, 2.0)
        assert composite(samples, bumped, rgb, normals).opacity >= base - 1e-12


def test_composite_torch_matches_numpy():
    rng = np.random.default_rng(19)
    m = 8
    t = np.sort(rng.uniform(0.1, 2.0, size=m)) + np.arange(m) * 1e-3
    delta = np.concatenate([np.diff(t), [0.1]])
    samples = RaySamples(t, delta, np.zeros((m, 3)))
    sigma = rng.uniform(0, 5, size=m)
    rgb = rng.random((m, 3))
    normals = rng.standard_normal((m, 3))
    np_out = composite(samples, sigma, rgb, normals)
    t_out = composite(
        samples, torch.tensor(sigma), torch.tensor(rgb), torch.tensor(normals)
    )
    np.testing.assert_allclose(t_out.color.numpy(), np_out.color, atol=1e-12)
    np.testing.assert_allclose(t_out.depth.item(), np_out.depth, atol=1e-12)
    np.testing.assert_allclose(t_out.weights.numpy(), np_out.weights, atol=1e-12)


def test_composite_gradients_match_finite_differences():
    torch.manual_seed(0)
    gen = torch.Generator().manual_seed(5)
    fd_net = SdfNetwork(
        hidden_dim=8, num_hidden=2, feature_dim=4, dtype=torch.float64, generator=gen
    )
    fc_net = RadianceNetwork(
        feature_dim=4, hidden_dim=8, num_hidden=1, dtype=torch.float64, generator=gen
    )
    t = np.linspace(0.4, 1.6, 6)
    delta = np.concatenate([np.diff(t), [0.2]])
    direction = np.array([0.0, 0.0, -1.0])
    pts = np.array([0.0, 0.0, 1.0]) + t[:, None] * direction
    samples = RaySamples(t, delta, pts)
    dirs_t = torch.tensor(np.broadcast_to(direction, pts.shape).copy())

    def objective():
        pts_t = torch.tensor(pts)
        s, z, grad = fd_net.sdf_feature_gradient(pts_t, create_graph=True)
        rgb = fc_net(z, dirs_t)
        sigma = density_from_sdf(s, 0.05)
        out = composite(samples, sigma, rgb, grad)
        return out.color.sum() + out.depth

    loss = objective()
    params = list(fd_net.parameters()) + list(fc_net.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    h = 1e-5
    checked = 0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        g_flat = (
            torch.zeros_like(p) if g is None else g
        ).reshape(-1)
        for k in range(0, p.numel(), max(1, p.numel() // 3)):
            orig = flat[k].item()
            flat[k] = orig + h
            plus = objective().item()
            flat[k] = orig - h
            minus = objective().item()
            flat[k] = orig
            fd = (plus - minus) / (2 * h)
            scale = max(abs(fd), abs(g_flat[k].item()), 1e-6)
            assert abs(fd - g_flat[k].item()) / scale < 1e-4
            checked += 1
    assert checked >= 20


# ---------------------------------------------------------------------------
# ray rendering against the analytic sphere
# ---------------------------------------------------------------------------

def _sphere_setup(beta=1e-3):
    field = SphereField(radius=0.5, light_direction=(0.0, 0.0, 1.0))
    shade = LambertianAppearance(field)
    cfg = PipelineConfig(bound_radius=1.0, eval_samples_per_ray=128)
    return field, shade, cfg, beta


def test_render_ray_miss_raises():
    field, shade, cfg, beta = _sphere_setup()
    ray = Ray(np.array([0.0, 5.0, 2.0]), np.array([0.0, 0.0, -1.0]))
    with pytest.raises(MissError):
        render_ray(field, shade, ray, cfg, beta, np.random.default_rng(0))


def test_render_ray_depth_and_normal_match_closed_form():
    field, shade, cfg, beta = _sphere_setup()
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(200):
        # Aim at a random point well inside the silhouette.
        target = rng.uniform(-0.35, 0.35, size=3)
        target *= 0.35 / max(np.linalg.norm(target), 0.35)
        origin = rng.standard_normal(3)
        origin *= 2.0 / np.linalg.norm(origin)
        d = target - origin
        d /= np.linalg.norm(d)
        t_hit = oracles.ray_sphere_hit(origin, d, 0.5)
        if t_hit is None:
            continue
        ray = Ray(origin, d)
        out = render_ray(field, shade, ray, cfg, beta, np.random.default_rng(checked), 128)
        span = 2.0  # bounding sphere chord is at most the diameter
        spacing = span / 128
        assert abs(out.depth - t_hit) < 2 * spacing
        n_true = (origin + t_hit * d) / np.linalg.norm(origin + t_hit * d)
        n_hat = out.normal / np.linalg.norm(out.normal)
        angle = math.degrees(math.acos(np.clip(n_hat @ n_true, -1, 1)))
        assert angle < 2.0
        assert out.opacity > 0.999
        checked += 1
    assert checked >= 150


def test_render_ray_head_on_depth_is_exact():
    field, shade, cfg, beta = _sphere_setup()
    ray = Ray(np.array([0.0, 0.0, 2.0]), np.array([0.0, 0.0, -1.0]))
    out = render_ray(field, shade, ray, cfg, beta, np.random.default_rng(0), 256)
    assert abs(out.depth - 1.5) < 2 * (2.0 / 256)
    n_hat = out.normal / np.linalg.norm(out.normal)
    np.testing.assert_allclose(n_hat, [0, 0, 1], atol=0.01)


def test_render_ray_background_blend():
    field = SphereField(radius=0.2)
    shade = LambertianAppearance(field)
    cfg = PipelineConfig(bound_radius=1.0, background=(0.2, 0.3, 0.4))
    # Passes through the bounding sphere but stays far from the surface.
    ray = Ray(np.array([0.0, 0.9, 2.0]), np.array([0.0, 0.0, -1.0]))
    out = render_ray(field, shade, ray, cfg, 0.01, np.random.default_rng(0))
    assert out.opacity < 1e-12
    np.testing.assert_allclose(out.color, [0.2, 0.3, 0.4], atol=1e-9)


def test_render_rays_matches_scalar_path():
    field, shade, cfg, beta = _sphere_setup(beta=0.01)
    rng = np.random.default_rng(3)
    origins = np.tile([0.0, 0.0, 2.0], (6, 1))
    dirs = np.stack(
        [
            [0.0, 0.0, -1.0],
            [0.1, 0.0, -1.0],
            [0.0, 0.15, -1.0],
            [0.0, 3.0, -1.0],  # misses the bounding sphere
            [-0.1, -0.1, -1.0],
            [0.05, -0.2, -1.0],
        ]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    m = 32
    out = render_rays(field, shade, origins, dirs, cfg, beta, np.random.default_rng(9), m)
    assert out.hits.tolist() == [True, True, True, False, True, True]
    for i in range(6):
        # Replay the stream up to ray i, then render it alone.
        rng_i = np.random.default_rng(9)
        rng_i.random((i, m))
        ray = Ray(origins[i], dirs[i])
        if not out.hits[i]:
            with pytest.raises(MissError):
                render_ray(field, shade, ray, cfg, beta, rng_i, m)
            np.testing.assert_allclose(out.color[i], cfg.background, atol=1e-12)
            assert out.opacity[i] == 0.0
            continue
        single = render_ray(field, shade, ray, cfg, beta, rng_i, m)
        np.testing.assert_allclose(out.color[i], single.color, atol=1e-12)
        np.testing.assert_allclose(out.depth[i], single.depth, atol=1e-12)
        np.testing.assert_allclose(out.normal[i], single.normal, atol=1e-12)


def test_render_rays_torch_model_runs_and_blends_background():
    from uwsdf.field import build_model

    model = build_model(seed=0, sdf_hidden_dim=16, sdf_num_hidden=2, feature_dim=8,
                        radiance_hidden_dim=16, radiance_num_hidden=1)
    cfg = PipelineConfig(bound_radius=1.0, background=(1.0, 0.0, 0.0))
    origins = np.array([[0.0, 0.0, 2.0], [0.0, 5.0, 2.0]])
    dirs = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]])
    out = render_rays(
        model.sdf, model.radiance, origins, dirs, cfg, model.beta,
        np.random.default_rng(0), 16,
    )
    assert isinstance(out.color, torch.Tensor)
    assert out.hits.tolist() == [True, False]
    np.testing.assert_allclose(out.color[1].detach().numpy(), [1.0, 0.0, 0.0], atol=1e-12)
    assert out.opacity[1].item() == 0.0


def test_render_image_shapes_and_center_content():
    field, shade, cfg, _ = _sphere_setup()
    from uwsdf.assets import CameraRecord

    m = np.eye(4)
    m[:3, 3] = [0.0, 0.0, 2.0]
    cam = CameraRecord(40.0, 40.0, 16.5, 16.5, 33, 33, m)
    maps = render_image(field, shade, cam, cfg, 1e-3, np.random.default_rng(0), 64)
    color, depth, normal, opacity = maps
    assert color.shape == (33, 33, 3)
    assert depth.shape == (33, 33)
    assert normal.shape == (33, 33, 3)
    assert opacity.shape == (33, 33)
    assert opacity[16, 16] > 0.999
    assert abs(depth[16, 16] - 1.5) < 0.05
    assert opacity[0, 0] < 1e-6
