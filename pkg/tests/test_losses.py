"""Objective terms: photometric, eikonal, mask, depth, normal, combination."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from uwsdf.assets import PipelineConfig
from uwsdf.errors import ValidationError
from uwsdf.field import SphereField, build_model
from uwsdf.losses import (
    EikonalSampleSet,
    RayBatch,
    ScaleShift,
    depth_loss,
    eikonal_loss,
    eikonal_samples,
    mask_loss,
    normal_loss,
    rgb_loss,
    solve_scale_shift,
    total_loss,
)


def _toy_batch(rng, b=8, with_priors=True):
    origins = np.tile([0.0, 0.0, 2.0], (b, 1))
    dirs = rng.normal(size=(b, 3)) * 0.05 + [0.0, 0.0, -1.0]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    colors = rng.random((b, 3))
    fg = (rng.random(b) < 0.8).astype(float)
    depth = rng.uniform(1.0, 2.0, size=b)
    normal = rng.normal(size=(b, 3))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    valid = fg.astype(bool) if with_priors else np.zeros(b, dtype=bool)
    return RayBatch(origins, dirs, colors, fg, depth, valid, normal, valid.copy())


# ---------------------------------------------------------------------------
# rgb
# ---------------------------------------------------------------------------

def test_rgb_loss_zero_on_identical():
    x = np.random.default_rng(0).random((5, 3))
    assert rgb_loss(x, x.copy()) == 0.0


def test_rgb_loss_hand_case():
    pred = np.array([[1.0, 0.0, 0.0]])
    obs = np.array([[0.0, 0.0, 0.0]])
    assert abs(rgb_loss(pred, obs) - 1.0) < 1e-15
    both = np.array([[0.5, 0.25, 0.0]])
    assert abs(rgb_loss(both, obs) - 0.75) < 1e-15


def test_rgb_loss_matches_loop_and_torch():
    rng = np.random.default_rng(1)
    pred = rng.random((32, 3))
    obs = rng.random((32, 3))
    manual = np.mean([np.abs(pred[i] - obs[i]).sum() for i in range(32)])
    assert abs(rgb_loss(pred, obs) - manual) < 1e-12
    t = rgb_loss(torch.tensor(pred), torch.tensor(obs))
    assert abs(t.item() - manual) < 1e-12


def test_rgb_loss_rejects_shape_mismatch():
    with pytest.raises(ValidationError):
        rgb_loss(np.zeros((2, 3)), np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# eikonal
# ---------------------------------------------------------------------------

def test_eikonal_loss_zero_for_exact_sdf():
    field = SphereField(radius=0.5)
    pts = np.random.default_rng(2).uniform(-0.9, 0.9, size=(100, 3))
    assert eikonal_loss(field, EikonalSampleSet(pts)) < 1e-10


def test_eikonal_loss_one_for_doubled_sdf():
    class DoubledSphere(SphereField):
        def sdf(self, x):
            return 2.0 * super().sdf(x)

        def gradient(self, x):
            return 2.0 * super().gradient(x)

    pts = np.random.default_rng(3).uniform(-0.9, 0.9, size=(50, 3))
    loss = eikonal_loss(DoubledSphere(radius=0.5), EikonalSampleSet(pts))
    assert abs(loss - 1.0) < 1e-12


def test_eikonal_loss_network_matches_pointwise_loop():
    model = build_model(seed=0, sdf_hidden_dim=16, sdf_num_hidden=2, feature_dim=8)
    pts = np.random.default_rng(4).uniform(-0.5, 0.5, size=(10, 3))
    loss = eikonal_loss(model.sdf, EikonalSampleSet(pts), create_graph=False)
    acc = 0.0
    for p in pts:
        g = model.sdf.gradient(torch.tensor(p, dtype=torch.float32)[None])
        acc += (float(torch.linalg.norm(g[0])) - 1.0) ** 2
    assert abs(loss.item() - acc / len(pts)) < 1e-5


def test_eikonal_samples_structure():
    rng = np.random.default_rng(5)
    surface = np.tile([0.5, 0.0, 0.0], (10, 1))
    s = eikonal_samples(64, 1.0, rng, surface_points=surface, std=0.01)
    assert s.points.shape == (64, 3)
    radii = np.linalg.norm(s.points[:32], axis=1)
    assert (radii <= 1.0 + 1e-12).all()
    near = np.linalg.norm(s.points[32:] - [0.5, 0.0, 0.0], axis=1)
    assert (near < 0.1).all()
    # Without surface points everything is drawn from the ball.
    s2 = eikonal_samples(33, 2.0, rng)
    assert (np.linalg.norm(s2.points, axis=1) <= 2.0 + 1e-12).all()


def test_eikonal_samples_deterministic_per_seed():
    a = eikonal_samples(16, 1.0, np.random.default_rng(9)).points
    b = eikonal_samples(16, 1.0, np.random.default_rng(9)).points
    np.testing.assert_array_equal(a, b)


def test_eikonal_sample_set_validation():
    with pytest.raises(ValidationError):
        EikonalSampleSet(np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        EikonalSampleSet(np.array([[np.nan, 0.0, 0.0]]))
    with pytest.raises(ValidationError):
        eikonal_samples(0, 1.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# mask
# ---------------------------------------------------------------------------

def test_mask_loss_hand_values():
    assert abs(mask_loss(np.array([0.5]), np.array([1.0])) - math.log(2.0)) < 1e-12
    assert abs(mask_loss(np.array([0.5]), np.array([0.0])) - math.log(2.0)) < 1e-12
    # Saturated predictions are clamped to 1e-4 from the boundary.
    assert abs(mask_loss(np.array([1.0]), np.array([1.0])) + math.log(1.0 - 1e-4)) < 1e-12
    assert abs(mask_loss(np.array([0.0]), np.array([1.0])) + math.log(1e-4)) < 1e-9


def test_mask_loss_matches_loop_and_torch():
    rng = np.random.default_rng(6)
    p = rng.random(64)
    y = (rng.random(64) < 0.5).astype(float)
    clamped = np.clip(p, 1e-4, 1 - 1e-4)
    manual = np.mean(
        [-(y[i] * np.log(clamped[i]) + (1 - y[i]) * np.log(1 - clamped[i])) for i in range(64)]
    )
    assert abs(mask_loss(p, y) - manual) < 1e-12
    t = mask_loss(torch.tensor(p), torch.tensor(y))
    assert abs(t.item() - manual) < 1e-12


def test_mask_loss_rejects_nonbinary_labels():
    with pytest.raises(ValidationError):
        mask_loss(np.array([0.5]), np.array([0.25]))
    with pytest.raises(ValidationError):
        mask_loss(torch.tensor([0.5]), torch.tensor([0.25]))


# ---------------------------------------------------------------------------
# depth (scale/shift invariant)
# ---------------------------------------------------------------------------

def test_solve_scale_shift_identity_and_affine():
    rng = np.random.default_rng(7)
    pred = rng.uniform(1.0, 3.0, size=32)
    w, q, degenerate = solve_scale_shift(pred, pred)
    assert abs(w - 1.0) < 1e-12 and abs(q) < 1e-12 and not degenerate
    w, q, degenerate = solve_scale_shift(pred, 2.0 * pred + 3.0)
    assert abs(w - 2.0) < 1e-12 and abs(q - 3.0) < 1e-12 and not degenerate
    assert depth_loss(pred, 2.0 * pred + 3.0) < 1e-20


def test_solve_scale_shift_matches_grid_search_oracle():
    rng = np.random.default_rng(8)
    pred = rng.uniform(0.5, 2.5, size=48)
    prior = 1.7 * pred - 0.4 + 0.05 * rng.standard_normal(48)
    w, q, _ = solve_scale_shift(pred, prior)
    w_ref, q_ref = oracles.grid_search_scale_shift(pred, prior)
    assert abs(w - w_ref) < 1e-6
    assert abs(q - q_ref) < 1e-6
    # The closed form is at least as good as any grid point.
    assert depth_loss(pred, prior) <= depth_loss(
        pred, prior, ScaleShift(w_ref, q_ref, False)
    ) + 1e-12


def test_solve_scale_shift_degenerate_single_ray():
    w, q, degenerate = solve_scale_shift(np.array([1.5]), np.array([2.0]))
    assert degenerate
    assert w == 1.0
    assert abs(q - 0.5) < 1e-15
    assert depth_loss(np.array([1.5]), np.array([2.0])) < 1e-25


def test_solve_scale_shift_degenerate_constant_pred():
    pred = np.full(8, 1.25)
    prior = np.linspace(0, 1, 8)
    w, q, degenerate = solve_scale_shift(pred, prior)
    assert degenerate and w == 1.0
    assert abs(q - (prior.mean() - 1.25)) < 1e-12


def test_depth_loss_loop_oracle_with_fixed_fit():
    rng = np.random.default_rng(9)
    pred = rng.uniform(1, 2, size=16)
    prior = rng.uniform(1, 2, size=16)
    fit = ScaleShift(1.3, -0.2, False)
    manual = np.mean([(1.3 * pred[i] - 0.2 - prior[i]) ** 2 for i in range(16)])
    assert abs(depth_loss(pred, prior, fit) - manual) < 1e-12


@given(st.floats(0.1, 5.0), st.floats(-3.0, 3.0), st.integers(0, 1000))
def test_depth_loss_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(1, 2, size=16)
    prior = rng.uniform(1, 2, size=16)
    base = depth_loss(pred, prior)
    scaled = depth_loss(a * pred + b, prior)
    assert abs(base - scaled) < 1e-9 * max(1.0, base)


def test_depth_loss_torch_matches_numpy():
    rng = np.random.default_rng(10)
    pred = rng.uniform(1, 2, size=16)
    prior = rng.uniform(1, 2, size=16)
    t = depth_loss(torch.tensor(pred), torch.tensor(prior))
    assert abs(t.item() - depth_loss(pred, prior)) < 1e-12


# ---------------------------------------------------------------------------
# normals
# ---------------------------------------------------------------------------

def test_normal_loss_zero_on_identical():
    n = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    assert normal_loss(n, n.copy()) < 1e-15


def test_normal_loss_antiparallel_hand_value():
    # L1 term |(0,0,1)-(0,0,-1)| = 2; angular term |1 - (-1)| = 2.
    pred = np.array([[0.0, 0.0, 1.0]])
    prior = np.array([[0.0, 0.0, -1.0]])
    assert abs(normal_loss(pred, prior) - 4.0) < 1e-15


def test_normal_loss_renormalizes_inputs():
    pred = np.array([[0.0, 0.0, 10.0]])
    prior = np.array([[0.0, 0.0, 0.2]])
    assert normal_loss(pred, prior) < 1e-15


def test_normal_loss_matches_loop_and_torch():
    rng = np.random.default_rng(11)
    pred = rng.standard_normal((24, 3))
    prior = rng.standard_normal((24, 3))
    acc = 0.0
    for i in range(24):
        p = pred[i] / np.linalg.norm(pred[i])
        g = prior[i] / np.linalg.norm(prior[i])
        acc += np.abs(p - g).sum() + abs(1.0 - p @ g)
    manual = acc / 24
    assert abs(normal_loss(pred, prior) - manual) < 1e-12
    t = normal_loss(torch.tensor(pred), torch.tensor(prior))
    assert abs(t.item() - manual) < 1e-12


# ---------------------------------------------------------------------------
# combination
# ---------------------------------------------------------------------------

def _small_cfg(**kw):
    base = dict(samples_per_ray=8, batch_size=8, bound_radius=1.0)
    base.update(kw)
    return PipelineConfig(**base)


def _small_model():
    return build_model(
        seed=0, sdf_hidden_dim=16, sdf_num_hidden=2, feature_dim=8,
        radiance_hidden_dim=16, radiance_num_hidden=1,
    )


def test_total_loss_report_identity():
    model = _small_model()
    cfg = _small_cfg()
    batch = _toy_batch(np.random.default_rng(0))
    total, report = total_loss(model, batch, cfg, np.random.default_rng(1))
    recombined = (
        report.rgb
        + cfg.lambda1 * report.eikonal
        + cfg.lambda2 * report.fg
        + cfg.lambda3 * report.depth
        + cfg.lambda4 * report.normal
    )
    assert abs(report.total - recombined) < 1e-9
    assert abs(total.item() - report.total) < 1e-4  # float32 graph vs float64 report
    assert set(report.to_dict()) == {
        "rgb", "eikonal", "fg", "depth", "normal", "total", "w", "q", "degenerate_fit",
    }


def test_total_loss_zero_weights_reduce_to_rgb():
    model = _small_model()
    cfg = _small_cfg(lambda1=0.0, lambda2=0.0, lambda3=0.0, lambda4=0.0)
    batch = _toy_batch(np.random.default_rng(2))
    total, report = total_loss(model, batch, cfg, np.random.default_rng(3))
    assert abs(report.total - report.rgb) < 1e-15
    assert abs(total.item() - report.rgb) < 1e-6


def test_total_loss_is_deterministic_given_seed():
    model = _small_model()
    cfg = _small_cfg()
    batch = _toy_batch(np.random.default_rng(4))
    _, r1 = total_loss(model, batch, cfg, np.random.default_rng(5))
    _, r2 = total_loss(model, batch, cfg, np.random.default_rng(5))
    assert r1.to_dict() == r2.to_dict()


def test_total_loss_skips_invalid_priors():
    model = _small_model()
    cfg = _small_cfg()
    batch = _toy_batch(np.random.default_rng(6), with_priors=False)
    _, report = total_loss(model, batch, cfg, np.random.default_rng(7))
    assert report.depth == 0.0
    assert report.normal == 0.0
    assert not report.degenerate_fit


def test_total_loss_gradients_flow_to_all_parameter_groups():
    model = _small_model()
    cfg = _small_cfg()
    batch = _toy_batch(np.random.default_rng(8))
    total, _ = total_loss(model, batch, cfg, np.random.default_rng(9))
    grads = torch.autograd.grad(total, model.parameters(), allow_unused=True)
    named = [n for n, _ in model.named_parameters()]
    nonzero = {
        n: (g is not None and float(g.abs().sum()) > 0) for n, g in zip(named, grads)
    }
    assert nonzero["beta"]
    assert any(v for n, v in nonzero.items() if n.startswith("sdf."))
    assert any(v for n, v in nonzero.items() if n.startswith("radiance."))


def test_ray_batch_validation():
    rng = np.random.default_rng(10)
    b = _toy_batch(rng)
    with pytest.raises(ValidationError):
        RayBatch(
            b.origins[:0], b.dirs[:0], b.colors[:0], b.fg[:0], b.depth[:0],
            b.depth_valid[:0], b.normal[:0], b.normal_valid[:0],
        )
    bad_fg = b.fg.copy()
    bad_fg[0] = 0.5
    with pytest.raises(ValidationError):
        RayBatch(
            b.origins, b.dirs, b.colors, bad_fg, b.depth, b.depth_valid,
            b.normal, b.normal_valid,
        )
    bad_normal = b.normal.copy()
    bad_normal[b.normal_valid.argmax()] *= 3.0
    with pytest.raises(ValidationError):
        RayBatch(
            b.origins, b.dirs, b.colors, b.fg, b.depth, b.depth_valid,
            bad_normal, b.normal_valid,
        )
