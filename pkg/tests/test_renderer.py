import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from kalmanfield import autodiff as ad
from kalmanfield.deformation import Timeline
from kalmanfield.model import DynamicField
from kalmanfield.renderer import (
    RayBundle,
    RenderConfig,
    composite,
    focal_length,
    generate_rays,
    render_image,
    render_rays,
    render_weights,
    resample_from_weights,
    sample_stratified,
    uniform_edges,
)
from kalmanfield.scenes import look_at

from oracles import loop_transmittance, pinhole_project


def test_focal_length_hand_value():
    assert focal_length(2 * np.arctan(0.5), 40) == pytest.approx(40.0)


@pytest.mark.parametrize("seed", range(3))
def test_rays_pass_through_projected_points(seed):
    rng = np.random.default_rng(seed)
    pose = look_at(rng.uniform(2, 4, 3))
    w, h, angle = 30, 20, 0.8
    point = rng.uniform(-0.3, 0.3, 3)
    row, col = pinhole_project(pose, point, angle, w, h)
    rays = generate_rays(pose, angle, w, h, np.array([[row, col]]))
    to_point = point - rays.origins[0]
    cos = to_point @ rays.dirs[0] / np.linalg.norm(to_point)
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_center_pixel_looks_down_minus_z():
    rays = generate_rays(np.eye(4), 0.7, 8, 6, np.array([[3, 4]]))
    np.testing.assert_allclose(rays.dirs[0], [0, 0, -1], atol=1e-15)
    assert len(generate_rays(np.eye(4), 0.7, 8, 6)) == 48


def test_ray_generation_errors():
    with pytest.raises(ValueError):
        generate_rays(np.eye(3), 0.7, 8, 8)
    with pytest.raises(ValueError):
        generate_rays(np.zeros((4, 4)), 0.7, 8, 8)
    with pytest.raises(ValueError):
        generate_rays(np.eye(4), 0.7, 8, 8, near=3.0, far=2.0)


def test_stratified_one_sample_per_bin(rng):
    s = sample_stratified(np.array([2.0, 1.0]), np.array([6.0, 3.0]), 16, rng)
    edges = uniform_edges(np.array([2.0, 1.0]), np.array([6.0, 3.0]), 16)
    assert np.all((s >= edges[:, :-1]) & (s <= edges[:, 1:]))
    mid = sample_stratified(2.0, 6.0, 4)
    np.testing.assert_allclose(mid, [[2.5, 3.5, 4.5, 5.5]])


def test_constant_density_transmittance_closed_form():
    sigma, near, far, n = 0.7, 2.0, 6.0, 1024
    edges = uniform_edges(near, far, n)
    deltas = np.diff(edges, axis=1)
    w, trans, final = render_weights(np.full((1, n), sigma), deltas)
    expect = np.exp(-sigma * (edges[0, :-1] - near))
    np.testing.assert_allclose(trans.data[0], expect, atol=1e-12)
    assert final.data[0] == pytest.approx(np.exp(-sigma * (far - near)), abs=1e-12)


@given(
    arrays(np.float64, (3, 7), elements=st.floats(0, 50)),
    arrays(np.float64, (3, 7), elements=st.floats(1e-4, 1.0)),
)
def test_weights_match_loop_and_partition_unity(sigma, deltas):
    w, trans, final = render_weights(sigma, deltas)
    for r in range(3):
        t_ref, w_ref, f_ref = loop_transmittance(sigma[r], deltas[r])
        np.testing.assert_allclose(w.data[r], w_ref, atol=1e-12)
        np.testing.assert_allclose(trans.data[r], t_ref, atol=1e-12)
        assert final.data[r] == pytest.approx(f_ref, abs=1e-12)
    np.testing.assert_allclose(w.data.sum(1) + final.data, 1.0, atol=1e-9)


def test_composite_background_and_errors():
    rgb = np.zeros((2, 3, 3))
    out = composite(np.zeros((2, 3)), rgb, np.full((2, 3), 0.1), (0.2, 0.4, 0.6))
    np.testing.assert_allclose(out.color.data, [[0.2, 0.4, 0.6]] * 2)
    dense = composite(np.full((1, 3), 1e6), np.ones((1, 3, 3)), np.full((1, 3), 0.1), (0, 0, 0))
    np.testing.assert_allclose(dense.color.data, 1.0)
    with pytest.raises(ValueError):
        composite(np.zeros((1, 2)), np.zeros((1, 2, 3)), np.array([[0.1, 0.0]]), (1, 1, 1))


def test_composite_gradient(rng):
    sigma = ad.Parameter(rng.uniform(0, 3, (2, 5)))
    rgb = ad.Parameter(rng.uniform(0, 1, (2, 5, 3)))
    deltas = rng.uniform(0.05, 0.3, (2, 5))
    w = rng.normal(size=(2, 3))
    fn = lambda: ad.sum_(composite(sigma, rgb, deltas, (1, 1, 1)).color * w)
    assert ad.grad_check(fn, [sigma, rgb]) < 1e-7


def test_resample_follows_histogram_chi_square():
    rng = np.random.default_rng(0)
    edges = np.linspace(0.0, 1.0, 5)[None]
    weights = np.array([[0.1, 0.4, 0.2, 0.3]])
    draws = np.concatenate([resample_from_weights(edges, weights, 50, rng)[0] for _ in range(400)])
    counts = np.histogram(draws, bins=edges[0])[0]
    p = stats.chisquare(counts, weights[0] * len(draws)).pvalue
    assert p > 1e-3


def test_resample_uniform_within_bin_monte_carlo():
    rng = np.random.default_rng(1)
    edges = np.array([[0.0, 1.0, 3.0]])
    draws = np.concatenate(
        [resample_from_weights(edges, np.array([[0.0, 1.0]]), 20, rng)[0] for _ in range(500)]
    )
    assert draws.min() >= 1.0 and draws.max() <= 3.0
    assert draws.mean() == pytest.approx(2.0, abs=0.02)


def test_resample_sorted_deterministic_and_zero_weights():
    edges = np.linspace(2, 6, 9)[None].repeat(2, 0)
    w = np.array([[0, 0, 1, 3, 0, 0, 0, 0], [0] * 8], dtype=float)
    a = resample_from_weights(edges, w, 16)
    b = resample_from_weights(edges, w, 16)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a, axis=1) >= 0)
    assert a[0].min() >= 3.0 and a[0].max() <= 4.0
    assert np.sum(a[0] > 3.5) == 12  # three quarters of the mass in the second bin
    np.testing.assert_allclose(a[1], 2 + 4 * (np.arange(16) + 0.5) / 16)
    with pytest.raises(ValueError):
        resample_from_weights(edges, -w - 1, 4)


def _bundle(n, t=0.0):
    pose = look_at((3.0, 0.5, 1.0))
    rays = generate_rays(pose, 0.7, 10, 10, None, t)
    return rays.subset(np.arange(n))


def test_render_rays_shapes_and_determinism(tiny_cfg):
    model = DynamicField(tiny_cfg, 0)
    tl = Timeline([0.0, 0.5, 1.0])
    rays = _bundle(6, 0.5)
    cfg = RenderConfig(n_proposal=8, n_samples=6)
    a = render_rays(model, rays, tl, cfg)
    b = render_rays(model, rays, tl, cfg)
    assert a.color.shape == (6, 3) and a.weights.shape == (6, 6) and a.edges.shape == (6, 7)
    assert a.proposal_weights.shape == (6, 8)
    np.testing.assert_array_equal(a.color.data, b.color.data)
    assert np.all(np.diff(a.edges, axis=1) >= 0)
    assert np.all((a.color.data >= 0) & (a.color.data <= 1))
    with pytest.raises(ad.ShapeError):
        render_rays(model, rays, tl, cfg, edges=a.edges[:, :3])


def test_render_image_fresh_model_is_deterministic(tiny_cfg):
    cam = type("Cam", (), dict(camera_angle_x=0.7, width=6, height=5, near=2.0, far=6.0))
    tl = Timeline([0.0, 1.0])
    cfg = RenderConfig(n_proposal=8, n_samples=8)
    a = render_image(DynamicField(tiny_cfg, 3), look_at((4, 0, 0)), 0.0, cam, tl, cfg, chunk=7)
    b = render_image(DynamicField(tiny_cfg, 3), look_at((4, 0, 0)), 0.0, cam, tl, cfg)
    assert a.shape == (5, 6, 3)
    np.testing.assert_array_equal(a, b)


def test_raybundle_rejects_empty_interval():
    with pytest.raises(ValueError):
        RayBundle(np.zeros((1, 3)), np.ones((1, 3)), np.array([2.0]), np.array([2.0]), np.zeros(1))
