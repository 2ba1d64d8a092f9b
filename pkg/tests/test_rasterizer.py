import numpy as np
import pytest

from conftest import random_cloud, simple_frame
from featsplat.errors import ContractViolation, NumericalError
from featsplat.gaussians import GaussianCloud, logit, sigmoid
from featsplat.rasterizer import (
    RasterConfig,
    bin_tiles,
    project,
    render,
    render_backward,
    _composite_weights,
    _tile_alphas,
)
from oracles import central_difference, naive_render, rel_err


def lone_gaussian(position, opacity, color, scale=0.5, feature=None):
    feature = feature if feature is not None else np.zeros(2)
    return GaussianCloud(
        positions=np.asarray([position], dtype=np.float64),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.log(np.full((1, 3), scale)),
        opacity_logits=np.asarray([float(logit(np.asarray(opacity)))]),
        colors_raw=np.asarray([color], dtype=np.float64),
        features=np.asarray([feature], dtype=np.float64),
    )


def stack_clouds(*clouds):
    return GaussianCloud(*(np.concatenate([getattr(c, f) for c in clouds])
                           for f in ("positions", "rotations", "log_scales",
                                     "opacity_logits", "colors_raw", "features")))


# projection ------------------------------------------------------------------

def test_on_axis_projection_closed_form():
    f, d, s = 40.0, 4.0, 0.5
    frame = simple_frame(32, focal=f)
    cloud = lone_gaussian([0.0, 0.0, d], 0.5, [0.5, 0.5, 0.5], scale=s)
    cfg = RasterConfig()
    proj = project(cloud, frame, cfg)
    assert len(proj) == 1
    expect = (f * s / d) ** 2 * np.eye(2) + cfg.lowpass * np.eye(2)
    np.testing.assert_allclose(proj.cov2d[0], expect, rtol=1e-12)
    np.testing.assert_allclose(proj.mean2d[0], [15.5, 15.5], atol=1e-12)
    assert proj.view_depth[0] == pytest.approx(d)
    assert proj.radius[0] >= 1


def test_behind_camera_culled():
    frame = simple_frame(16)
    cloud = lone_gaussian([0.0, 0.0, -2.0], 0.5, [0.5, 0.5, 0.5])
    assert len(project(cloud, frame, RasterConfig())) == 0


def test_doubling_depth_quarters_projected_variance():
    f = 50.0
    frame = simple_frame(64, focal=f)
    cfg = RasterConfig()
    near = project(lone_gaussian([0, 0, 2.0], 0.5, [0.5] * 3), frame, cfg)
    far = project(lone_gaussian([0, 0, 4.0], 0.5, [0.5] * 3), frame, cfg)
    v_near = near.cov2d[0, 0, 0] - cfg.lowpass
    v_far = far.cov2d[0, 0, 0] - cfg.lowpass
    assert v_near / v_far == pytest.approx(4.0, rel=1e-12)


def test_depth_sort_stable_with_ties(rng):
    cloud = stack_clouds(
        lone_gaussian([0.3, 0, 3.0], 0.4, [0.9, 0.1, 0.1]),
        lone_gaussian([-0.3, 0, 3.0], 0.4, [0.1, 0.9, 0.1]),  # identical depth
        lone_gaussian([0.0, 0, 2.0], 0.4, [0.1, 0.1, 0.9]),
    )
    proj = project(cloud, simple_frame(32), RasterConfig())
    assert proj.source_index.tolist() == [2, 0, 1]


def test_nonfinite_parameters_abort_with_index():
    cloud = lone_gaussian([0, 0, 3.0], 0.5, [0.5] * 3)
    cloud.positions[0, 1] = np.nan
    with pytest.raises(NumericalError, match="0"):
        project(cloud, simple_frame(16), RasterConfig())


# binning ----------------------------------------------------------------------

def test_small_disc_lands_in_single_tile():
    frame = simple_frame(64)
    cloud = lone_gaussian([-0.35, -0.35, 3.0], 0.5, [0.5] * 3, scale=0.08)
    proj = project(cloud, frame, RasterConfig())
    tiles = bin_tiles(proj, 64, 64, 16)
    hit = [(ty, tx) for ty, row in enumerate(tiles)
           for tx, cell in enumerate(row) if cell.size]
    assert 1 <= len(hit) <= 4
    u, v = proj.mean2d[0]
    assert (int(v) // 16, int(u) // 16) in hit


def test_giant_disc_listed_in_all_tiles():
    frame = simple_frame(64)
    cloud = lone_gaussian([0, 0, 2.5], 0.5, [0.5] * 3, scale=3.0)
    proj = project(cloud, frame, RasterConfig())
    tiles = bin_tiles(proj, 64, 64, 16)
    assert all(cell.size == 1 for row in tiles for cell in row)


def test_binning_covers_exactly_the_visible_set(rng):
    cloud = random_cloud(rng, k=60)
    frame = simple_frame(48)
    proj = project(cloud, frame, RasterConfig())
    tiles = bin_tiles(proj, 48, 48, 16)
    union = set()
    for row in tiles:
        for cell in row:
            assert len(set(cell.tolist())) == cell.size  # no duplicates per tile
            union.update(cell.tolist())
    assert union == set(range(len(proj)))


# closed-form blends ------------------------------------------------------------

def test_single_gaussian_blend_closed_form():
    frame = simple_frame(17)  # odd size: center pixel at integer coords
    cloud = lone_gaussian([0, 0, 3.0], 0.6, [1.0, 0.0, 0.0], scale=0.8)
    out = render(cloud, frame, RasterConfig(with_features=False))
    cy = cx = 8
    a = 0.6  # logit/sigmoid round trip is exact to double precision
    np.testing.assert_allclose(out.color[cy, cx], [a, 0.0, 0.0], atol=1e-12)
    assert out.alpha[cy, cx] == pytest.approx(a, abs=1e-12)
    assert out.depth[cy, cx] == pytest.approx(a * 3.0, abs=1e-12)


def test_two_stacked_gaussians_expanded_blend():
    frame = simple_frame(17)
    c1, c2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    front = lone_gaussian([0, 0, 2.0], 0.5, c1, scale=0.8)
    back = lone_gaussian([0, 0, 4.0], 0.5, c2, scale=1.6)
    out = render(stack_clouds(front, back), frame, RasterConfig(with_features=False))
    np.testing.assert_allclose(out.color[8, 8], 0.5 * c1 + 0.25 * c2, atol=1e-12)
    assert out.alpha[8, 8] == pytest.approx(0.75, abs=1e-12)


def test_background_composites_with_final_transmittance():
    frame = simple_frame(17)
    bg = np.array([0.2, 0.4, 0.6])
    cloud = lone_gaussian([0, 0, 3.0], 0.6, [1.0, 0.0, 0.0], scale=0.8)
    out = render(cloud, frame, RasterConfig(background=bg, with_features=False))
    np.testing.assert_allclose(out.color[8, 8], [0.6, 0, 0] + 0.4 * bg, atol=1e-12)
    a = out.alpha[0, 0]  # single gaussian: its corner weight equals the alpha
    np.testing.assert_allclose(out.color[0, 0],
                               a * np.array([1.0, 0, 0]) + (1 - a) * bg, atol=1e-12)


def test_pixel_record_reports_contributors():
    frame = simple_frame(17)
    cloud = lone_gaussian([0, 0, 3.0], 0.6, [1.0, 0.0, 0.0], scale=0.8)
    out = render(cloud, frame, RasterConfig(with_features=False))
    src, alphas, weights = out.pixel_record(8, 8)
    assert src.tolist() == [0]
    assert alphas[0] == pytest.approx(0.6, abs=1e-12)
    assert weights[0] == pytest.approx(0.6, abs=1e-12)


# tiled vs naive oracle ----------------------------------------------------------

@pytest.mark.parametrize("seed,k,size,nf", [(0, 50, 32, 4), (1, 200, 64, 16),
                                            (2, 120, 48, 4), (3, 30, 33, 16)])
def test_tiled_matches_naive_oracle(seed, k, size, nf):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, k=k, n_feat=nf, opacity_range=(0.05, 0.98))
    frame = simple_frame(size)
    cfg = RasterConfig(background=np.array([0.1, 0.2, 0.3]))
    out = render(cloud, frame, cfg)
    proj = project(cloud, frame, cfg)
    color, depth, feature, alpha, wsum = naive_render(proj, size, size, cfg)
    assert np.abs(out.color - color).max() < 1e-5
    assert np.abs(out.depth - depth).max() < 1e-5
    assert np.abs(out.feature - feature).max() < 1e-5
    assert np.abs(out.alpha - alpha).max() < 1e-5
    # conservation: accumulated weights plus final transmittance telescope to 1
    assert np.abs(wsum + (1 - alpha) - 1.0).max() < 1e-12


def test_weight_conservation_inside_tiled_path(rng):
    cloud = random_cloud(rng, k=80, opacity_range=(0.1, 0.97))
    frame = simple_frame(32)
    cfg = RasterConfig()
    out = render(cloud, frame, cfg)
    assert out.record.tiles, "expected populated tiles"
    for tr in out.record.tiles:
        _, _, w, t_final = _composite_weights(tr.alpha, cfg.stop_transmittance)
        np.testing.assert_allclose(w.sum(axis=0) + t_final, 1.0, atol=1e-12)


# invariants ----------------------------------------------------------------------

def test_feature_saturation_recovers_shared_vector():
    z_star = np.array([0.7, -1.3, 2.0])
    parts = [lone_gaussian([0, 0, 2.0 + 0.2 * i], 0.985, [0.5] * 3, scale=1.2,
                           feature=z_star) for i in range(4)]
    out = render(stack_clouds(*parts), simple_frame(17), RasterConfig())
    assert out.record.proj.opacity.max() > 0.98
    center_t = 1 - out.alpha[8, 8]
    assert center_t < 1e-4
    np.testing.assert_allclose(out.feature[8, 8], z_star, atol=1e-3)


def test_depth_monotonicity_two_opaque():
    near = lone_gaussian([0, 0, 2.0], 0.999, [0.9, 0.1, 0.1], scale=1.0)
    far = lone_gaussian([0, 0, 5.0], 0.999, [0.1, 0.9, 0.1], scale=2.5)
    out = render(stack_clouds(near, far), simple_frame(17),
                 RasterConfig(with_features=False))
    assert abs(out.depth[8, 8] - 2.0) < 0.05  # alpha cap leaves a 1% tail


def test_render_deterministic(rng):
    cloud = random_cloud(rng, k=40)
    frame = simple_frame(32)
    cfg = RasterConfig()
    a = render(cloud, frame, cfg)
    b = render(cloud, frame, cfg)
    for field in ("color", "depth", "feature", "alpha"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


# backward ------------------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients(rng):
    cloud = random_cloud(rng, k=10)
    frame = simple_frame(24)
    out = render(cloud, frame, RasterConfig())
    g = render_backward(cloud, frame, out)
    for name in ("positions", "rotations", "log_scales", "opacity_logits",
                 "colors_raw", "features"):
        np.testing.assert_array_equal(getattr(g, name), 0.0)


def test_single_gaussian_opacity_hand_derivative():
    # single pixel functional: d color / d opacity_logit = c * sigma'(logit) * g2d
    frame = simple_frame(17)
    cloud = lone_gaussian([0.021, -0.013, 3.0], 0.47, [0.8, 0.3, 0.6], scale=0.7)
    cfg = RasterConfig(with_features=False)
    out = render(cloud, frame, cfg)
    dC = np.zeros((17, 17, 3))
    dC[8, 8, 0] = 1.0
    g = render_backward(cloud, frame, out, dC)
    proj = project(cloud, frame, cfg)
    con = proj.conic[0]
    d = np.array([8.0, 8.0]) - proj.mean2d[0]
    g2d = np.exp(-0.5 * (d @ con @ d))
    o = sigmoid(cloud.opacity_logits)[0]
    c0 = cloud.colors_raw[0, 0]
    expect = c0 * o * (1 - o) * g2d
    assert g.opacity_logits[0] == pytest.approx(expect, rel=1e-12)


def test_full_scene_finite_difference_gradients(rng):
    cloud = random_cloud(rng, k=5, n_feat=3, opacity_range=(0.15, 0.3))
    frame = simple_frame(16, focal=40.0)
    cfg = RasterConfig()
    ups = {
        "color": rng.normal(size=(16, 16, 3)),
        "depth": rng.normal(size=(16, 16)) * 0.3,
        "feature": rng.normal(size=(16, 16, 3)) * 0.5,
        "alpha": rng.normal(size=(16, 16)) * 0.5,
    }

    def loss():
        o = render(cloud, frame, cfg)
        return float(np.sum(ups["color"] * o.color) + np.sum(ups["depth"] * o.depth)
                     + np.sum(ups["feature"] * o.feature)
                     + np.sum(ups["alpha"] * o.alpha))

    out = render(cloud, frame, cfg)
    g = render_backward(cloud, frame, out, ups["color"], ups["depth"],
                        ups["feature"], ups["alpha"])
    for name in ("positions", "rotations", "log_scales", "opacity_logits",
                 "colors_raw", "features"):
        arr = getattr(cloud, name)
        fd = central_difference(loss, arr, np.arange(arr.size))
        assert rel_err(getattr(g, name).reshape(-1), fd).max() < 1e-3, name


def test_viewspace_stats_cover_visible_gaussians(rng):
    cloud = random_cloud(rng, k=12)
    frame = simple_frame(24)
    out = render(cloud, frame, RasterConfig())
    g = render_backward(cloud, frame, out, np.ones((24, 24, 3)))
    assert g.viewspace_index.size == len(out.record.proj)
    assert np.all(g.viewspace_norm >= 0)


def test_stale_record_rejected(rng):
    cloud = random_cloud(rng, k=6)
    other = random_cloud(rng, k=7)
    frame = simple_frame(16)
    out = render(cloud, frame, RasterConfig())
    with pytest.raises(ContractViolation):
        render_backward(other, frame, out)
