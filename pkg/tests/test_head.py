import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deferred_diffusion import head
from deferred_diffusion.head import (
    D_EXP,
    D_ID,
    FitConfig,
    PointCloud,
    build_mesh,
    deform,
    deform_jacobian,
    export_obj,
    fit_codes,
    load_obj,
    sample_pointcloud,
    signed_distance,
    toy_sdf,
)

from helpers import planted_problem

Z_ID = np.array([0.3, -0.2, 0.1, 0.5])


def point_triangle_distance(p, a, b, c):
    """Brute-force distance to a triangle: interior projection or the closest of the three edges."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    # barycentrics of the projection
    area = np.dot(np.cross(b - a, c - a), n)
    u = np.dot(np.cross(c - b, q - b), n) / area
    v = np.dot(np.cross(a - c, q - c), n) / area
    w = 1 - u - v
    if u >= 0 and v >= 0 and w >= 0:
        return abs(np.dot(p - a, n))

    def seg(p, x, y):
        t = np.clip(np.dot(p - x, y - x) / np.dot(y - x, y - x), 0, 1)
        return np.linalg.norm(p - (x + t * (y - x)))

    return min(seg(p, a, b), seg(p, b, c), seg(p, c, a))


def test_vertex_count_and_faces():
    m = build_mesh(resolution=8)
    assert m.num_vertices == 10 * 8**2 + 2
    assert m.faces.min() >= 0 and m.faces.max() < m.num_vertices
    np.testing.assert_allclose(np.linalg.norm(m.normals, axis=1), 1.0, atol=1e-6)
    assert m.canonical.shape == (m.num_vertices, 5)


def test_neutral_is_canonical():
    m = build_mesh(Z_ID, np.zeros(D_EXP))
    assert np.array_equal(m.canonical[:, :3], m.vertices)


def test_deterministic():
    z = np.linspace(-0.5, 0.5, D_EXP)
    a, b = build_mesh(Z_ID, z), build_mesh(Z_ID, z)
    for f in ("vertices", "faces", "canonical", "normals"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_jaw_displacement_closed_form():
    closed = build_mesh(Z_ID, np.zeros(D_EXP))
    z = np.zeros(D_EXP)
    z[head.JAW] = 1.0
    opened = build_mesh(Z_ID, z)
    disp = opened.vertices - closed.vertices
    x = closed.canonical[:, :3]
    # smoothstep band below the mouth times a front mask, along the jaw direction
    t = np.clip((head.MOUTH_Y - x[:, 1]) / head.JAW_BAND, 0, 1)
    below = t * t * (3 - 2 * t)
    f = np.clip((x[:, 2] + 0.1) / 0.6, 0, 1)
    front = f * f * (3 - 2 * f)
    expected = head.JAW_AMPLITUDE * (below * front)[:, None] * head.JAW_DIRECTION
    np.testing.assert_allclose(disp, expected, atol=1e-12)
    lower = x[:, 1] < head.MOUTH_Y - head.JAW_BAND
    assert np.abs(disp[lower]).max() > 0.1
    assert np.abs(disp[x[:, 1] > head.MOUTH_Y]).max() == 0
    np.testing.assert_allclose(np.linalg.norm(disp, axis=1).max(),
                               head.JAW_AMPLITUDE * np.linalg.norm(head.JAW_DIRECTION) * (below * front).max())


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=D_EXP, max_size=D_EXP))
def test_canonical_consistency(z):
    m = build_mesh(Z_ID, z)
    np.testing.assert_allclose(deform(m.canonical, z), m.vertices, atol=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=D_EXP, max_size=D_EXP))
def test_jacobian_matches_finite_differences(z):
    z = np.asarray(z)
    x = build_mesh(Z_ID, None, 8).canonical[::7, :3]
    jac = deform_jacobian(x, z)
    h = 1e-6
    for k in range(D_EXP):
        dz = np.zeros(D_EXP)
        dz[k] = h
        fd = (deform(x, z + dz) - deform(x, z - dz)) / (2 * h)
        scale = max(np.abs(jac[:, :, k]).max(), 1e-3)
        assert np.abs(fd - jac[:, :, k]).max() / scale < 1e-4


def test_ambient_jaw_modulation():
    z = np.zeros(D_EXP)
    z[head.JAW] = 1.0
    a = build_mesh(Z_ID, None).canonical[:, 3:]
    b = build_mesh(Z_ID, z).canonical[:, 3:]
    assert np.array_equal(a[:, 0], b[:, 0])
    np.testing.assert_allclose(b[:, 1], 1.5 * a[:, 1], atol=1e-15)
    assert np.all(np.abs(a) <= 1)


def test_resolution_rejected():
    with pytest.raises(ValueError):
        build_mesh(resolution=0)
    with pytest.raises(ValueError):
        build_mesh(np.zeros(3))


def test_sdf_on_surface_and_inside():
    m = build_mesh(Z_ID, np.linspace(0, 0.5, D_EXP))
    d = signed_distance(m, m.vertices)
    assert np.abs(d).max() <= 0.01 * m.mean_edge_length()
    assert toy_sdf(np.zeros(3), Z_ID, np.linspace(0, 0.5, D_EXP)) < 0
    assert toy_sdf(np.array([0, 0, 3.0]), Z_ID) > 0


def test_sdf_matches_brute_force():
    rng = np.random.default_rng(0)
    m = build_mesh(Z_ID, rng.uniform(-0.5, 0.5, D_EXP), resolution=4)
    pts = rng.uniform(-1.5, 1.5, (40, 3))
    d = signed_distance(m, pts)
    tri = m.vertices[m.faces]
    brute = np.array([min(point_triangle_distance(p, *t) for t in tri) for p in pts])
    np.testing.assert_allclose(np.abs(d), brute, atol=1e-10)
    # sign: points well outside the bounding box are outside
    assert np.all(signed_distance(m, pts * 3)[np.linalg.norm(pts, axis=1) > 1] > 0)


def test_sample_on_surface():
    rng = np.random.default_rng(1)
    m = build_mesh(Z_ID, None)
    cloud = sample_pointcloud(m, 300, rng)
    assert np.abs(signed_distance(m, cloud.points)).max() < 1e-9
    one = sample_pointcloud(m, 1, rng)
    assert len(one) == 1 and abs(signed_distance(m, one.points)[0]) < 1e-9
    with pytest.raises(ValueError):
        sample_pointcloud(m, 0, rng)


def test_sampling_is_area_weighted():
    m = build_mesh(Z_ID, None, resolution=2)
    n = 10_000
    cloud = sample_pointcloud(m, n, np.random.default_rng(2))
    counts = np.bincount(cloud.face_ids, minlength=len(m.faces))
    p = m.face_areas() / m.face_areas().sum()
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1)
    # chi-square over all faces stays in a generous band around its mean (F - 1)
    chi2 = np.sum((counts - n * p) ** 2 / (n * p))
    assert chi2 < len(p) + 6 * np.sqrt(2 * len(p))


def test_fit_fixed_point():
    _, z_id, z_exp, cloud = planted_problem(3)
    res = fit_codes(cloud, (z_id, z_exp), FitConfig(max_iters=5))
    assert res.residual < 1e-9
    np.testing.assert_allclose(res.z_id, z_id, atol=1e-6)
    np.testing.assert_allclose(res.z_exp, z_exp, atol=1e-6)


def test_fit_zero_iterations_returns_init():
    _, z_id, z_exp, cloud = planted_problem(4)
    init = (z_id + 0.1, z_exp - 0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = fit_codes(cloud, init, FitConfig(max_iters=0))
    assert res.iterations == 0
    assert np.array_equal(res.z_id, init[0]) and np.array_equal(res.z_exp, init[1])
    assert res.history == [res.residual]


def test_fit_recovers_planted_codes():
    rng, z_id, z_exp, cloud = planted_problem(5)
    init = (z_id + rng.choice([-0.1, 0.1], D_ID), z_exp + rng.choice([-0.1, 0.1], D_EXP))
    res = fit_codes(cloud, init)
    err = np.abs(np.concatenate([res.z_id - z_id, res.z_exp - z_exp])).max()
    assert err < 0.05
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_fit_warns_when_budget_exhausted():
    rng, z_id, z_exp, cloud = planted_problem(6)
    with pytest.warns(UserWarning, match="did not converge"):
        res = fit_codes(cloud, (z_id + 0.1, z_exp + 0.1), FitConfig(max_iters=1))
    assert not res.converged
    assert res.residual <= res.history[0]


def test_fit_rejects_empty_cloud():
    with pytest.raises(ValueError):
        fit_codes(PointCloud(np.zeros((0, 3))), (None, None))


def test_obj_round_trip(tmp_path):
    m = build_mesh(Z_ID, np.full(D_EXP, 0.2), resolution=3)
    export_obj(m, tmp_path / "head.obj")
    assert (tmp_path / "head.canonical.txt").exists()
    back = load_obj(tmp_path / "head.obj")
    assert np.array_equal(back.faces, m.faces)
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)
    np.testing.assert_allclose(back.canonical, m.canonical, atol=1e-6)
