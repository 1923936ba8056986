import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from deferred_diffusion import head
from deferred_diffusion.evaluate import (
    PSNR_CAP,
    MetricReport,
    ReenactmentJob,
    marker_distance,
    psnr,
    render_frame,
    run_protocol,
    sample_images,
    temporal_slice,
)
from deferred_diffusion.features import lookup
from deferred_diffusion.pipeline import build_model
from deferred_diffusion.raster import Camera, rasterize
from deferred_diffusion.shading import Appearance, detail_mesh, marker_pixels, shade_groundtruth

from conftest import tiny_train

Z_ID = np.array([0.3, -0.2, 0.1, 0.5])


def _two_loop_psnr(a, b):
    total = 0.0
    H, W, C = a.shape
    for i in range(H):
        for j in range(W):
            for c in range(C):
                total += (float(a[i, j, c]) - float(b[i, j, c])) ** 2
    return 10 * np.log10(1.0 / (total / (H * W * C)))


def test_psnr_cases():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 0.9, (8, 9, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    for _ in range(5):
        x, y = rng.uniform(0, 1, (2, 6, 7, 3))
        assert psnr(x, y) == pytest.approx(_two_loop_psnr(x, y), rel=1e-12)
    with pytest.raises(ValueError):
        psnr(a, a[:-1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_psnr_symmetric(seed):
    x, y = np.random.default_rng(seed).uniform(0, 1, (2, 5, 5, 3))
    assert psnr(x, y) == psnr(y, x)


def _textured(seed=0, n=3, size=48):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 1, (n, size // 4, size // 4, 3))
    return np.repeat(np.repeat(base, 4, axis=1), 4, axis=2)


def test_marker_distance_identity_and_shift():
    gt = _textured()
    exp = np.array([[[20.0, 20.0], [24.0, 30.0], [28.0, 18.0]]] * 3)
    res = marker_distance(gt, gt, exp)
    assert res.distance == 0.0 and res.found == 9 and res.excluded == 0
    shifted = np.roll(gt, 2, axis=2)
    res = marker_distance(shifted, gt, exp)
    assert res.found > 0
    assert res.distance == pytest.approx(2.0, abs=0.5)
    # a marker outside the frame or masked invisible is excluded
    vis = np.ones((3, 3), bool)
    vis[:, 0] = False
    res = marker_distance(gt, gt, exp, vis)
    assert res.found == 6
    noise = np.random.default_rng(9).uniform(0, 1, gt.shape)
    res = marker_distance(noise, gt, exp, threshold=0.99)
    assert res.found == 0 and res.excluded == 9 and res.distance == float("inf")


def test_temporal_slice_basic():
    frames = np.random.default_rng(0).uniform(-1, 1, (10, 12, 14, 3))
    s = temporal_slice(frames, 5, (2, 9))
    assert s.shape == (7, 10, 3)
    assert np.array_equal(s[:, 3], frames[3, 2:9, 5])
    const = np.full((10, 12, 14, 3), 0.25)
    assert np.all(temporal_slice(const, 0) == 0.25)
    with pytest.raises(ValueError):
        temporal_slice(frames, 14)
    with pytest.raises(ValueError):
        temporal_slice(frames, -1)


def test_slice_tracks_marker_through_head_nod():
    # forehead marker sits on the vertical midline; nodding moves it along one column
    app = Appearance()
    cam = Camera.look_at((0, 0, 3.2), focal=75.0, size=(64, 64))
    k = 7
    pitches = np.linspace(-0.8, 0.8, 8)
    frames, rows = [], []
    for p in pitches:
        z = np.zeros(head.D_EXP)
        z[head.PITCH] = p
        frames.append(shade_groundtruth(detail_mesh(Z_ID, z, app), cam, app))
        rc, vis = marker_pixels(Z_ID, z, cam, app)
        assert vis[k]
        rows.append(rc[k, 0])
    col = int(round(marker_pixels(Z_ID, np.zeros(head.D_EXP), cam, app)[0][k, 1]))
    strip = (temporal_slice(np.stack(frames), col) + 1) / 2
    assert strip.shape == (64, len(pitches), 3)
    # compare chromaticity so shading does not matter
    chroma = strip / np.maximum(strip.sum(-1, keepdims=True), 1e-6)
    ref = app.marker_colors[k] / app.marker_colors[k].sum()
    dist = np.linalg.norm(chroma - ref, axis=-1)
    found = dist.argmin(axis=0)
    steps = np.diff(found)
    assert np.all(steps * np.sign(rows[-1] - rows[0]) >= 0) and found[0] != found[-1]
    np.testing.assert_allclose(found, rows, atol=1.5)


@pytest.fixture(scope="module")
def tiny_model(tiny_corpus):
    torch.manual_seed(0)
    cfg = tiny_train(mode="scratch")
    return build_model(tiny_corpus, cfg), cfg


def test_render_frame_deterministic(tiny_model, tiny_corpus):
    model, cfg = tiny_model
    s = cfg.make_schedule()
    cam = tiny_corpus.cameras[0]
    z = tiny_corpus.records[0].z_exp
    a = render_frame(model, Z_ID, z, cam, s, steps=4, seed=3)
    b = render_frame(model, Z_ID, z, cam, s, steps=4, seed=3)
    c = render_frame(model, Z_ID, z, cam, s, steps=4, seed=4)
    assert a.shape == (16, 16, 3) and np.isfinite(a).all()
    assert a.min() >= -1 and a.max() <= 1
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_sampling_independent_of_batching(tiny_model, tiny_corpus):
    model, cfg = tiny_model
    rs = tiny_corpus.records[:3]
    g = np.stack([r.gbuffer.stack() for r in rs])
    z = np.stack([r.z_exp for r in rs])
    s = cfg.make_schedule()
    full = sample_images(model, g, z, s, steps=3, seed=1, indices=[5, 6, 7], batch_size=3)
    one = sample_images(model, g[1:2], z[1:2], s, steps=3, seed=1, indices=[6])
    np.testing.assert_allclose(full[1], one[0], atol=1e-5)


def test_nonzero_snr_schedule_warns(tiny_model, tiny_corpus):
    model, _ = tiny_model
    s = tiny_train(zero_snr=False).make_schedule()
    with pytest.warns(RuntimeWarning, match="terminal SNR"):
        render_frame(model, Z_ID, np.zeros(head.D_EXP), tiny_corpus.cameras[0], s, steps=2)


def test_self_protocol_covers_holdout_frames(tiny_model, tiny_corpus, tmp_path):
    model, cfg = tiny_model
    rep = run_protocol(model, tiny_corpus, cfg.make_schedule(), ReenactmentJob(steps=2), tmp_path / "self")
    expected = {f"{s}/{r.key}" for s in ("holdout-view", "holdout-expression") for r in tiny_corpus.split(s)}
    assert set(rep.psnr_per_frame) == expected
    assert rep.frame_count == len(expected)
    assert all(np.isfinite(v) for v in rep.psnr_per_frame.values())
    assert all(d >= 0 for d in rep.marker_distance.values())
    assert "holdout-view/mean_image_baseline" in rep.psnr_mean
    back = MetricReport.from_json((tmp_path / "self" / "report.json").read_text())
    assert back == rep
    assert "psnr_mean.holdout-view =" in (tmp_path / "self" / "report.txt").read_text()
    rep2 = run_protocol(model, tiny_corpus, cfg.make_schedule(), ReenactmentJob(steps=2), tmp_path / "again")
    assert rep2.to_json() == rep.to_json()
    first = sorted((tmp_path / "self" / "holdout-view").iterdir())[0]
    assert first.read_bytes() == (tmp_path / "again" / "holdout-view" / first.name).read_bytes()


def test_cross_protocol_has_no_psnr(tiny_model, tiny_corpus, tmp_path):
    model, cfg = tiny_model
    driving = np.random.default_rng(0).uniform(-0.5, 0.5, (5, head.D_EXP))
    rep = run_protocol(model, tiny_corpus, cfg.make_schedule(), ReenactmentJob("cross", steps=2, driving=driving),
                       tmp_path)
    assert rep.frame_count == 5
    assert not rep.psnr_per_frame and not rep.psnr_mean and not rep.marker_distance
    assert len(list((tmp_path / "frames").glob("*.png"))) == 5
    assert list((tmp_path / "slices").glob("*.png"))
    with pytest.raises(ValueError):
        ReenactmentJob("cross", driving=np.zeros((0, head.D_EXP)))
    with pytest.raises(ValueError):
        ReenactmentJob("other")


def test_protocol_missing_split_errors(tiny_model, tiny_corpus):
    model, cfg = tiny_model
    with pytest.raises(ValueError, match="no"):
        run_protocol(model, tiny_corpus, cfg.make_schedule(), ReenactmentJob(steps=1, splits=("nonexistent",)))


def test_view_consistency_probe(tiny_model):
    # two cameras aimed so their centre pixel sees the same surface point
    model, _ = tiny_model
    mesh = head.build_mesh(Z_ID, np.zeros(head.D_EXP), 8)
    n = mesh.face_normals()
    f = int(np.argmax(n[:, 2]))
    point = mesh.vertices[mesh.faces[f]].mean(0)
    can = mesh.canonical[mesh.faces[f]].mean(0)
    size = 33
    feats = []
    for yaw in (-0.3, 0.3):
        d = n[f] + np.array([np.sin(yaw), 0.0, 0.0])
        eye = point + 2.5 * d / np.linalg.norm(d)
        g = rasterize(mesh, Camera.look_at(eye, point, focal=40.0, size=(size, size)))
        c = size // 2
        assert g.mask[c, c, 0] == 1
        np.testing.assert_allclose(g.canonical[c, c], can, atol=1e-9)
        feat, amb = lookup(model.atlas, g)
        ctl = model.control(torch.tensor(g.stack()[None].transpose(0, 3, 1, 2), dtype=torch.float32))
        assert np.allclose(ctl[0, :feat.shape[-1], c, c].detach().numpy(), feat[c, c], atol=1e-6)
        feats.append(np.concatenate([feat[c, c], amb[c, c]]))
    np.testing.assert_allclose(feats[0], feats[1], atol=1e-5)
    assert np.abs(feats[0]).max() > 0
