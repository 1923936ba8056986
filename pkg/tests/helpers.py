"""Shared scene builders and oracles for the tests."""

import numpy as np
import torch

from deferred_diffusion import head
from deferred_diffusion.features import FeatureAtlas
from deferred_diffusion.head import ProxyMesh
from deferred_diffusion.raster import Camera, GBuffer, raycast_oracle


def random_triangle_mesh(rng: np.random.Generator, n: int = 50) -> ProxyMesh:
    """Soup of ``n`` random triangles around the origin with random 5-D attributes."""
    centers = rng.uniform(-0.8, 0.8, (n, 1, 3))
    verts = (centers + rng.normal(0, 0.35, (n, 3, 3))).reshape(-1, 3)
    faces = np.arange(3 * n).reshape(n, 3)
    normals = rng.normal(size=verts.shape)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    canonical = rng.uniform(-1, 1, (3 * n, 5))
    return ProxyMesh(verts, faces, canonical, normals)


def random_camera(rng: np.random.Generator, size: int = 64) -> Camera:
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    up = (0.0, 1.0, 0.0) if abs(d[1]) < 0.9 else (1.0, 0.0, 0.0)
    return Camera.look_at(3.5 * d, rng.uniform(-0.1, 0.1, 3), up, focal=rng.uniform(50, 90), size=(size, size))


def oracle_agreement(mesh: ProxyMesh, cam: Camera, g, depth_rtol: float = 1e-4, attr_atol: float = 1e-6):
    """Compare a G-buffer with the ray-casting oracle on non-silhouette pixels.

    A pixel is non-silhouette when it and its 4-neighbours are all covered in
    the G-buffer.  Returns (fraction agreeing, number compared, max relative
    depth error on agreeing pixels, mask agreement over all pixels).
    """
    H, W = g.shape
    m = g.mask[..., 0] > 0
    pad = np.pad(m, 1)
    interior = m & pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    agree = compared = 0
    mask_agree = 0
    worst = 0.0
    for i in range(H):
        for j in range(W):
            hit = raycast_oracle(mesh, cam, (i, j))
            mask_agree += (hit is not None) == m[i, j]
            if not interior[i, j]:
                continue
            compared += 1
            if hit is None:
                continue
            rel = abs(g.depth[i, j, 0] - hit.depth) / hit.depth
            ok = (rel <= depth_rtol and np.abs(g.canonical[i, j] - hit.canonical).max() <= attr_atol
                  and np.abs(g.normals[i, j] - hit.normal).max() <= attr_atol)
            if ok:
                agree += 1
                worst = max(worst, rel)
    return agree / max(compared, 1), compared, worst, mask_agree / (H * W)


LO, HI = np.array([-1.0, -1.2, -0.9]), np.array([1.0, 1.0, 1.3])


def make_atlas(G=6, F=3, mode="triplane", seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    a = FeatureAtlas(LO, HI, grid_size=G, ambient_size=G + 1, num_features=F, mode=mode, init_std=1.0,
                     generator=gen, dtype=dtype)
    return a


def scalar_bilinear(grid, u, v):
    """Independent four-corner oracle: grid (S, S, F), u row / v column in [0, 1]."""
    S = grid.shape[0]
    x, y = u * (S - 1), v * (S - 1)
    r0, c0 = min(int(np.floor(x)), S - 1), min(int(np.floor(y)), S - 1)
    r1, c1 = min(r0 + 1, S - 1), min(c0 + 1, S - 1)
    fr, fc = x - r0, y - c0
    return ((1 - fr) * (1 - fc) * grid[r0, c0] + (1 - fr) * fc * grid[r0, c1]
            + fr * (1 - fc) * grid[r1, c0] + fr * fc * grid[r1, c1])


def oracle_features(atlas, can):
    planes = atlas.planes.detach().numpy()
    amb = atlas.ambient.detach().numpy()
    lo, hi = atlas.bounds_lo.numpy(), atlas.bounds_hi.numpy()
    out = []
    for p in can:
        u = np.clip((p[:3] - lo) / (hi - lo), 0, 1)
        parts = [scalar_bilinear(planes[k], u[a], u[b]) for k, (a, b) in enumerate([(0, 1), (0, 2), (1, 2)])]
        ua = np.clip((p[3:5] + 1) / 2, 0, 1)
        parts.append(scalar_bilinear(amb, ua[0], ua[1]))
        out.append(np.concatenate(parts))
    return np.array(out)


def gbuffer_from_points(can):
    """1 x N G-buffer whose pixels carry the given canonical coordinates."""
    n = len(can)
    g = GBuffer.empty(1, n)
    g.canonical[0] = can
    g.mask[:] = 1
    g.depth[:] = 2.0
    g.normals[..., 2] = -1
    return g


def random_points(rng, n):
    xyz = rng.uniform(LO, HI, (n, 3))
    amb = rng.uniform(-1, 1, (n, 2))
    return np.concatenate([xyz, amb], 1)


def planted_problem(seed):
    rng = np.random.default_rng(seed)
    z_id = rng.uniform(-0.6, 0.6, head.D_ID)
    z_exp = rng.uniform(-0.6, 0.6, head.D_EXP)
    z_exp[head.JAW] = abs(z_exp[head.JAW])
    cloud = head.sample_pointcloud(head.build_mesh(z_id, z_exp), 400, rng)
    return rng, z_id, z_exp, cloud
