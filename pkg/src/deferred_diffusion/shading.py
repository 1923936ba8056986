"""Procedural ground-truth appearance for the synthetic captures.

Albedo is a function of canonical coordinates (so it sticks to the skin as
the head deforms) plus a few expression-driven effects the proxy geometry
cannot show: eyelids covering the eyes, forehead wrinkles, a dark mouth
interior and a slight upward slide of forehead skin when the brows rise.
Ground-truth meshes are denser than the proxy and carry small normal
displacements, so the proxy is only an approximation of what is imaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .head import (
    BROW,
    EYE,
    EYE_CENTERS,
    JAW,
    MOUTH_CENTER,
    MOUTH_Y,
    ProxyMesh,
    _gauss,
    build_mesh,
    deform,
    identity_shape,
    smoothstep,
    vertex_normals,
)
from .raster import Camera, GBuffer, rasterize

# Unit template directions of the tracking markers (face-front dots).
MARKER_DIRECTIONS = np.array(
    [
        [0.30, 0.45, 0.84],
        [-0.30, 0.45, 0.84],
        [0.55, -0.10, 0.83],
        [-0.55, -0.10, 0.83],
        [0.0, -0.78, 0.62],
        [0.42, -0.45, 0.79],
        [-0.42, -0.45, 0.79],
        [0.0, 0.68, 0.73],
    ]
)
MARKER_DIRECTIONS = MARKER_DIRECTIONS / np.linalg.norm(MARKER_DIRECTIONS, axis=1, keepdims=True)
MARKER_COLORS = np.array(
    [
        [1.0, 0.9, 0.1],
        [0.1, 0.85, 0.95],
        [0.2, 0.9, 0.2],
        [0.95, 0.2, 0.9],
        [0.15, 0.3, 1.0],
        [1.0, 0.5, 0.0],
        [1.0, 1.0, 1.0],
        [0.55, 0.1, 0.95],
    ]
)

SKIN = np.array([0.86, 0.64, 0.52])
HAIR = np.array([0.24, 0.15, 0.09])
LIPS = np.array([0.72, 0.28, 0.30])
BROWS = np.array([0.20, 0.12, 0.08])
SCLERA = np.array([0.95, 0.95, 0.95])
IRIS = np.array([0.10, 0.22, 0.35])
LID = np.array([0.74, 0.52, 0.43])
MOUTH_INTERIOR = np.array([0.18, 0.04, 0.05])


@dataclass
class Appearance:
    seed: int = 0
    light_dir: tuple[float, float, float] = (-0.35, 0.45, 0.82)
    ambient: float = 0.4
    diffuse: float = 0.6
    background: tuple[float, float, float] = (0.18, 0.22, 0.30)
    detail_amplitude: float = 0.07
    detail_waves: int = 6
    freckles: int = 30
    displacement: float = 0.012
    gt_resolution: int = 16
    supersample: int = 2
    skin_slide: float = 0.05
    wrinkle_strength: float = 0.3
    marker_radius: float = 0.075
    marker_directions: np.ndarray = field(default_factory=lambda: MARKER_DIRECTIONS.copy())
    marker_colors: np.ndarray = field(default_factory=lambda: MARKER_COLORS.copy())

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        dirs = rng.standard_normal((self.detail_waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        self._waves = dirs * rng.uniform(7.0, 14.0, (self.detail_waves, 1))
        self._phases = rng.uniform(0, 2 * np.pi, self.detail_waves)
        self._tints = rng.uniform(-1, 1, (self.detail_waves, 3)) * np.array([1.0, 0.8, 0.6])
        f = rng.standard_normal((self.freckles, 3))
        f[:, 2] = np.abs(f[:, 2]) + 0.6
        self._freckles = f / np.linalg.norm(f, axis=1, keepdims=True)
        bump = rng.standard_normal((8, 3))
        bump /= np.linalg.norm(bump, axis=1, keepdims=True)
        self._bump_waves = bump * rng.uniform(12.0, 22.0, (8, 1))
        self._bump_phases = rng.uniform(0, 2 * np.pi, 8)

    @property
    def light(self) -> np.ndarray:
        v = np.asarray(self.light_dir, dtype=np.float64)
        return v / np.linalg.norm(v)

    def marker_canonical(self, z_id) -> np.ndarray:
        """Canonical spatial positions of the markers for identity ``z_id``."""
        return identity_shape(self.marker_directions, z_id)


def forehead_weight(x: np.ndarray) -> np.ndarray:
    return smoothstep((x[:, 1] - 0.25) / 0.25) * smoothstep((x[:, 2] - 0.2) / 0.4) * (1.0 - smoothstep((x[:, 1] - 0.75) / 0.15))


def albedo(canonical: np.ndarray, z_exp, appearance: Appearance, z_id=None) -> np.ndarray:
    """RGB albedo in [0, 1] at canonical coordinates (P, 5)."""
    can = np.asarray(canonical, dtype=np.float64)
    z = np.zeros(8) if z_exp is None else np.asarray(z_exp, dtype=np.float64)
    x = can[:, :3].copy()
    amb_mouth = can[:, 4]
    brow = max(z[BROW], 0.0)
    x[:, 1] -= appearance.skin_slide * brow * forehead_weight(x)

    d = np.sin(x @ appearance._waves.T + appearance._phases)
    col = SKIN + appearance.detail_amplitude * (d @ appearance._tints) / np.sqrt(appearance.detail_waves)

    unit = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-9)
    freckle = np.zeros(len(x))
    for f in appearance._freckles:
        freckle = np.maximum(freckle, np.exp(-0.5 * np.sum((unit - f) ** 2, 1) / 0.03**2))
    col = col * (1.0 - 0.25 * freckle[:, None])

    hair = np.maximum(smoothstep((x[:, 1] - 0.55) / 0.2), smoothstep((-x[:, 2] - 0.05) / 0.3))
    hair_col = HAIR * (1.0 + 0.25 * np.sin(38.0 * x[:, 0] + 5.0 * x[:, 1]))[:, None]
    col = col * (1 - hair[:, None]) + hair_col * hair[:, None]

    wrinkle = forehead_weight(x) * (0.5 + 0.5 * np.sin(45.0 * x[:, 1])) ** 4
    col = col * (1.0 - appearance.wrinkle_strength * brow * wrinkle)[:, None]

    brows = np.maximum(_gauss(x, EYE_CENTERS[0] + [0.0, 0.13, 0.04], 0.07),
                       _gauss(x, EYE_CENTERS[1] + [0.0, 0.13, 0.04], 0.07))
    brows = np.clip(brows * 1.6 * (np.abs(x[:, 1] - EYE_CENTERS[0, 1] - 0.13) < 0.05), 0, 1)
    col = col * (1 - brows[:, None]) + BROWS * brows[:, None]

    lid = float(np.clip(z[EYE], 0.0, 1.0))
    for c in EYE_CENTERS:
        r = np.sqrt(((x[:, 0] - c[0]) / 0.09) ** 2 + ((x[:, 1] - c[1]) / 0.05) ** 2)
        eye = (1.0 - smoothstep((r - 0.8) / 0.4)) * (x[:, 2] > 0.3)
        iris = 1.0 - smoothstep((np.hypot(x[:, 0] - c[0], x[:, 1] - c[1]) - 0.025) / 0.02)
        eye_col = SCLERA * (1 - iris[:, None]) + IRIS * iris[:, None]
        eye_col = eye_col * (1 - lid) + LID * lid
        col = col * (1 - eye[:, None]) + eye_col * eye[:, None]

    mouth = _gauss(x, MOUTH_CENTER, 0.16) * (x[:, 2] > 0.3)
    lips = np.clip(3.0 * np.abs(amb_mouth) / 0.67, 0.0, 1.0) * smoothstep((mouth - 0.35) / 0.2)
    col = col * (1 - lips[:, None]) + LIPS * lips[:, None]
    jaw = float(np.clip(z[JAW], 0.0, 1.0))
    gap = (1.0 - smoothstep(np.abs(x[:, 1] - MOUTH_Y) / (0.012 + 0.05 * jaw))) * smoothstep((mouth - 0.3) / 0.2)
    col = col * (1 - jaw * gap[:, None]) + MOUTH_INTERIOR * (jaw * gap)[:, None]

    if appearance.marker_radius > 0:
        centers = appearance.marker_canonical(z_id)
        for c, mc in zip(centers, appearance.marker_colors):
            r = np.linalg.norm(x - c, axis=1) / appearance.marker_radius
            dot = 1.0 - smoothstep((r - 0.45) / 0.15)
            ring = (1.0 - smoothstep(np.abs(r - 0.8) / 0.2)) * (r < 1.2)
            col = col * (1 - ring[:, None]) + 0.05 * ring[:, None]
            col = col * (1 - dot[:, None]) + mc * dot[:, None]
    return np.clip(col, 0.0, 1.0)


def displacement(canonical: np.ndarray, appearance: Appearance) -> np.ndarray:
    x = np.asarray(canonical, dtype=np.float64)[:, :3]
    return appearance.displacement * np.sin(x @ appearance._bump_waves.T + appearance._bump_phases).mean(axis=1)


def detail_mesh(z_id, z_exp, appearance: Appearance) -> ProxyMesh:
    """Denser, bumpier version of the proxy head used only for ground truth."""
    m = build_mesh(z_id, z_exp, appearance.gt_resolution)
    offset = displacement(m.canonical, appearance)
    verts = m.vertices + offset[:, None] * m.normals
    return ProxyMesh(verts, m.faces, m.canonical, vertex_normals(verts, m.faces), m.z_id, m.z_exp)


def _scaled_camera(cam: Camera, k: int) -> Camera:
    return Camera(cam.focal * k, cam.cx * k, cam.cy * k, cam.rotation, cam.translation, cam.height * k, cam.width * k)


def shade_gbuffer(g: GBuffer, cam: Camera, appearance: Appearance, z_exp=None, z_id=None) -> np.ndarray:
    """Lambertian shading of a rasterized buffer; returns RGB in [0, 1]."""
    H, W = g.shape
    bg = np.asarray(appearance.background, dtype=np.float64)
    img = np.broadcast_to(bg, (H, W, 3)).copy()
    m = g.mask[..., 0] > 0
    if not m.any():
        return img
    alb = albedo(g.canonical[m], z_exp, appearance, z_id)
    light_cam = cam.rotation @ appearance.light
    lam = np.clip(g.normals[m] @ light_cam, 0.0, None)
    img[m] = alb * (appearance.ambient + appearance.diffuse * lam)[:, None]
    return np.clip(img, 0.0, 1.0)


def shade_groundtruth(mesh: ProxyMesh, cam: Camera, appearance: Appearance) -> np.ndarray:
    """Ground-truth RGB image in [-1, 1] (box-filtered over ``supersample``^2 samples)."""
    k = max(int(appearance.supersample), 1)
    big = _scaled_camera(cam, k) if k > 1 else cam
    g = rasterize(mesh, big)
    img = shade_gbuffer(g, big, appearance, mesh.z_exp, mesh.z_id)
    if k > 1:
        img = img.reshape(cam.height, k, cam.width, k, 3).mean(axis=(1, 3))
    return img * 2.0 - 1.0


def marker_pixels(z_id, z_exp, cam: Camera, appearance: Appearance, gbuffer: GBuffer | None = None,
                  depth_tolerance: float = 0.06):
    """Expected pixel positions (K, 2) as (row, col) and visibility of the markers.

    Visibility needs the marker to face the camera and, when a buffer is
    given, to be the front-most surface at its pixel.
    """
    z_exp = np.zeros(8) if z_exp is None else np.asarray(z_exp, dtype=np.float64)
    can = appearance.marker_canonical(z_id)
    slide = np.zeros_like(can)
    slide[:, 1] = appearance.skin_slide * max(z_exp[BROW], 0.0) * forehead_weight(can)
    posed = deform(can + slide, z_exp)
    uv, depth = cam.project(posed)
    rc = uv[:, ::-1] - 0.5
    eps = 1e-3
    normal = deform(can + slide + [0, 0, eps], z_exp) - posed
    facing = (normal @ cam.rotation.T)[:, 2] < 0
    inside = (rc[:, 0] >= 0) & (rc[:, 0] <= cam.height - 1) & (rc[:, 1] >= 0) & (rc[:, 1] <= cam.width - 1)
    visible = facing & inside & (depth > 0)
    if gbuffer is not None:
        for k in np.nonzero(visible)[0]:
            i, j = np.round(rc[k]).astype(int)
            if gbuffer.mask[i, j, 0] == 0 or abs(gbuffer.depth[i, j, 0] - depth[k]) > depth_tolerance:
                visible[k] = False
    return rc, visible
