"""Procedural morphable head used as proxy geometry.

An identity code shapes a geodesic icosphere into a neutral head whose vertex
positions *are* the canonical spatial coordinates.  An expression code then
deforms canonical points analytically (local bumps followed by a rigid neck
rotation), so the canonical coordinate of every posed vertex is known exactly.
Two ambient coordinates tag the eye and mouth regions; the mouth channel is
stretched by jaw opening so upper and lower lips separate in canonical space.

Axes: x to the head's left-right, y up, z out of the face.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

D_ID = 4
D_EXP = 8

EXPRESSION_NAMES = (
    "jaw_open",
    "mouth_left",
    "mouth_right",
    "brow_raise",
    "eye_close",
    "cheek_puff",
    "head_pitch",
    "head_yaw",
)
JAW, MOUTH_L, MOUTH_R, BROW, EYE, CHEEK, PITCH, YAW = range(D_EXP)

BASE_RADII = np.array([0.78, 1.0, 0.88])
AXIS_SCALE = 0.15
NOSE_CENTER = np.array([0.0, -0.05, 1.0])  # on the unit template
NOSE_SIGMA = 0.22
NOSE_HEIGHT = 0.16
NOSE_GAIN = 0.5

MOUTH_Y = -0.42
JAW_AMPLITUDE = 0.18
JAW_DIRECTION = np.array([0.0, -1.0, -0.3])
JAW_BAND = 0.25
PITCH_RANGE = 0.35
YAW_RANGE = 0.6
NECK_PIVOT = np.array([0.0, -0.9, -0.1])


def _gauss(x: np.ndarray, center, sigma: float) -> np.ndarray:
    d2 = np.sum((x - np.asarray(center)) ** 2, axis=-1)
    return np.exp(-0.5 * d2 / sigma**2)


def smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


# Expression bumps: (center, sigma, displacement per unit code).  Symmetric
# pairs are listed twice with mirrored x.
_BUMPS: dict[int, list[tuple[tuple[float, float, float], float, tuple[float, float, float]]]] = {
    MOUTH_L: [((0.30, -0.40, 0.78), 0.16, (0.09, 0.04, -0.05))],
    MOUTH_R: [((-0.30, -0.40, 0.78), 0.16, (-0.09, 0.04, -0.05))],
    BROW: [
        ((0.26, 0.36, 0.82), 0.18, (0.0, 0.07, 0.04)),
        ((-0.26, 0.36, 0.82), 0.18, (0.0, 0.07, 0.04)),
    ],
    EYE: [
        ((0.27, 0.14, 0.80), 0.13, (0.0, -0.03, 0.06)),
        ((-0.27, 0.14, 0.80), 0.13, (0.0, -0.03, 0.06)),
    ],
    CHEEK: [
        ((0.48, -0.22, 0.62), 0.2, (0.08, 0.0, 0.05)),
        ((-0.48, -0.22, 0.62), 0.2, (-0.08, 0.0, 0.05)),
    ],
}

EYE_CENTERS = np.array([[0.27, 0.14, 0.80], [-0.27, 0.14, 0.80]])
MOUTH_CENTER = np.array([0.0, MOUTH_Y, 0.80])


@dataclass
class ProxyMesh:
    vertices: np.ndarray
    faces: np.ndarray
    canonical: np.ndarray
    normals: np.ndarray
    z_id: np.ndarray | None = None
    z_exp: np.ndarray | None = None

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    def face_normals(self) -> np.ndarray:
        return face_normals(self.vertices, self.faces)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def mean_edge_length(self) -> float:
        tri = self.vertices[self.faces]
        e = np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=2)
        return float(e.mean())

    @classmethod
    def empty(cls) -> "ProxyMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 5)), np.zeros((0, 3)))


@dataclass
class PointCloud:
    points: np.ndarray
    face_ids: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return int(self.points.shape[0])


# ---------------------------------------------------------------- template


_ICO_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    p = (1.0 + 5.0**0.5) / 2.0
    v = np.array(
        [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
         [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
         [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]],
        dtype=np.float64,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]],
        dtype=np.int64,
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def icosphere(frequency: int) -> tuple[np.ndarray, np.ndarray]:
    """Geodesic sphere: every icosahedron face split into ``frequency**2`` triangles.

    Returns unit vertices (10 f^2 + 2 of them) and outward-wound faces.
    """
    if frequency in _ICO_CACHE:
        v, f = _ICO_CACHE[frequency]
        return v.copy(), f.copy()
    base_v, base_f = _icosahedron()
    n = frequency
    ij = [(i, j) for i in range(n + 1) for j in range(n + 1 - i)]
    index = {key: k for k, key in enumerate(ij)}
    local = []
    for i in range(n):
        for j in range(n - i):
            local.append((index[(i, j)], index[(i + 1, j)], index[(i, j + 1)]))
            if i + j < n - 1:
                local.append((index[(i + 1, j)], index[(i + 1, j + 1)], index[(i, j + 1)]))
    ij = np.array(ij, dtype=np.float64) / n
    local = np.array(local)

    a, b, c = (base_v[base_f[:, k]] for k in range(3))
    pts = a[:, None] + ij[None, :, :1] * (b - a)[:, None] + ij[None, :, 1:] * (c - a)[:, None]
    pts = pts.reshape(-1, 3)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    faces = (local[None] + (np.arange(len(base_f)) * len(ij))[:, None, None]).reshape(-1, 3)

    keys = np.round(pts * 1e9).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    verts = pts[first[order]]
    faces = remap[inverse.reshape(-1)][faces]

    tri = verts[faces]
    n_f = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n_f, tri.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    _ICO_CACHE[frequency] = (verts, faces)
    return verts.copy(), faces.copy()


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], n)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.maximum(norm, 1e-300)


# ---------------------------------------------------------------- shaping


def _as_code(z, dim: int, name: str) -> np.ndarray:
    z = np.zeros(dim) if z is None else np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape != (dim,):
        raise ValueError(f"{name} must have {dim} entries, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} must be finite")
    return z


def identity_shape(template: np.ndarray, z_id) -> np.ndarray:
    """Neutral head for identity ``z_id`` = (width, height, depth, nose)."""
    z_id = _as_code(z_id, D_ID, "z_id")
    radii = BASE_RADII * (1.0 + AXIS_SCALE * z_id[:3])
    x = template * radii
    nose = NOSE_HEIGHT * (1.0 + NOSE_GAIN * z_id[3]) * _gauss(template, NOSE_CENTER, NOSE_SIGMA)
    x = x + nose[:, None] * template
    # flatten the back of the skull slightly so the head is not an ellipsoid
    back = smoothstep(-template[:, 2] / 0.8)
    x[:, 2] *= 1.0 - 0.12 * back
    return x


def _jaw_weight(x_can: np.ndarray) -> np.ndarray:
    below = smoothstep((MOUTH_Y - x_can[:, 1]) / JAW_BAND)
    front = smoothstep((x_can[:, 2] + 0.1) / 0.6)
    return below * front


def expression_basis(x_can: np.ndarray) -> np.ndarray:
    """Per-vertex displacement for a unit value of each local component: (V, 6, 3)."""
    x = np.asarray(x_can, dtype=np.float64)[:, :3]
    basis = np.zeros((x.shape[0], 6, 3))
    basis[:, JAW] = JAW_AMPLITUDE * _jaw_weight(x)[:, None] * JAW_DIRECTION
    for comp, bumps in _BUMPS.items():
        for center, sigma, disp in bumps:
            basis[:, comp] += _gauss(x, center, sigma)[:, None] * np.asarray(disp)
    return basis


def _rotation(pitch: float, yaw: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Yaw (about y) after pitch (about x); returns R, dR/dpitch, dR/dyaw."""
    cp, sp, cy, sy = np.cos(pitch), np.sin(pitch), np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    drx = np.array([[0, 0, 0], [0, -sp, -cp], [0, cp, -sp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    return ry @ rx, ry @ drx, dry @ rx


def head_rotation(z_exp) -> np.ndarray:
    z = _as_code(z_exp, D_EXP, "z_exp")
    return _rotation(PITCH_RANGE * z[PITCH], YAW_RANGE * z[YAW])[0]


def deform(x_can, z_exp) -> np.ndarray:
    """Map canonical spatial points to posed space for expression ``z_exp``."""
    z = _as_code(z_exp, D_EXP, "z_exp")
    x = np.asarray(x_can, dtype=np.float64)[:, :3]
    local = x + np.einsum("k,vkd->vd", z[:6], expression_basis(x))
    rot = _rotation(PITCH_RANGE * z[PITCH], YAW_RANGE * z[YAW])[0]
    # written as an increment so that a zero rotation leaves points bit-exact
    return local + (local - NECK_PIVOT) @ (rot - np.eye(3)).T


def deform_jacobian(x_can, z_exp) -> np.ndarray:
    """Analytic d(posed)/d(z_exp): (V, 3, D_EXP)."""
    z = _as_code(z_exp, D_EXP, "z_exp")
    x = np.asarray(x_can, dtype=np.float64)[:, :3]
    basis = expression_basis(x)
    local = x + np.einsum("k,vkd->vd", z[:6], basis)
    rot, d_pitch, d_yaw = _rotation(PITCH_RANGE * z[PITCH], YAW_RANGE * z[YAW])
    jac = np.zeros((x.shape[0], 3, D_EXP))
    jac[:, :, :6] = np.einsum("ij,vkj->vik", rot, basis)
    rel = local - NECK_PIVOT
    jac[:, :, PITCH] = PITCH_RANGE * rel @ d_pitch.T
    jac[:, :, YAW] = YAW_RANGE * rel @ d_yaw.T
    return jac


def ambient_coordinates(x_can: np.ndarray, z_exp) -> np.ndarray:
    """Two ambient coordinates in [-1, 1]: eye-region tag and signed lip tag.

    The lip tag is scaled by jaw opening so the two lips drift apart in
    canonical space when the mouth opens.
    """
    z = _as_code(z_exp, D_EXP, "z_exp")
    x = np.asarray(x_can, dtype=np.float64)[:, :3]
    eye = np.maximum(_gauss(x, EYE_CENTERS[0], 0.12), _gauss(x, EYE_CENTERS[1], 0.12))
    mouth = _gauss(x, MOUTH_CENTER, 0.2) * np.tanh((x[:, 1] - MOUTH_Y) / 0.05)
    jaw = float(np.clip(z[JAW], -1.0, 1.0))
    amb = np.stack([2.0 * eye - 1.0, mouth * (1.0 + 0.5 * jaw) / 1.5], axis=1)
    return amb


def build_mesh(z_id=None, z_exp=None, resolution: int = 8) -> ProxyMesh:
    """Posed proxy mesh with 5-D canonical coordinates.

    ``resolution`` is the geodesic subdivision frequency (``10 r^2 + 2``
    vertices; r = 8 gives 642).
    """
    if resolution < 1:
        raise ValueError("resolution must be positive")
    z_id = _as_code(z_id, D_ID, "z_id")
    z_exp = _as_code(z_exp, D_EXP, "z_exp")
    template, faces = icosphere(int(resolution))
    neutral = identity_shape(template, z_id)
    posed = deform(neutral, z_exp)
    canonical = np.concatenate([neutral, ambient_coordinates(neutral, z_exp)], axis=1)
    return ProxyMesh(posed, faces, canonical, vertex_normals(posed, faces), z_id.copy(), z_exp.copy())


# ---------------------------------------------------------------- SDF


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point to ``p`` on each triangle (a, b, c); all arrays broadcast over leading dims."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + v[..., None] * ab + w[..., None] * ac

        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(m[..., None], a + t_ab[..., None] * ab, out)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(m[..., None], a + t_ac[..., None] * ac, out)
        e = (d4 - d3) + (d5 - d6)
        t_bc = np.where(e != 0, (d4 - d3) / e, 0.0)
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        out = np.where(m[..., None], b + t_bc[..., None] * (c - b), out)

    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    return out


def signed_distance(mesh: ProxyMesh, points, candidates: int = 12) -> np.ndarray:
    """Signed distance from ``points`` (P, 3) to ``mesh``; negative inside.

    Exact: faces are ranked by a bounding-sphere lower bound, the best
    ``candidates`` are evaluated, then every face whose bound still beats the
    running minimum is evaluated too.  The sign comes from the normal of the
    nearest face.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(mesh.faces) == 0:
        return np.full(len(pts), np.inf)
    tri = mesh.vertices[mesh.faces]
    fn = face_normals(mesh.vertices, mesh.faces)
    centroid = tri.mean(axis=1)
    radius = np.linalg.norm(tri - centroid[:, None], axis=2).max(axis=1)
    lower = np.sqrt(((pts[:, None, :] - centroid[None]) ** 2).sum(-1)) - radius[None]

    k = min(candidates, len(tri))
    first = np.argpartition(lower, k - 1, axis=1)[:, :k]
    rows = np.repeat(np.arange(len(pts)), k)
    cols = first.reshape(-1)
    d2 = _pair_d2(pts, tri, rows, cols).reshape(len(pts), k)
    best = d2.min(axis=1)
    best_face = first[np.arange(len(pts)), d2.argmin(axis=1)]

    mask = lower < np.sqrt(best)[:, None]
    mask[np.arange(len(pts))[:, None], first] = False
    rows, cols = np.nonzero(mask)
    if len(rows):
        extra = _pair_d2(pts, tri, rows, cols)
        order = np.lexsort((extra, rows))
        rows, cols, extra = rows[order], cols[order], extra[order]
        head = np.r_[True, rows[1:] != rows[:-1]]
        r, c, e = rows[head], cols[head], extra[head]
        better = e < best[r]
        best[r[better]] = e[better]
        best_face[r[better]] = c[better]

    q = closest_points_on_triangles(pts, tri[best_face, 0], tri[best_face, 1], tri[best_face, 2])
    dist = np.sqrt(best)
    side = np.sum((pts - q) * fn[best_face], axis=-1)
    return np.where(side < 0, -dist, dist)


def _pair_d2(pts, tri, rows, cols):
    p = pts[rows]
    q = closest_points_on_triangles(p, tri[cols, 0], tri[cols, 1], tri[cols, 2])
    return np.sum((p - q) ** 2, axis=-1)


def toy_sdf(x, z_id=None, z_exp=None, resolution: int = 8):
    """Signed distance to the proxy surface for codes (z_id, z_exp).

    A single 3-vector returns a float; a (P, 3) array returns P values.
    """
    x = np.asarray(x, dtype=np.float64)
    d = signed_distance(build_mesh(z_id, z_exp, resolution), x.reshape(-1, 3))
    return float(d[0]) if x.ndim == 1 else d


# ---------------------------------------------------------------- sampling & fitting


def sample_pointcloud(mesh: ProxyMesh, n: int, rng: np.random.Generator, sigma: float = 0.0) -> PointCloud:
    """``n`` surface points, faces picked proportionally to area."""
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas()
    face_ids = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face_ids]]
    pts = np.einsum("nk,nkd->nd", w, tri)
    if sigma > 0:
        pts = pts + sigma * rng.standard_normal(pts.shape)
    return PointCloud(pts, face_ids)


@dataclass
class FitConfig:
    max_iters: int = 40
    resolution: int = 8
    fd_step: float = 1e-4
    prior_weight: float = 0.0
    irls_floor: float = 1e-5
    damping: float = 1e-3
    tol: float = 1e-9


@dataclass
class FitResult:
    z_id: np.ndarray
    z_exp: np.ndarray
    residual: float
    converged: bool
    iterations: int
    history: list[float]


def fit_codes(cloud: PointCloud | np.ndarray, init, config: FitConfig | None = None) -> FitResult:
    """Fit (z_id, z_exp) by minimizing mean |sdf| over the cloud.

    Levenberg-Marquardt on IRLS-reweighted residuals with a central
    finite-difference Jacobian; a step is accepted only if it lowers the L1
    objective, so ``history`` is non-increasing.
    """
    cfg = config or FitConfig()
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("empty point cloud")
    z_id0 = _as_code(init[0], D_ID, "z_id")
    z_exp0 = _as_code(init[1], D_EXP, "z_exp")
    theta = np.concatenate([z_id0, z_exp0])
    n = len(points)
    sqrt_prior = np.sqrt(cfg.prior_weight)

    def residuals(t):
        return signed_distance(build_mesh(t[:D_ID], t[D_ID:], cfg.resolution), points)

    def objective(r, t):
        return float(np.mean(np.abs(r)) + cfg.prior_weight * np.dot(t, t))

    r = residuals(theta)
    best = objective(r, theta)
    history = [best]
    lam = cfg.damping
    converged = cfg.max_iters == 0 and best == 0.0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if best <= cfg.tol:
            converged = True
            break
        jac = np.empty((n, theta.size))
        for k in range(theta.size):
            step = np.zeros_like(theta)
            step[k] = cfg.fd_step
            jac[:, k] = (residuals(theta + step) - residuals(theta - step)) / (2 * cfg.fd_step)
        w = 1.0 / np.maximum(np.abs(r), cfg.irls_floor) / n
        jtj = jac.T @ (w[:, None] * jac)
        grad = jac.T @ (w * r)
        if sqrt_prior:
            jtj += cfg.prior_weight * np.eye(theta.size)
            grad += cfg.prior_weight * theta
        accepted = False
        while lam < 1e8:
            delta = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-12), -grad)
            cand = theta + delta
            r_c = residuals(cand)
            obj = objective(r_c, cand)
            if obj < best:
                theta, r = cand, r_c
                improvement = best - obj
                best = obj
                lam = max(lam / 3.0, 1e-9)
                accepted = True
                break
            lam *= 10.0
        history.append(best)
        if not accepted or improvement <= cfg.tol * max(best, 1e-12):
            converged = True
            break
    else:
        converged = converged or best <= cfg.tol
    if not converged:
        warnings.warn(f"fit_codes did not converge in {cfg.max_iters} iterations (residual {best:.3g})")
    return FitResult(theta[:D_ID].copy(), theta[D_ID:].copy(), best, converged, it if cfg.max_iters else 0, history)


# ---------------------------------------------------------------- export


def export_obj(mesh: ProxyMesh, path) -> None:
    """Write positions and faces as OBJ plus ``<stem>.canonical.txt`` (V x 5 table)."""
    path = Path(path)
    lines = ["# proxy head mesh"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"vn {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.normals]
    lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n")
    header = "x_can y_can z_can amb0 amb1"
    np.savetxt(path.with_suffix(".canonical.txt"), mesh.canonical, fmt="%.6f", header=header)


def load_obj(path) -> ProxyMesh:
    """Inverse of :func:`export_obj` (canonical table read if present)."""
    path = Path(path)
    verts, norms, faces = [], [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "vn":
            norms.append([float(t) for t in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(t.split("/")[0]) - 1 for t in parts[1:4]])
    v = np.array(verts).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    side = path.with_suffix(".canonical.txt")
    can = np.loadtxt(side).reshape(-1, 5) if side.exists() else np.concatenate([v, np.zeros((len(v), 2))], 1)
    n = np.array(norms).reshape(-1, 3) if norms else vertex_normals(v, f)
    return ProxyMesh(v, f, can, n)
