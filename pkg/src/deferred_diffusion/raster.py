"""Software rasterization of proxy meshes into geometry buffers.

Pinhole cameras follow the OpenCV convention (x right, y down, z forward);
pixel ``(i, j)`` is sampled at its center ``(u, v) = (j + 0.5, i + 0.5)``.
Triangles with any vertex behind the near plane are dropped; there is no
back-face culling and no anti-aliasing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .head import ProxyMesh

NEAR = 1e-3


@dataclass(frozen=True)
class Camera:
    focal: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.height < 8 or self.width < 8:
            raise ValueError("image must be at least 8x8")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), focal: float = 80.0,
                size: tuple[int, int] = (64, 64)) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        h, w = size
        return cls(float(focal), w / 2.0, h / 2.0, rot, -rot @ eye, int(h), int(w))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (u, v) and camera depth of world points."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = self.focal * pc[..., :2] / z[..., None] + np.array([self.cx, self.cy])
        return uv, z

    def pixel_rays(self) -> np.ndarray:
        """Camera-space ray directions through pixel centers, z component 1: (H, W, 3)."""
        j, i = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        return np.stack([(j - self.cx) / self.focal, (i - self.cy) / self.focal, np.ones_like(i)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "focal": self.focal, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "height": self.height, "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["focal"]), float(d["cx"]), float(d["cy"]), np.array(d["rotation"]),
                   np.array(d["translation"]), int(d["height"]), int(d["width"]))


@dataclass
class GBuffer:
    normals: np.ndarray  # (H, W, 3) camera space
    depth: np.ndarray  # (H, W, 1)
    canonical: np.ndarray  # (H, W, 5)
    mask: np.ndarray  # (H, W, 1)
    face_ids: np.ndarray | None = None  # (H, W), -1 on background
    barycentric: np.ndarray | None = None  # (H, W, 3) perspective-correct weights

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape[:2]

    @classmethod
    def empty(cls, height: int, width: int) -> "GBuffer":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width, 1)), np.zeros((height, width, 5)),
                   np.zeros((height, width, 1)), np.full((height, width), -1, dtype=np.int64),
                   np.zeros((height, width, 3)))

    def stack(self) -> np.ndarray:
        """Channels ``[normals 3 | depth 1 | canonical 5 | mask 1]``."""
        return np.concatenate([self.normals, self.depth, self.canonical, self.mask], axis=-1)

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "GBuffer":
        arr = np.asarray(arr)
        return cls(arr[..., 0:3], arr[..., 3:4], arr[..., 4:9], arr[..., 9:10])

    def crop_resize(self, box: tuple[int, int, int, int], size: tuple[int, int]) -> "GBuffer":
        """Nearest-neighbour crop-and-resize (attributes are never blended across the silhouette)."""
        top, left, h, w = box
        rows = top + ((np.arange(size[0]) + 0.5) * h / size[0]).astype(int)
        cols = left + ((np.arange(size[1]) + 0.5) * w / size[1]).astype(int)
        pick = (rows[:, None], cols[None, :])
        return GBuffer(self.normals[pick], self.depth[pick], self.canonical[pick], self.mask[pick],
                       None if self.face_ids is None else self.face_ids[pick],
                       None if self.barycentric is None else self.barycentric[pick])


def _screen_vertices(mesh: ProxyMesh, cam: Camera):
    pc = cam.to_camera(mesh.vertices)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.focal * pc[:, 0] / z + cam.cx
        v = cam.focal * pc[:, 1] / z + cam.cy
    return pc, u, v, z


def rasterize(mesh: ProxyMesh, cam: Camera) -> GBuffer:
    """Z-buffered rasterization with perspective-correct attribute interpolation.

    Every (face, pixel-center) pair inside a face's screen bounding box is
    tested with edge functions at once; the nearest covering face wins
    (ties broken by lower face index).
    """
    H, W = cam.height, cam.width
    out = GBuffer.empty(H, W)
    if len(mesh.faces) == 0:
        return out
    pc, u, v, z = _screen_vertices(mesh, cam)
    f = mesh.faces
    valid = np.all(z[f] > NEAR, axis=1)
    fu, fv = u[f], v[f]
    area = (fu[:, 1] - fu[:, 0]) * (fv[:, 2] - fv[:, 0]) - (fu[:, 2] - fu[:, 0]) * (fv[:, 1] - fv[:, 0])
    valid &= np.abs(area) > 1e-12
    valid &= np.all(np.isfinite(fu) & np.isfinite(fv), axis=1)
    faces_idx = np.nonzero(valid)[0]
    if len(faces_idx) == 0:
        return out
    fu, fv, area = fu[faces_idx], fv[faces_idx], area[faces_idx]

    j0 = np.clip(np.ceil(fu.min(1) - 0.5), 0, W).astype(np.int64)
    j1 = np.clip(np.floor(fu.max(1) - 0.5), -1, W - 1).astype(np.int64)
    i0 = np.clip(np.ceil(fv.min(1) - 0.5), 0, H).astype(np.int64)
    i1 = np.clip(np.floor(fv.max(1) - 0.5), -1, H - 1).astype(np.int64)
    bw = np.maximum(j1 - j0 + 1, 0)
    bh = np.maximum(i1 - i0 + 1, 0)
    counts = bw * bh
    total = int(counts.sum())
    if total == 0:
        return out
    owner = np.repeat(np.arange(len(faces_idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = j0[owner] + local % bw[owner]
    py = i0[owner] + local // bw[owner]
    su, sv = px + 0.5, py + 0.5

    a_u, a_v = fu[owner], fv[owner]
    # screen-space barycentrics via edge functions, normalized by signed area
    w0 = (a_u[:, 1] - su) * (a_v[:, 2] - sv) - (a_u[:, 2] - su) * (a_v[:, 1] - sv)
    w1 = (a_u[:, 2] - su) * (a_v[:, 0] - sv) - (a_u[:, 0] - su) * (a_v[:, 2] - sv)
    w2 = (a_u[:, 0] - su) * (a_v[:, 1] - sv) - (a_u[:, 1] - su) * (a_v[:, 0] - sv)
    bary = np.stack([w0, w1, w2], axis=1) / area[owner, None]
    inside = np.all(bary >= 0, axis=1)
    owner, px, py, bary = owner[inside], px[inside], py[inside], bary[inside]
    if len(owner) == 0:
        return out

    face = faces_idx[owner]
    inv_z = bary / z[f[face]]
    denom = inv_z.sum(1)
    depth = 1.0 / denom
    pbary = inv_z / denom[:, None]

    pix = py * W + px
    order = np.lexsort((face, depth, pix))
    pix, face, depth, pbary = pix[order], face[order], depth[order], pbary[order]
    first = np.r_[True, pix[1:] != pix[:-1]]
    pix, face, depth, pbary = pix[first], face[first], depth[first], pbary[first]

    rows, cols = pix // W, pix % W
    vn_cam = mesh.normals @ cam.rotation.T
    n = np.einsum("pk,pkd->pd", pbary, vn_cam[f[face]])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    can = np.einsum("pk,pkd->pd", pbary, mesh.canonical[f[face]])

    out.normals[rows, cols] = n
    out.depth[rows, cols, 0] = depth
    out.canonical[rows, cols] = can
    out.mask[rows, cols, 0] = 1.0
    out.face_ids[rows, cols] = face
    out.barycentric[rows, cols] = pbary
    return out


@dataclass
class HitRecord:
    face: int
    barycentric: np.ndarray
    depth: float
    normal: np.ndarray
    canonical: np.ndarray
    point: np.ndarray  # camera space


def raycast_oracle(mesh: ProxyMesh, cam: Camera, pixel: tuple[int, int]) -> HitRecord | None:
    """Nearest ray-triangle hit (Moller-Trumbore, all faces) through the pixel center."""
    if len(mesh.faces) == 0:
        return None
    i, j = pixel
    d = np.array([(j + 0.5 - cam.cx) / cam.focal, (i + 0.5 - cam.cy) / cam.focal, 1.0])
    pc = cam.to_camera(mesh.vertices)
    f = mesh.faces
    keep = np.all(pc[f][:, :, 2] > NEAR, axis=1)
    tri = pc[f]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = keep & (np.abs(det) > 1e-14)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = -tri[:, 0]
        b1 = np.einsum("ij,ij->i", s, p) * inv
        q = np.cross(s, e1)
        b2 = (q @ d) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
    ok &= (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1) & (t > NEAR)
    if not ok.any():
        return None
    cand = np.nonzero(ok)[0]
    k = cand[np.argmin(t[cand])]
    bary = np.array([1.0 - b1[k] - b2[k], b1[k], b2[k]])
    normal = bary @ (mesh.normals[f[k]] @ cam.rotation.T)
    normal /= np.linalg.norm(normal)
    point = t[k] * d
    return HitRecord(int(k), bary, float(point[2]), normal, bary @ mesh.canonical[f[k]], point)


def save_gbuffer_pngs(gbuffer: GBuffer, directory) -> list[Path]:
    """Channel visualizations: normals, depth, canonical xyz, ambient, mask."""
    from .imageio import save_png

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    m = gbuffer.mask
    d = gbuffer.depth
    if m.any():
        lo, hi = d[m > 0].min(), d[m > 0].max()
        d = np.where(m > 0, 1.0 - (d - lo) / max(hi - lo, 1e-9) * 0.8, 0.0)
    can = gbuffer.canonical
    spatial = np.where(m > 0, np.clip(can[..., :3] * 0.5 + 0.5, 0, 1), 0.0)
    amb = np.concatenate([can[..., 3:5] * 0.5 + 0.5, np.zeros_like(d)], axis=-1) * m
    images = {
        "normals": np.where(m > 0, gbuffer.normals * 0.5 + 0.5, 0.0),
        "depth": np.repeat(d, 3, axis=-1),
        "canonical": spatial,
        "ambient": amb,
        "mask": np.repeat(m, 3, axis=-1),
    }
    paths = []
    for name, img in images.items():
        path = directory / f"{name}.png"
        save_png(img, path, value_range=(0.0, 1.0))
        paths.append(path)
    return paths
