"""Sampling-based rendering, metrics and the reenactment protocols."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .imageio import load_png, save_png
from .pipeline import AvatarModel, Corpus, FrameRecord, mean_image, proxy_mesh, with_proxy
from .raster import Camera, rasterize
from .schedule import NoiseSchedule, ddpm_step, sampling_timesteps
from .shading import marker_pixels

PSNR_CAP = 99.0


def frame_generator(seed: int, index: int) -> torch.Generator:
    """Per-frame sampling noise derived from (master seed, frame index)."""
    s = np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(s) & (2**63 - 1))


@torch.no_grad()
def sample_images(model: AvatarModel, gstacks: np.ndarray, z_exps: np.ndarray, schedule: NoiseSchedule,
                  steps: int = 50, seed: int = 0, indices=None, batch_size: int = 16) -> np.ndarray:
    """Ancestral sampling from pure noise for a batch of G-buffers.

    ``gstacks`` is (B, H, W, 10), ``z_exps`` (B, D_EXP); returns (B, H, W, 3)
    in [-1, 1].  Frame ``k`` draws its noise from ``frame_generator(seed,
    indices[k])`` so results do not depend on batching.
    """
    if not schedule.has_zero_terminal_snr:
        warnings.warn("schedule has nonzero terminal SNR: sampling starts from pure noise the model never saw",
                      RuntimeWarning, stacklevel=2)
    gstacks = np.asarray(gstacks)
    n = gstacks.shape[0]
    indices = list(range(n)) if indices is None else list(indices)
    model.eval()
    taus = sampling_timesteps(schedule, steps)
    out = []
    for b0 in range(0, n, batch_size):
        sl = slice(b0, min(n, b0 + batch_size))
        g = torch.tensor(gstacks[sl].transpose(0, 3, 1, 2), dtype=torch.float32)
        z = torch.tensor(np.asarray(z_exps)[sl], dtype=torch.float32)
        gens = [frame_generator(seed, i) for i in indices[sl]]
        control = model.control(g)
        zz = None if model.cfg.no_exp_cond else z
        H, W = g.shape[-2:]
        x = torch.stack([torch.randn((3, H, W), generator=gen) for gen in gens])
        for k, tau in enumerate(taus):
            tau_prev = taus[k + 1] if k + 1 < len(taus) else 0
            v = model.renderer(x, torch.full((x.shape[0],), tau, dtype=torch.long), control, zz)
            x = torch.cat([ddpm_step(x[i:i + 1], v[i:i + 1], tau, schedule, gens[i], tau_prev)
                           for i in range(x.shape[0])])
        out.append(x.clamp(-1, 1).permute(0, 2, 3, 1).numpy().astype(np.float64))
    return np.concatenate(out)


def render_records(model, records: list[FrameRecord], schedule, steps=50, seed=0) -> np.ndarray:
    g = np.stack([r.gbuffer.stack() for r in records])
    z = np.stack([r.z_exp for r in records])
    return sample_images(model, g, z, schedule, steps, seed, indices=[r.frame * 1000 + r.camera for r in records])


def render_frame(model: AvatarModel, z_id, z_exp, camera: Camera, schedule: NoiseSchedule, steps: int = 50,
                 seed: int = 0, resolution: int = 8, index: int = 0) -> np.ndarray:
    """Build the proxy mesh, rasterize, and sample one image (H, W, 3) in [-1, 1]."""
    mesh = proxy_mesh(z_id, z_exp, resolution, model.cfg.flame_like_proxy)
    g = rasterize(mesh, camera)
    return sample_images(model, g.stack()[None], np.asarray(z_exp, dtype=np.float64)[None], schedule, steps, seed,
                         indices=[index])[0]


# ------------------------------------------------------------------ metrics


def to_unit(img) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def psnr(a, b) -> float:
    """PSNR in dB of images already mapped to [0, 1]; identical images give ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gray(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])


def _ncc_map(image: np.ndarray, template: np.ndarray, center: tuple[int, int], radius: int) -> np.ndarray:
    """NCC of ``template`` against patches centred at ``center + offset``; nan where it does not fit."""
    h = template.shape[0] // 2
    t = template - template.mean()
    tn = np.linalg.norm(t)
    out = np.full((2 * radius + 1, 2 * radius + 1), np.nan)
    H, W = image.shape
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            i, j = center[0] + di, center[1] + dj
            if i - h < 0 or j - h < 0 or i + h >= H or j + h >= W:
                continue
            p = image[i - h:i + h + 1, j - h:j + h + 1]
            p = p - p.mean()
            pn = np.linalg.norm(p)
            out[di + radius, dj + radius] = float((p * t).sum() / (pn * tn)) if pn > 1e-12 and tn > 1e-12 else 0.0
    return out


def _subpixel_peak(score: np.ndarray) -> tuple[float, float, float]:
    """Argmax of a score map refined by a 1-D parabola per axis; returns (di, dj, value)."""
    k = np.nanargmax(score)
    i, j = np.unravel_index(k, score.shape)
    best = score[i, j]

    def refine(m, c, p):
        if not (np.isfinite(m) and np.isfinite(p)):
            return 0.0
        den = m - 2 * c + p
        return 0.0 if den >= 0 else float(np.clip(0.5 * (m - p) / den, -0.5, 0.5))

    di = refine(score[i - 1, j], best, score[i + 1, j]) if 0 < i < score.shape[0] - 1 else 0.0
    dj = refine(score[i, j - 1], best, score[i, j + 1]) if 0 < j < score.shape[1] - 1 else 0.0
    return i + di, j + dj, float(best)


@dataclass
class MarkerResult:
    distance: float  # mean over found markers (inf if none was found)
    found: int
    excluded: int
    per_marker: list[float] = field(default_factory=list)


def locate(image: np.ndarray, template: np.ndarray, guess: tuple[int, int], radius: int) -> tuple[float, float, float]:
    score = _ncc_map(_gray(image), template, guess, radius)
    if not np.isfinite(score).any():
        return np.nan, np.nan, -np.inf
    i, j, best = _subpixel_peak(score)
    return guess[0] + i - radius, guess[1] + j - radius, best


def marker_distance(rendered, gt, expected, visible=None, patch: int = 7, radius: int = 5,
                    threshold: float = 0.5) -> MarkerResult:
    """Mean 2-D distance between marker locations found in ``rendered`` and ``gt``.

    ``expected`` is (T, K, 2) projected marker positions (row, col) giving the
    template location in the GT frame and the search centre; ``visible``
    (T, K) masks markers out.  Each marker's template is the GT patch at its
    expected position; it is located by normalized cross-correlation within
    ``radius`` pixels in both sequences.  A marker whose best correlation is
    below ``threshold`` in either sequence is excluded and counted.
    """
    rendered = np.asarray(rendered)
    gt = np.asarray(gt)
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {gt.shape}")
    if rendered.ndim == 3:
        rendered, gt = rendered[None], gt[None]
        expected = np.asarray(expected)[None]
        visible = None if visible is None else np.asarray(visible)[None]
    expected = np.asarray(expected, dtype=np.float64)
    visible = np.ones(expected.shape[:2], bool) if visible is None else np.asarray(visible, bool)
    h = patch // 2
    dists, excluded = [], 0
    for t in range(gt.shape[0]):
        g = _gray(gt[t])
        H, W = g.shape
        for k in np.nonzero(visible[t])[0]:
            ci, cj = np.round(expected[t, k]).astype(int)
            if ci - h < 0 or cj - h < 0 or ci + h >= H or cj + h >= W:
                excluded += 1
                continue
            tmpl = g[ci - h:ci + h + 1, cj - h:cj + h + 1]
            gi, gj, gs = locate(gt[t], tmpl, (ci, cj), radius)
            ri, rj, rs = locate(rendered[t], tmpl, (ci, cj), radius)
            if not (gs >= threshold and rs >= threshold):
                excluded += 1
                continue
            dists.append(float(np.hypot(ri - gi, rj - gj)))
    dist = float(np.mean(dists)) if dists else float("inf")
    return MarkerResult(dist, len(dists), excluded, dists)


def expected_markers(records: list[FrameRecord], corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    rcs, vis = [], []
    for r in records:
        rc, v = marker_pixels(r.z_id, r.z_exp, corpus.cameras[r.camera], corpus.appearance, r.gbuffer)
        rcs.append(rc)
        vis.append(v)
    return np.stack(rcs), np.stack(vis)


def temporal_slice(frames, column: int, rows: tuple[int, int] | None = None) -> np.ndarray:
    """Stack column ``column`` (rows ``rows[0]:rows[1]``) of every frame left to right: (h, T, 3)."""
    frames = np.asarray(frames)
    T, H, W = frames.shape[:3]
    if not 0 <= column < W:
        raise ValueError(f"column {column} outside [0, {W})")
    r0, r1 = (0, H) if rows is None else rows
    if not 0 <= r0 < r1 <= H:
        raise ValueError(f"row range {rows} outside [0, {H}]")
    return np.ascontiguousarray(frames[:, r0:r1, column].transpose(1, 0, *range(2, frames.ndim - 1)))


def pearson_masked(a, b, mask) -> float:
    m = np.asarray(mask, bool).reshape(-1)
    x = np.asarray(a, dtype=np.float64).reshape(len(m), -1)[m].ravel()
    y = np.asarray(b, dtype=np.float64).reshape(len(m), -1)[m].ravel()
    return float(np.corrcoef(x, y)[0, 1])


# ------------------------------------------------------------------ protocol


@dataclass
class MetricReport:
    mode: str
    frame_count: int
    psnr_per_frame: dict[str, float] = field(default_factory=dict)
    psnr_mean: dict[str, float] = field(default_factory=dict)
    marker_distance: dict[str, float] = field(default_factory=dict)
    markers_excluded: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        lines = [f"mode = {self.mode}", f"frame_count = {self.frame_count}"]
        for k, v in sorted(self.psnr_mean.items()):
            lines.append(f"psnr_mean.{k} = {v:.4f}")
        for k, v in sorted(self.marker_distance.items()):
            lines.append(f"marker_distance.{k} = {v:.4f}")
        for k, v in sorted(self.markers_excluded.items()):
            lines.append(f"markers_excluded.{k} = {v}")
        for k, v in sorted(self.psnr_per_frame.items()):
            lines.append(f"psnr.{k} = {v:.4f}")
        for k, v in sorted(self.config.items()):
            lines.append(f"config.{k} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.txt").write_text(self.to_text())
        (d / "report.json").write_text(self.to_json())


@dataclass
class ReenactmentJob:
    mode: str = "self"  # "self" or "cross"
    steps: int = 50
    seed: int = 0
    splits: tuple[str, ...] = ("holdout-view", "holdout-expression")
    driving: np.ndarray | None = None  # cross mode: (T, D_EXP) codes from another identity
    camera: int | None = None  # cross mode camera (default: the held-out frontal one)

    def __post_init__(self):
        if self.mode not in ("self", "cross"):
            raise ValueError(f"unknown protocol mode {self.mode!r}")
        if self.mode == "cross":
            if self.driving is None or len(self.driving) == 0:
                raise ValueError("cross mode needs a non-empty driving sequence")


def score_split(corpus: Corpus, records: list[FrameRecord], imgs) -> tuple[list[float], MarkerResult]:
    """Per-frame PSNR and the marker distance of rendered ``imgs`` (in [-1, 1]) against GT."""
    gts = np.stack([r.image for r in records])
    exp, vis = expected_markers(records, corpus)
    p = [psnr(to_unit(a), to_unit(b)) for a, b in zip(imgs, gts)]
    return p, marker_distance(to_unit(imgs), to_unit(gts), exp, vis)


def evaluate_split(model, corpus: Corpus, records: list[FrameRecord], schedule, steps=50, seed=0):
    """Render ``records`` (whose G-buffers must match the model's proxy) and score them."""
    imgs = render_records(model, records, schedule, steps, seed)
    p, md = score_split(corpus, records, imgs)
    return imgs, p, md


def _add_split(report: MetricReport, split: str, records, p, md: MarkerResult) -> None:
    report.frame_count += len(records)
    for r, v in zip(records, p):
        report.psnr_per_frame[f"{split}/{r.key}"] = v
    report.psnr_mean[split] = float(np.mean(p))
    report.marker_distance[split] = md.distance
    report.markers_excluded[split] = md.excluded


def _add_baseline(report: MetricReport, corpus: Corpus, splits) -> None:
    base = mean_image(corpus.split("train"))
    for split in splits:
        report.psnr_mean[f"{split}/mean_image_baseline"] = float(np.mean(
            [psnr(to_unit(base), to_unit(r.image)) for r in corpus.split(split)]))


def _split_records(corpus: Corpus, split: str) -> list[FrameRecord]:
    records = corpus.split(split)
    if not records:
        raise ValueError(f"corpus has no {split!r} frames")
    return records


def score_rendered(corpus: Corpus, directory, splits=("holdout-view", "holdout-expression")) -> MetricReport:
    """Score a directory laid out as ``<split>/<frame key>.png`` (as written by self reenactment)."""
    root = Path(directory)
    report = MetricReport("self", 0, config={"rendered": str(root)})
    for split in splits:
        records = _split_records(corpus, split)
        paths = [root / split / f"{r.key}.png" for r in records]
        missing = [str(q) for q in paths if not q.exists()]
        if missing:
            raise FileNotFoundError(f"{len(missing)} rendered frames missing, e.g. {missing[0]}")
        imgs = np.stack([load_png(q)[..., :3] for q in paths])
        p, md = score_split(corpus, records, imgs)
        _add_split(report, split, records, p, md)
    _add_baseline(report, corpus, splits)
    return report


def run_protocol(model: AvatarModel, corpus: Corpus, schedule: NoiseSchedule, job: ReenactmentJob,
                 out_dir=None) -> MetricReport:
    """Self mode renders and scores the held-out splits; cross mode only renders driving frames."""
    corpus = with_proxy(corpus, model.cfg.flame_like_proxy)
    report = MetricReport(job.mode, 0, config={"steps": job.steps, "seed": job.seed})
    out = None if out_dir is None else Path(out_dir)
    if job.mode == "self":
        for split in job.splits:
            records = _split_records(corpus, split)
            imgs, p, md = evaluate_split(model, corpus, records, schedule, job.steps, job.seed)
            _add_split(report, split, records, p, md)
            if out is not None:
                for r, img in zip(records, imgs):
                    save_png(img, out / split / f"{r.key}.png")
        _add_baseline(report, corpus, job.splits)
    else:
        cam_id = corpus.scene.heldout_camera if job.camera is None else job.camera
        cam = corpus.cameras[cam_id]
        driving = np.asarray(job.driving, dtype=np.float64)
        g = np.stack([rasterize(corpus.scene.proxy_mesh(z), cam).stack() for z in driving])
        imgs = sample_images(model, g, driving, schedule, job.steps, job.seed)
        report.frame_count = len(imgs)
        if out is not None:
            for t, img in enumerate(imgs):
                save_png(img, out / "frames" / f"{t:04d}.png")
            H, W = imgs.shape[1:3]
            for col in (W // 3, W // 2, 2 * W // 3):
                save_png(temporal_slice(imgs, col, (H // 4, 3 * H // 4)), out / "slices" / f"col{col:03d}.png")
    if out is not None:
        report.save(out)
    return report
