"""Synthetic corpus, training loop and checkpoints.

The corpus is a set of frames of one procedural head filmed by a rig of
cameras on a horizontal arc while it runs through a few smooth expression
sequences.  Each frame pairs a ground-truth image (detail mesh, procedural
shading) with the G-buffer of the smooth proxy mesh.  One camera and one
sequence are held out.

Training minimizes the v-prediction MSE of the denoiser conditioned on the
control signal assembled from the feature atlas and the G-buffer.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import head
from .features import FeatureAtlas, control_from_stack, control_channels
from .imageio import save_png
from .raster import Camera, GBuffer, rasterize, save_gbuffer_pngs
from .renderer import DeferredRenderer, RendererConfig, UNet
from .schedule import NoiseSchedule, add_noise, compute_v, make_schedule, rescale_zero_snr
from .shading import Appearance, detail_mesh, shade_groundtruth

log = logging.getLogger(__name__)

SPLITS = ("train", "holdout-view", "holdout-expression")


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# ------------------------------------------------------------------ corpus


@dataclass
class SceneConfig:
    num_cameras: int = 8
    num_frames: int = 25
    num_sequences: int = 5
    image_size: int = 64
    focal: float = 75.0
    distance: float = 3.2
    azimuth_step: float = 20.0  # degrees between neighbouring cameras
    elevation: float = 6.0  # cameras alternate +/- this many degrees
    holdout_camera: int | None = None  # default: the most frontal camera
    holdout_sequence: int | None = None  # default: the middle sequence
    keyframes: int = 3  # expression keyframes per sequence
    z_id: tuple[float, ...] = (0.3, -0.2, 0.1, 0.5)
    proxy_resolution: int = 8
    flame_like_proxy: bool = False
    appearance_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_cameras < 2:
            raise ValueError("need at least 2 cameras")
        if self.num_sequences < 2:
            raise ValueError("need at least 2 expression sequences")
        if self.num_frames < self.num_sequences:
            raise ValueError("every sequence needs at least one frame")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if len(self.z_id) != head.D_ID:
            raise ValueError(f"z_id must have {head.D_ID} entries")
        self.z_id = tuple(float(v) for v in self.z_id)
        if self.holdout_camera is not None and not 0 <= self.holdout_camera < self.num_cameras:
            raise ValueError("holdout_camera out of range")
        if self.holdout_sequence is not None and not 0 <= self.holdout_sequence < self.num_sequences:
            raise ValueError("holdout_sequence out of range")

    def azimuths(self) -> np.ndarray:
        """Camera azimuths in degrees; camera ``num_cameras // 2 - 1`` looks straight at the face."""
        front = self.num_cameras // 2 - 1
        return self.azimuth_step * (np.arange(self.num_cameras) - front)

    @property
    def frontal_camera(self) -> int:
        return int(np.argmin(np.abs(self.azimuths())))

    @property
    def heldout_camera(self) -> int:
        return self.frontal_camera if self.holdout_camera is None else self.holdout_camera

    @property
    def heldout_sequence(self) -> int:
        return self.num_sequences // 2 if self.holdout_sequence is None else self.holdout_sequence

    def proxy_mesh(self, z_exp) -> head.ProxyMesh:
        return proxy_mesh(self.z_id, z_exp, self.proxy_resolution, self.flame_like_proxy)


def proxy_mesh(z_id, z_exp, resolution: int = 8, flame_like: bool = False) -> head.ProxyMesh:
    """Proxy mesh used for the G-buffer; the FLAME-like ablation drops detail and ambient tags."""
    if flame_like:
        m = head.build_mesh(z_id, z_exp, resolution=max(2, resolution // 2))
        m.canonical[:, 3:] = 0.0
        return m
    return head.build_mesh(z_id, z_exp, resolution=resolution)


def scene_from_dict(d: dict) -> SceneConfig:
    return SceneConfig(**{k: (tuple(v) if k == "z_id" else v) for k, v in d.items()})


def rig_cameras(cfg: SceneConfig) -> list[Camera]:
    cams = []
    for k, az in enumerate(np.radians(cfg.azimuths())):
        el = math.radians(cfg.elevation) * (1 if k % 2 == 0 else -1)
        eye = cfg.distance * np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
        cams.append(Camera.look_at(eye, (0.0, -0.05, 0.0), focal=cfg.focal, size=(cfg.image_size, cfg.image_size)))
    return cams


def expression_sequences(cfg: SceneConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Per sequence, a (length, D_EXP) trajectory smoothly interpolating random keyframes."""
    lengths = np.full(cfg.num_sequences, cfg.num_frames // cfg.num_sequences)
    lengths[: cfg.num_frames % cfg.num_sequences] += 1
    lo = np.array([0.0, 0.0, 0.0, -0.5, 0.0, -0.5, -0.6, -0.6])
    hi = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.6, 0.6])
    seqs = []
    for n in lengths:
        keys = rng.uniform(lo, hi, (cfg.keyframes, head.D_EXP))
        # sparse activations look more like expressions than uniform mixtures
        keys[:, :6] *= rng.random((cfg.keyframes, 6)) < 0.5
        s = np.linspace(0, cfg.keyframes - 1, int(n))
        k0 = np.minimum(np.floor(s).astype(int), cfg.keyframes - 2)
        w = head.smoothstep(s - k0)[:, None]
        seqs.append((1 - w) * keys[k0] + w * keys[k0 + 1])
    return seqs


@dataclass
class FrameRecord:
    frame: int
    camera: int
    sequence: int
    image: np.ndarray  # (H, W, 3) in [-1, 1]
    gbuffer: GBuffer
    z_exp: np.ndarray
    z_id: np.ndarray
    split: str

    @property
    def key(self) -> str:
        return f"t{self.frame:03d}_c{self.camera:02d}"


@dataclass
class Corpus:
    scene: SceneConfig
    cameras: list[Camera]
    appearance: Appearance
    records: list[FrameRecord]

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[FrameRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    @property
    def z_id(self) -> np.ndarray:
        return np.asarray(self.scene.z_id, dtype=np.float64)

    def record_hash(self, r: FrameRecord) -> str:
        h = hashlib.sha256()
        for a in (r.image, r.gbuffer.stack(), r.z_exp, r.z_id):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(f"{r.frame}/{r.camera}/{r.sequence}/{r.split}".encode())
        return h.hexdigest()

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(self.record_hash(r).encode())
        return h.hexdigest()


def synthesize_dataset(cfg: SceneConfig, rng: np.random.Generator | None = None) -> Corpus:
    """Render every (frame, camera) pair; the holdout camera's frames form the holdout-view split."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    cams = rig_cameras(cfg)
    appearance = Appearance(seed=cfg.appearance_seed)
    z_id = np.asarray(cfg.z_id, dtype=np.float64)
    records = []
    t = 0
    for s, seq in enumerate(expression_sequences(cfg, rng)):
        for z_exp in seq:
            proxy = cfg.proxy_mesh(z_exp)
            detail = detail_mesh(z_id, z_exp, appearance)
            for c, cam in enumerate(cams):
                if c == cfg.heldout_camera:
                    split = "holdout-view"
                elif s == cfg.heldout_sequence:
                    split = "holdout-expression"
                else:
                    split = "train"
                g = rasterize(proxy, cam)
                g.face_ids = g.barycentric = None
                img = shade_groundtruth(detail, cam, appearance)
                records.append(FrameRecord(t, c, s, img, g, z_exp.copy(), z_id.copy(), split))
            t += 1
    return Corpus(cfg, cams, appearance, records)


def _kv_lines(d: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in d.items())


def _parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = json.loads(v)
    return out


def scene_to_dict(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["z_id"] = list(cfg.z_id)
    return d


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write the corpus: ``scene.txt`` plus one directory per frame.

    Each frame directory holds ``gt.png``, the G-buffer channel PNGs,
    ``buffers.npz`` (float64 arrays ``image`` (H, W, 3), ``gbuffer``
    (H, W, 10) in ``GBuffer.stack`` order, ``z_exp``, ``z_id``) and
    ``meta.txt`` (key = JSON value lines: frame, camera, sequence, split,
    z_exp, camera parameters).
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / "scene.txt").write_text("# synthetic head corpus\n" + _kv_lines(
        {"scene": scene_to_dict(corpus.scene), "appearance_seed": corpus.appearance.seed,
         "num_records": len(corpus), "digest": corpus.digest()}))
    for r in corpus.records:
        d = root / r.key
        d.mkdir(exist_ok=True)
        save_png(r.image, d / "gt.png")
        save_gbuffer_pngs(r.gbuffer, d)
        np.savez(d / "buffers.npz", image=r.image, gbuffer=r.gbuffer.stack(), z_exp=r.z_exp, z_id=r.z_id)
        (d / "meta.txt").write_text(_kv_lines(
            {"frame": r.frame, "camera": r.camera, "sequence": r.sequence, "split": r.split,
             "z_exp": r.z_exp.tolist(), "camera_params": corpus.cameras[r.camera].to_dict()}))
    return root


def load_corpus(directory) -> Corpus:
    root = Path(directory)
    if not (root / "scene.txt").exists():
        raise FileNotFoundError(f"{root} is not a corpus directory (no scene.txt)")
    meta = _parse_kv((root / "scene.txt").read_text())
    scene = scene_from_dict(meta["scene"])
    records = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        m = _parse_kv((d / "meta.txt").read_text())
        with np.load(d / "buffers.npz") as z:
            records.append(FrameRecord(int(m["frame"]), int(m["camera"]), int(m["sequence"]), z["image"],
                                       GBuffer.from_stack(z["gbuffer"]), z["z_exp"], z["z_id"], m["split"]))
    records.sort(key=lambda r: (r.frame, r.camera))
    if len(records) != meta["num_records"]:
        raise ValueError(f"corpus at {root} has {len(records)} frames, expected {meta['num_records']}")
    return Corpus(scene, rig_cameras(scene), Appearance(seed=meta["appearance_seed"]), records)


def with_proxy(corpus: Corpus, flame_like: bool) -> Corpus:
    """The corpus with G-buffers re-rasterized from the requested proxy; GT images are shared."""
    if corpus.scene.flame_like_proxy == flame_like:
        return corpus
    scene = replace(corpus.scene, flame_like_proxy=flame_like)
    meshes: dict[int, head.ProxyMesh] = {}
    records = []
    for r in corpus.records:
        if r.frame not in meshes:
            meshes[r.frame] = scene.proxy_mesh(r.z_exp)
        g = rasterize(meshes[r.frame], corpus.cameras[r.camera])
        g.face_ids = g.barycentric = None
        records.append(replace(r, gbuffer=g))
    return Corpus(scene, corpus.cameras, corpus.appearance, records)


def mean_image(records: list[FrameRecord]) -> np.ndarray:
    return np.mean([r.image for r in records], axis=0)


# ------------------------------------------------------------------ model


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 20000
    pretrain_steps: int = 4000
    lr_net: float = 1e-4
    lr_atlas: float = 1e-2
    lr_pretrain: float = 2e-4
    crop_min: float = 0.7
    crop_max: float = 1.0
    augment: bool = True
    seed: int = 0
    mode: str = "prior"
    no_exp_cond: bool = False
    no_features: bool = False
    spherical_uv: bool = False
    flame_like_proxy: bool = False
    schedule_steps: int = 1000
    zero_snr: bool = True
    # network / atlas shape
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    attention_levels: tuple[int, ...] = (1, 2)
    num_heads: int = 1
    token_width: int = 64
    num_features: int = 16
    grid_size: int = 128
    log_every: int = 100

    def __post_init__(self):
        self.channel_mult = tuple(int(c) for c in self.channel_mult)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        for name in ("batch_size", "schedule_steps", "base_channels", "num_features", "grid_size", "token_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("steps", "pretrain_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (self.lr_net > 0 and self.lr_atlas > 0 and self.lr_pretrain > 0):
            raise ValueError("learning rates must be positive")
        if not 0 < self.crop_min <= self.crop_max <= 1:
            raise ValueError("crop range must satisfy 0 < crop_min <= crop_max <= 1")
        if self.mode not in ("prior", "scratch"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.no_features and self.spherical_uv:
            raise ValueError("no_features and spherical_uv are mutually exclusive")

    @property
    def feature_mode(self) -> str:
        return "none" if self.no_features else "spherical" if self.spherical_uv else "triplane"

    def renderer_config(self) -> RendererConfig:
        return RendererConfig(base_channels=self.base_channels, channel_mult=self.channel_mult,
                              attention_levels=self.attention_levels, num_heads=self.num_heads,
                              token_width=self.token_width, expression_dim=head.D_EXP,
                              control_channels=control_channels(self.num_features, self.feature_mode),
                              mode=self.mode, use_expression=not self.no_exp_cond)

    def make_schedule(self) -> NoiseSchedule:
        s = make_schedule(self.schedule_steps)
        return rescale_zero_snr(s) if self.zero_snr else s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention_levels"] = list(self.attention_levels)
        return d


def architecture_dict(cfg: TrainConfig) -> dict:
    """Fields that determine parameter shapes; checkpoints must agree on these."""
    keys = ("mode", "no_exp_cond", "no_features", "spherical_uv", "base_channels", "channel_mult",
            "attention_levels", "num_heads", "token_width", "num_features", "grid_size")
    d = cfg.to_dict()
    return {k: d[k] for k in keys}


class AvatarModel(nn.Module):
    """Renderer plus feature atlas; maps (x_tau, tau, G-buffer stack, z_exp) to v."""

    def __init__(self, cfg: TrainConfig, bounds_lo, bounds_hi, base: UNet | None = None, generator=None):
        super().__init__()
        self.cfg = cfg
        self.renderer = DeferredRenderer(cfg.renderer_config(), base)
        self.atlas = FeatureAtlas(bounds_lo, bounds_hi, grid_size=cfg.grid_size, num_features=cfg.num_features,
                                  mode=cfg.feature_mode, generator=generator)

    @classmethod
    def for_corpus(cls, cfg: TrainConfig, corpus: Corpus, base: UNet | None = None, generator=None):
        neutral = head.build_mesh(corpus.z_id, None, corpus.scene.proxy_resolution)
        xyz = neutral.canonical[:, :3]
        lo, hi = xyz.min(0), xyz.max(0)
        pad = 0.1 * (hi - lo)
        return cls(cfg, lo - pad, hi + pad, base, generator)

    def control(self, gstack: torch.Tensor) -> torch.Tensor:
        """(B, 10, H, W) G-buffer stacks -> (B, C, H, W) control signal."""
        c = control_from_stack(self.atlas, gstack.permute(0, 2, 3, 1))
        return c.permute(0, 3, 1, 2).contiguous()

    def forward(self, x_tau, tau, gstack, z_exp=None):
        z = None if self.cfg.no_exp_cond else z_exp
        return self.renderer(x_tau, tau, self.control(gstack), z)

    def network_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.renderer.parameters() if p.requires_grad]

    def atlas_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.atlas.parameters() if p.numel()]


def freeze_base(model: AvatarModel) -> None:
    for p in model.renderer.base.base_parameters():
        p.requires_grad_(False)


def make_optimizer(model: AvatarModel, cfg: TrainConfig) -> torch.optim.Adam:
    groups = [{"params": model.network_parameters(), "lr": cfg.lr_net, "name": "network"}]
    atlas = model.atlas_parameters()
    if atlas:
        groups.append({"params": atlas, "lr": cfg.lr_atlas, "name": "atlas"})
    return torch.optim.Adam(groups)


def parameter_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ batches


def records_to_tensors(records: list[FrameRecord]) -> dict[str, torch.Tensor]:
    img = np.stack([r.image for r in records]).transpose(0, 3, 1, 2)
    gst = np.stack([r.gbuffer.stack() for r in records]).transpose(0, 3, 1, 2)
    z = np.stack([r.z_exp for r in records])
    return {"image": torch.tensor(img, dtype=torch.float32), "gbuffer": torch.tensor(gst, dtype=torch.float32),
            "z_exp": torch.tensor(z, dtype=torch.float32)}


def random_crop_boxes(rng: np.random.Generator, n: int, size: int, scale=(0.7, 1.0)) -> np.ndarray:
    """(n, 4) square boxes (top, left, h, w) with side fraction uniform in ``scale``."""
    side = np.round(rng.uniform(scale[0], scale[1], n) * size).astype(int).clip(1, size)
    top = (rng.random(n) * (size - side + 1)).astype(int)
    left = (rng.random(n) * (size - side + 1)).astype(int)
    return np.stack([top, left, side, side], axis=1)


def crop_resize(t: torch.Tensor, boxes: np.ndarray, size: int) -> torch.Tensor:
    """Nearest-neighbour crop-and-resize of (B, C, H, W) with per-item boxes.

    Same pixel mapping as ``GBuffer.crop_resize``; applied with one box to an
    image and its G-buffer it keeps them pixel aligned.
    """
    out = []
    ar = np.arange(size) + 0.5
    for x, (top, left, h, w) in zip(t, boxes):
        rows = torch.as_tensor(top + (ar * h / size).astype(int))
        cols = torch.as_tensor(left + (ar * w / size).astype(int))
        out.append(x[:, rows][:, :, cols])
    return torch.stack(out)


def sample_batch(data: dict[str, torch.Tensor], rng: np.random.Generator, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    n = data["image"].shape[0]
    idx = torch.as_tensor(rng.integers(0, n, cfg.batch_size))
    batch = {k: v[idx] for k, v in data.items()}
    if cfg.augment:
        size = batch["image"].shape[-1]
        boxes = random_crop_boxes(rng, cfg.batch_size, size, (cfg.crop_min, cfg.crop_max))
        batch["image"] = crop_resize(batch["image"], boxes, size)
        batch["gbuffer"] = crop_resize(batch["gbuffer"], boxes, size)
    return batch


def v_loss(predict, batch, schedule: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    """Uniform tau in [1, N], Gaussian eps, MSE between predicted and true v."""
    x0 = batch["image"]
    B = x0.shape[0]
    tau = torch.randint(1, schedule.num_steps + 1, (B,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_tau = add_noise(x0, eps, tau.numpy(), schedule)
    v = compute_v(x0, eps, tau.numpy(), schedule)
    pred = predict(x_tau, tau, batch)
    return torch.mean((pred - v) ** 2)


def _check_loss(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at step {step}; "
                            "check learning rates and input ranges (images must lie in [-1, 1])")


def train_step(model: AvatarModel, optimizer, batch, schedule: NoiseSchedule, generator: torch.Generator,
               step: int = 0) -> float:
    """One optimizer step on the v-prediction loss; returns the loss value."""
    loss = v_loss(lambda x, t, b: model(x, t, b["gbuffer"], b["z_exp"]), batch, schedule, generator)
    _check_loss(loss, step)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@dataclass
class TrainResult:
    model: AvatarModel
    losses: list[float] = field(default_factory=list)
    base_hash: str = ""


def _seeded(seed: int, stream: int):
    rng = np.random.default_rng([seed, stream])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return rng, gen


def pretrain_base(corpus: Corpus | list[FrameRecord], cfg: TrainConfig, callback=None) -> tuple[UNet, list[float]]:
    """Unconditional v-prediction U-Net on the training images, returned frozen.

    The prior sees the images as rendered: crop-resize augmentation would
    teach it a zoomed-in distribution, so it is applied only when training
    the avatar.
    """
    records = corpus.split("train") if isinstance(corpus, Corpus) else list(corpus)
    if not records:
        raise ValueError("cannot pretrain on an empty corpus")
    rcfg = replace(cfg.renderer_config(), mode="prior")
    torch.manual_seed(cfg.seed)
    base = UNet(rcfg)
    schedule = cfg.make_schedule()
    data = records_to_tensors(records)
    rng, gen = _seeded(cfg.seed, 1)
    opt = torch.optim.Adam(base.base_parameters(), lr=cfg.lr_pretrain)
    plain = replace(cfg, augment=False)
    losses = []
    for step in range(cfg.pretrain_steps):
        batch = sample_batch(data, rng, plain)
        loss = v_loss(lambda x, t, b: base(x, t), batch, schedule, gen)
        _check_loss(loss, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if callback is not None:
            callback(step, losses[-1])
    for p in base.parameters():
        p.requires_grad_(False)
    return base, losses


def build_model(corpus: Corpus, cfg: TrainConfig, base: UNet | None = None) -> AvatarModel:
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    if cfg.mode == "prior":
        if base is None:
            raise ValueError("prior mode needs a pretrained base network")
        base = _copy_base(base, cfg)
    model = AvatarModel.for_corpus(cfg, corpus, base, gen)
    if cfg.mode == "prior":
        freeze_base(model)
    return model


def _copy_base(base: UNet, cfg: TrainConfig) -> UNet:
    """Fresh base for this config with the pretrained weights; expression layers stay at their init."""
    torch.manual_seed(cfg.seed)
    fresh = UNet(replace(cfg.renderer_config(), mode="prior"))
    src = {k: v for k, v in base.state_dict().items() if ".exp_" not in k}
    missing, unexpected = fresh.load_state_dict(src, strict=False)
    if unexpected or any(".exp_" not in k for k in missing):
        raise ValueError(f"pretrained base does not match the renderer config: {missing} {unexpected}")
    return fresh


def train(corpus: Corpus, cfg: TrainConfig, base: UNet | None = None, callback=None) -> TrainResult:
    """Train an avatar on the corpus's train split (pretraining the base first in prior mode)."""
    corpus = with_proxy(corpus, cfg.flame_like_proxy)
    records = corpus.split("train")
    if not records:
        raise ValueError("corpus has no training frames")
    if cfg.mode == "prior" and base is None:
        base, _ = pretrain_base(records, cfg)
    model = build_model(corpus, cfg, base)
    base_hash = parameter_hash(model.renderer.base.base_parameters())
    opt = make_optimizer(model, cfg)
    schedule = cfg.make_schedule()
    data = records_to_tensors(records)
    rng, gen = _seeded(cfg.seed, 2)
    result = TrainResult(model, [], base_hash)
    for step in range(cfg.steps):
        batch = sample_batch(data, rng, cfg)
        result.losses.append(train_step(model, opt, batch, schedule, gen, step))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.5f", step + 1, float(np.mean(result.losses[-cfg.log_every:])))
        if callback is not None:
            callback(step, result.losses[-1])
    return result


# ------------------------------------------------------------------ checkpoints

MAGIC = b"DDAVATAR"
FORMAT_VERSION = 1


def save_checkpoint(path, model: AvatarModel | UNet, cfg: TrainConfig, schedule: NoiseSchedule | None = None,
                    extra: dict | None = None) -> Path:
    """Single-file container: magic, version, header length, JSON header, torch payload.

    The header carries the config, the schedule and the payload's
    SHA-256 so truncation or corruption is detected on load.
    """
    schedule = cfg.make_schedule() if schedule is None else schedule
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    payload = buf.getvalue()
    header = {
        "kind": "avatar" if isinstance(model, AvatarModel) else "base",
        "config": cfg.to_dict(),
        "alphas": [float(a) for a in schedule.alphas],
        "alpha_bars": [float(a) for a in schedule.alpha_bars],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
        "extra": extra or {},
    }
    if isinstance(model, AvatarModel):
        header["bounds"] = [model.atlas.bounds_lo.tolist(), model.atlas.bounds_hi.tolist()]
    hbytes = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + FORMAT_VERSION.to_bytes(4, "little") + len(hbytes).to_bytes(8, "little"))
        f.write(hbytes)
        f.write(payload)
    return path


@dataclass
class Checkpoint:
    model: AvatarModel | UNet
    config: TrainConfig
    schedule: NoiseSchedule
    extra: dict


def _config_from_dict(d: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in known})


def load_checkpoint(path, expect: TrainConfig | None = None) -> Checkpoint:
    """Load a checkpoint; ``expect`` (if given) must describe the same architecture."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = int.from_bytes(raw[8:12], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    hlen = int.from_bytes(raw[12:20], "little")
    try:
        header = json.loads(raw[20:20 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupted header") from e
    payload = raw[20 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated ({len(payload)} of {header['payload_bytes']} payload bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    cfg = _config_from_dict(header["config"])
    if expect is not None and architecture_dict(expect) != architecture_dict(cfg):
        a, b = architecture_dict(expect), architecture_dict(cfg)
        diff = {k: (a[k], b[k]) for k in a if a[k] != b[k]}
        raise CheckpointError(f"{path}: architecture mismatch (expected, found): {diff}")
    state = torch.load(io.BytesIO(payload), weights_only=True)
    if header["kind"] == "avatar":
        lo, hi = header["bounds"]
        model = AvatarModel(cfg, lo, hi)
        if cfg.mode == "prior":
            freeze_base(model)
    else:
        model = UNet(replace(cfg.renderer_config(), mode="prior"))
        for p in model.parameters():
            p.requires_grad_(False)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not fit the stored config: {e}") from e
    schedule = NoiseSchedule(np.asarray(header["alphas"], dtype=np.float64),
                             np.asarray(header["alpha_bars"], dtype=np.float64))
    return Checkpoint(model, cfg, schedule, header.get("extra", {}))
