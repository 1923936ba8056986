"""Command-line entry point: ``deferred-diffusion <command> [options]``.

Every command reads an optional ``--config`` file (see :mod:`.config`) and
``--set section.key=value`` overrides; explicit flags win over both.

Exit codes: 0 success, 2 usage or configuration error, 3 missing or invalid
input data, 4 unreadable or mismatched checkpoint, 5 training diverged,
1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import head
from .config import ConfigError, load_config
from .evaluate import ReenactmentJob, render_frame, run_protocol, score_rendered, temporal_slice
from .imageio import load_png, save_png
from .pipeline import (
    CheckpointError,
    TrainingError,
    load_checkpoint,
    load_corpus,
    pretrain_base,
    rig_cameras,
    save_checkpoint,
    save_corpus,
    scene_from_dict,
    scene_to_dict,
    synthesize_dataset,
    train,
)

log = logging.getLogger("deferred_diffusion")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_TRAINING = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _codes(text: str, dim: int, name: str) -> np.ndarray:
    try:
        z = np.array([float(t) for t in text.split(",")])
    except ValueError as e:
        raise UsageError(f"{name}: expected {dim} comma-separated numbers") from e
    if z.shape != (dim,):
        raise UsageError(f"{name}: expected {dim} values, got {z.size}")
    return z


def _kv(d: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in d.items())


# ------------------------------------------------------------------ commands


def cmd_synth_data(args, cfg):
    out = cfg.path("corpus", args.out)
    corpus = synthesize_dataset(cfg.scene)
    save_corpus(corpus, out)
    sizes = {s: len(corpus.split(s)) for s in ("train", "holdout-view", "holdout-expression")}
    print(f"wrote {len(corpus)} frames to {out} {sizes} digest {corpus.digest()[:16]}")


def _read_points(path: Path, samples: int, seed: int) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    if path.suffix == ".obj":
        mesh = head.load_obj(path)
        if not len(mesh.faces):
            raise ValueError(f"{path} has no faces")
        return head.sample_pointcloud(mesh, samples, np.random.default_rng(seed)).points
    pts = np.loadtxt(path, ndmin=2)
    if pts.shape[1] < 3:
        raise ValueError(f"{path}: expected at least 3 columns (x y z)")
    return pts[:, :3]


def cmd_fit(args, cfg):
    pts = _read_points(Path(args.points), args.samples, args.seed)
    init = (_codes(args.init_id, head.D_ID, "--init-id") if args.init_id else np.zeros(head.D_ID),
            _codes(args.init_exp, head.D_EXP, "--init-exp") if args.init_exp else np.zeros(head.D_EXP))
    res = head.fit_codes(pts, init, head.FitConfig(max_iters=args.iters, resolution=cfg.scene.proxy_resolution))
    text = _kv({"z_id": res.z_id.tolist(), "z_exp": res.z_exp.tolist(), "residual": res.residual,
                "converged": res.converged, "iterations": res.iterations})
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")


def _corpus(args, cfg):
    return load_corpus(cfg.path("corpus", args.corpus))


def cmd_pretrain(args, cfg):
    corpus = _corpus(args, cfg)
    base, losses = pretrain_base(corpus, cfg.train)
    out = save_checkpoint(cfg.path("base", args.out), base, cfg.train,
                          extra={"scene": scene_to_dict(corpus.scene), "final_loss": float(np.mean(losses[-100:]))})
    print(f"pretrained {len(losses)} steps, final loss {np.mean(losses[-100:]):.4f} -> {out}")


def cmd_train(args, cfg):
    corpus = _corpus(args, cfg)
    base = None
    base_path = args.base or cfg.paths.get("base")
    if cfg.train.mode == "prior" and base_path and Path(base_path).exists():
        base = load_checkpoint(base_path).model
        log.info("using pretrained base %s", base_path)
    res = train(corpus, cfg.train, base)
    extra = {"scene": scene_to_dict(corpus.scene), "corpus_digest": corpus.digest(),
             "final_loss": float(np.mean(res.losses[-100:])) if res.losses else None}
    out = save_checkpoint(cfg.path("checkpoint", args.out), res.model, cfg.train, extra=extra)
    print(f"trained {len(res.losses)} steps -> {out}")


def _avatar(args, cfg):
    ck = load_checkpoint(cfg.path("checkpoint", args.checkpoint))
    if not hasattr(ck.model, "atlas"):
        raise CheckpointError("expected an avatar checkpoint, got a base network")
    return ck


def cmd_render(args, cfg):
    z_exp = _codes(args.z_exp, head.D_EXP, "--z-exp") if args.z_exp else np.zeros(head.D_EXP)
    ck = _avatar(args, cfg)
    scene = scene_from_dict(ck.extra["scene"]) if "scene" in ck.extra else cfg.scene
    cams = rig_cameras(scene)
    cam_id = scene.heldout_camera if args.camera is None else args.camera
    if not 0 <= cam_id < len(cams):
        raise UsageError(f"--camera must be in [0, {len(cams)})")
    img = render_frame(ck.model, scene.z_id, z_exp, cams[cam_id], ck.schedule, cfg.eval.steps, cfg.eval.seed,
                       scene.proxy_resolution)
    out = Path(args.out)
    save_png(img, out)
    print(f"wrote {out}")


def cmd_reenact(args, cfg):
    ck = _avatar(args, cfg)
    corpus = _corpus(args, cfg)
    job = ReenactmentJob("self", cfg.eval.steps, cfg.eval.seed, cfg.eval.splits)
    rep = run_protocol(ck.model, corpus, ck.schedule, job, cfg.path("out", args.out))
    print(rep.to_text().split("psnr.")[0], end="")


def _driving(path: Path) -> np.ndarray:
    if path.is_dir():
        corpus = load_corpus(path)
        seen, codes = set(), []
        for r in corpus.records:
            if r.frame not in seen:
                seen.add(r.frame)
                codes.append(r.z_exp)
        return np.stack(codes)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    z = np.loadtxt(path, ndmin=2)
    if z.shape[1] != head.D_EXP:
        raise ValueError(f"{path}: expected {head.D_EXP} columns of expression codes")
    return z


def cmd_animate(args, cfg):
    ck = _avatar(args, cfg)
    driving = _driving(Path(args.driving))
    if args.frames:
        driving = driving[:args.frames]
    corpus = _corpus(args, cfg)
    job = ReenactmentJob("cross", cfg.eval.steps, cfg.eval.seed, driving=driving, camera=cfg.eval.camera)
    out = cfg.path("out", args.out)
    rep = run_protocol(ck.model, corpus, ck.schedule, job, out)
    print(f"rendered {rep.frame_count} frames to {out / 'frames'}")


def cmd_eval(args, cfg):
    corpus = _corpus(args, cfg)
    rep = score_rendered(corpus, args.rendered, cfg.eval.splits)
    if args.out:
        rep.save(args.out)
    print(rep.to_text().split("psnr.")[0], end="")


def _rows(text: str | None):
    if not text:
        return None
    a, sep, b = text.partition(":")
    if not sep:
        raise UsageError("--rows must look like START:STOP")
    return int(a), int(b)


def cmd_slice(args, cfg):
    paths = sorted(Path(args.frames).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {args.frames}")
    frames = np.stack([load_png(p)[..., :3] for p in paths])
    col = frames.shape[2] // 2 if args.column is None else args.column
    strip = temporal_slice(frames, col, _rows(args.rows))
    save_png(strip, args.out)
    print(f"wrote {strip.shape[1]}x{strip.shape[0]} slice to {args.out}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key-value config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="shortcut for scene.seed / train.seed / eval.seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")

    p = argparse.ArgumentParser(prog="deferred-diffusion",
                                description="Deferred-diffusion head avatars on a synthetic multi-view corpus.",
                                epilog="exit codes: 0 ok, 1 internal, 2 usage/config, 3 data, 4 checkpoint, "
                                       "5 training diverged")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="synthesize the multi-view corpus")
    s.add_argument("--out", help="corpus directory")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("fit", parents=[common], help="fit identity/expression codes to a point cloud")
    s.add_argument("points", help="OBJ mesh (surface sampled) or text file with x y z columns")
    s.add_argument("--samples", type=int, default=2000, help="points sampled from an OBJ surface")
    s.add_argument("--iters", type=int, default=40, help="fitting iterations")
    s.add_argument("--init-id", help="comma-separated starting z_id (default zeros)")
    s.add_argument("--init-exp", help="comma-separated starting z_exp (default zeros)")
    s.add_argument("--out", help="write the fitted codes here")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("pretrain", parents=[common], help="pretrain the unconditional base network")
    s.add_argument("--corpus", help="corpus directory (default: paths.corpus)")
    s.add_argument("--out", help="base checkpoint path")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="train an avatar")
    s.add_argument("--corpus", help="corpus directory (default: paths.corpus)")
    s.add_argument("--base", help="pretrained base checkpoint (prior mode)")
    s.add_argument("--out", help="avatar checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="render one frame")
    s.add_argument("--checkpoint", help="avatar checkpoint (default: paths.checkpoint)")
    s.add_argument("--z-exp", help="comma-separated expression code")
    s.add_argument("--camera", type=int, help="rig camera index (default: held-out camera)")
    s.add_argument("--out", required=True, help="PNG path")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("reenact", parents=[common], help="self-reenactment on the held-out splits")
    s.add_argument("--checkpoint", help="avatar checkpoint (default: paths.checkpoint)")
    s.add_argument("--corpus", help="corpus directory (default: paths.corpus)")
    s.add_argument("--out", help="output directory for frames and report")
    s.set_defaults(func=cmd_reenact)

    s = sub.add_parser("animate", parents=[common], help="drive the avatar with foreign expression codes")
    s.add_argument("--checkpoint", help="avatar checkpoint (default: paths.checkpoint)")
    s.add_argument("--corpus", help="the avatar's own corpus (cameras and identity)")
    s.add_argument("--driving", required=True, help="corpus directory or text file with one code per row")
    s.add_argument("--frames", type=int, help="use at most this many driving frames")
    s.add_argument("--out", help="output directory (default: paths.out)")
    s.set_defaults(func=cmd_animate)

    s = sub.add_parser("eval", parents=[common], help="score rendered frames against ground truth")
    s.add_argument("--corpus", help="corpus directory (default: paths.corpus)")
    s.add_argument("--rendered", required=True, help="directory with <split>/<key>.png frames")
    s.add_argument("--out", help="write report.txt and report.json here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("slice", parents=[common], help="temporal slice of a frame directory")
    s.add_argument("frames", help="directory of numbered PNG frames")
    s.add_argument("--column", type=int, help="pixel column (default: centre)")
    s.add_argument("--rows", help="row range START:STOP (default: all rows)")
    s.add_argument("--out", required=True, help="PNG path")
    s.set_defaults(func=cmd_slice)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"{s}.seed={args.seed}" for s in ("scene", "train", "eval")]
        cfg = load_config(args.config, overrides)
        args.func(args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except (FileNotFoundError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
