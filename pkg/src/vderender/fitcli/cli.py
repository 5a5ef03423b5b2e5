"""Command-line surface: synth, fit, render, eval, pose.

Exit codes: 0 ok, 1 runtime failure, 2 usage error. ``NVDE_THREADS``
caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .. import metrics, posefit
from ..geometry import PoseSE3
from ..synthoracle import generate_scene, lateral_poses
from . import io
from .fit import FitDiverged, fit_scene, render, unpack_checkpoint
from .model import FitConfig

log = logging.getLogger("vderender")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DEFAULT_BASELINE = 0.3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _pose_arg(text: str) -> PoseSE3:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad pose {text!r}") from None
    if len(vals) != 6:
        raise argparse.ArgumentTypeError("pose needs 6 values: rx,ry,rz,tx,ty,tz")
    return PoseSE3.from_vector(vals)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vderender", description="Single-image view synthesis with "
                "view-dependent effects, fitted per scene.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic frame set")
    s.add_argument("--spec", required=True, help="scene JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None, help="overrides the scene seed")
    s.add_argument("--baseline", type=float, default=DEFAULT_BASELINE,
                   help="lateral baseline when the scene lists no poses")

    f = sub.add_parser("fit", help="fit a scene from a frame directory")
    f.add_argument("--frames", required=True)
    f.add_argument("--out", required=True, help="checkpoint path")
    f.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    f.add_argument("--config", help="FitConfig JSON; flags below override it")
    f.add_argument("--iters", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--seed", type=int)
    f.add_argument("--dtype", choices=["float32", "float64"])
    f.add_argument("--gamma-mode", choices=["learnable", "periodic"])
    f.add_argument("--pose-source", choices=["gt", "posefit"])
    f.add_argument("--vde", dest="vde_enabled", action=argparse.BooleanOptionalAction,
                   default=None)

    r = sub.add_parser("render", help="render a novel view from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--pose", required=True, type=_pose_arg, help="rx,ry,rz,tx,ty,tz")
    r.add_argument("--out", default=".", help="output directory")
    r.add_argument("--no-vde", action="store_true", help="disable VDE infusion")

    e = sub.add_parser("eval", help="compare two images")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--mask", help="PFM mask; nonzero pixels are evaluated")
    e.add_argument("--out", help="CSV path (default: stdout)")
    e.add_argument("--scene-id", default="0")
    e.add_argument("--frame-id", default="0")

    q = sub.add_parser("pose", help="estimate the relative pose of an image pair")
    q.add_argument("--source", required=True)
    q.add_argument("--target", required=True)
    q.add_argument("--intrinsics", required=True,
                   help="JSON holding intrinsics {fx,fy,cx,cy,w,h} (e.g. scene.json)")
    q.add_argument("--out", required=True)
    q.add_argument("--iters", type=int, default=200, help="per stage and pyramid level")
    q.add_argument("--seed", type=int, default=0)
    return p


def cmd_synth(a) -> None:
    spec, poses = io.load_scene_file(a.spec)
    if a.seed is not None:
        spec.seed = a.seed
    frames = generate_scene(spec, poses or lateral_poses(a.baseline))
    io.save_frames(a.out, spec, frames)


def _fit_config(a) -> FitConfig:
    base = io.load_json(a.config) if a.config else {}
    for key in ("iters", "lr", "seed", "dtype", "gamma_mode", "pose_source", "vde_enabled"):
        val = getattr(a, key)
        if val is not None:
            base[key] = val
    return FitConfig.from_dict(base)


def cmd_fit(a) -> None:
    cfg = _fit_config(a)
    _, frames = io.load_frames(a.frames)
    ckpt, result = fit_scene(frames, cfg, log_every=100)
    io.save_checkpoint(a.out, ckpt)
    trace = a.trace or f"{a.out}.trace.csv"
    with open(trace, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss"])
        w.writerows((i, repr(l)) for i, l in enumerate(result.losses))
    log.info("fit done in %.1fs, final loss %.6f", result.seconds, result.losses[-1])


def cmd_render(a) -> None:
    params, source, cam, cfg = unpack_checkpoint(io.load_checkpoint(a.ckpt))
    out_dir = Path(a.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    view = render(params, source, a.pose, cam, cfg, vde_enabled=False if a.no_vde else None)
    io.save_png(out_dir / "novel.png", view.fine.value)
    io.save_pfm(out_dir / "depth_source.pfm", view.Dhat.value)
    io.save_pfm(out_dir / "depth_novel.pfm", view.novel_depth().value)
    act = view.vde_activation()
    io.save_pfm(out_dir / "vde.pfm", np.zeros(source.shape[:2]) if act is None else act.value)
    io.save_pfm(out_dir / "occlusion.pfm", view.occlusion.value)


def cmd_eval(a) -> None:
    pred, gt = io.load_png(a.pred), io.load_png(a.gt)
    mask = io.load_pfm(a.mask) > 0 if a.mask else None
    rep = metrics.report(pred, gt, mask)
    rows = [(a.scene_id, a.frame_id, rep)]
    if a.out:
        metrics.write_csv(a.out, rows)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(metrics.CSV_FIELDS)
        w.writerow([a.scene_id, a.frame_id, rep.mae, rep.rmse, rep.psnr, rep.psnr_lf, rep.ssim])


def cmd_pose(a) -> None:
    cam = io.Camera.from_dict(io.load_json(a.intrinsics)["intrinsics"])
    I, Ic = io.load_png(a.source), io.load_png(a.target)
    est = posefit.estimate_pose(I, Ic, cam, a.iters, a.iters, seed=a.seed)
    io.save_json(a.out, {"pose": io.pose_to_json(est.final),
                         "coarse": io.pose_to_json(est.coarse),
                         "delta_rotation": est.delta_rotation.tolist(),
                         "delta_translation": est.delta_translation.tolist(),
                         "loss": est.loss, "diverged": est.diverged})


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "render": cmd_render, "eval": cmd_eval,
            "pose": cmd_pose}


def main(argv: list[str] | None = None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:      # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = os.environ.get("NVDE_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"NVDE_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=limit):
            COMMANDS[a.command](a)
    except (OSError, ValueError, KeyError, FitDiverged, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
