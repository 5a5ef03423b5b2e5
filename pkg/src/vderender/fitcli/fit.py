"""Per-scene fitting loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .. import diffcore as dc
from ..geometry import Camera, PoseSE3
from ..synthoracle import FrameSet
from .io import Checkpoint, camera_from_tensor, camera_to_tensor
from ..objective import LossWeights, total_loss
from ..pipeline import ViewOutputs
from .model import FitConfig, init_params, render_view
from .optim import AdamState, adam_step, halving_lr

log = logging.getLogger(__name__)


class FitDiverged(RuntimeError):
    pass


@dataclass
class FitResult:
    params: dict[str, np.ndarray]
    config: FitConfig
    losses: list[float] = field(default_factory=list)
    skipped: int = 0
    seconds: float = 0.0


def step_loss(graph: dc.Graph, leaves: dict, source: np.ndarray,
              targets: list[tuple[np.ndarray, PoseSE3]], cam: Camera,
              cfg: FitConfig) -> dc.Tensor:
    """Mean of the total loss over the target views."""
    weights = LossWeights(alpha_sm=cfg.alpha_sm)
    loss = None
    for gt, pose in targets:
        out = render_view(graph, leaves, source, pose, cam, cfg)
        l = total_loss(out.coarse, out.fine, gt, out.occlusion, out.Dhat, source,
                       weights, validity=out.validity)
        loss = l if loss is None else loss + l
    return loss * (1.0 / len(targets))


def fit_views(source: np.ndarray, targets: list[tuple[np.ndarray, PoseSE3]],
              cam: Camera, cfg: FitConfig, params: dict | None = None,
              log_every: int = 0) -> FitResult:
    """Optimize scene features and heads against every target each step.

    ``targets`` holds (image, renderer pose) pairs. Deterministic for a fixed
    config. A non-finite forward pass raises FitDiverged.
    """
    if not targets:
        raise ValueError("need at least one target view")
    dtype = cfg.np_dtype
    source = np.asarray(source, dtype=dtype)
    targets = [(np.asarray(im, dtype=dtype), pose) for im, pose in targets]
    if params is None:
        params = init_params(cfg, cam)
    params = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    state = AdamState()
    scale = {"W_D": cfg.feature_lr_scale, "W_V": cfg.feature_lr_scale}
    result = FitResult(params, cfg)
    t0 = time.perf_counter()
    for it in range(cfg.iters):
        # one tape per target keeps peak memory at a single view
        total, by_name = 0.0, {k: np.zeros_like(v) for k, v in params.items()}
        for target in targets:
            graph = dc.Graph(dtype=dtype)
            leaves = {k: graph.leaf(v, name=k) for k, v in params.items()}
            try:
                loss = step_loss(graph, leaves, source, [target], cam, cfg)
            except FloatingPointError as exc:
                raise FitDiverged(f"iteration {it}: {exc}") from exc
            grads = graph.backward(loss * (1.0 / len(targets)), wrt=leaves.values())
            for k, t in leaves.items():
                by_name[k] += grads[t.id]
            total += float(loss.value) / len(targets)
            del graph, leaves, loss, grads
        lr = halving_lr(cfg.lr, it, cfg.iters, tuple(cfg.lr_halving_points))
        adam_step(params, by_name, state, lr, cfg.beta1, cfg.beta2, lr_scale=scale)
        result.losses.append(total)
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.6f", it, result.losses[-1])
    result.skipped = state.skipped
    result.seconds = time.perf_counter() - t0
    return result


def target_poses(frames: FrameSet, cfg: FitConfig) -> dict[int, PoseSE3]:
    """Renderer poses of the training targets, from GT or estimated."""
    from .. import posefit

    out = {}
    for k in cfg.train_frames:
        if cfg.pose_source == "gt":
            out[k] = frames.render_pose(k)
        else:
            out[k] = posefit.estimate_pose(frames.images[0], frames.images[k], frames.cam,
                                           seed=cfg.seed).final
    return out


def fit_scene(frames: FrameSet, cfg: FitConfig, log_every: int = 0
              ) -> tuple[Checkpoint, FitResult]:
    """Fit frame 0 as the source against the configured neighbor frames."""
    if len(frames.images) < 3:
        raise ValueError("fitting needs at least 3 frames")
    if frames.cam is None:
        raise ValueError("frames carry no camera")
    poses = target_poses(frames, cfg)
    targets = [(frames.images[k], poses[k]) for k in cfg.train_frames]
    result = fit_views(frames.images[0], targets, frames.cam, cfg, log_every=log_every)
    return make_checkpoint(result, frames.images[0], frames.cam, poses), result


def make_checkpoint(result: FitResult, source: np.ndarray, cam: Camera,
                    poses: dict[int, PoseSE3]) -> Checkpoint:
    cfg = result.config
    tensors = dict(result.params)
    tensors["source"] = np.asarray(source, dtype=cfg.np_dtype)
    tensors["intrinsics"] = camera_to_tensor(cam)
    for k, pose in poses.items():
        tensors[f"pose.{k}"] = pose.to_vector()
    config = dict(cfg.to_dict(), hash=cfg.hash())
    return Checkpoint(tensors, config)


def unpack_checkpoint(ckpt: Checkpoint) -> tuple[dict, np.ndarray, Camera, FitConfig]:
    """(model params, source image, camera, config) from a checkpoint."""
    cfg = FitConfig.from_dict(ckpt.config)
    if ckpt.config.get("hash") not in (None, cfg.hash()):
        raise ValueError("checkpoint config hash mismatch")
    t = ckpt.tensors
    params = {k: v for k, v in t.items()
              if k in ("W_D", "W_V") or k.split(".")[0] in ("gamma", "F_D", "F_V", "F_S")}
    return params, t["source"], camera_from_tensor(t["intrinsics"]), cfg


def render(params: dict, source: np.ndarray, pose, cam: Camera, cfg: FitConfig,
           vde_enabled: bool | None = None) -> ViewOutputs:
    """Forward pass only, at the config precision."""
    graph = dc.Graph(dtype=cfg.np_dtype)
    consts = {k: graph.const(v) for k, v in params.items()}
    return render_view(graph, consts, np.asarray(source, dtype=cfg.np_dtype), pose, cam,
                       cfg, vde_enabled)
