"""Relative pose by direct photometric alignment, in two stages.

Stage one fits a 6-DoF pose plus a single fronto-parallel depth over an
image pyramid. Stage two rotation-aligns the target with the coarse
rotation, so the remaining motion is mostly translation, and fits a
residual pose together with a per-pixel depth map.

Poses use the renderer convention: ``pose`` warps the source ``I`` into
the target ``Ic`` through ``Ic(p) ~ I(g(p, D(p), pose))``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .geometry import (Camera, PoseSE3, epipolar_coords, nearest_rotation, pose_compose,
                       pose_tensors, rotation_align_warp, so3_exp)
from .fitcli.optim import AdamState, adam_step

DEFAULT_LR = 1e-2
DEFAULT_LEVELS = 3
DIVERGENCE_PATIENCE = 50
INIT_DEPTH = 4.0
DEPTH_SMOOTHNESS = 0.01
# residual rotation moves slowly; depth moves fast
REFINE_LR_SCALE = {"drot": 0.01, "dtrans": 0.1, "log_depth": 3.0}
DEPTH_WARMUP = 0.5


@dataclass
class PoseEstimate:
    coarse: PoseSE3
    delta_rotation: np.ndarray      # axis-angle, aligned frame
    delta_translation: np.ndarray   # aligned frame
    final: PoseSE3
    loss: float
    coarse_loss: float              # refinement objective at the coarse pose
    diverged: bool = False


@dataclass
class _FitOutcome:
    params: dict[str, np.ndarray]
    loss: float
    diverged: bool


def downsample(img: np.ndarray) -> np.ndarray:
    """2x2 box average (odd trailing row/column dropped)."""
    H, W = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    x = img[:H, :W]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _pyramid(img: np.ndarray, cam: Camera, levels: int):
    out = [(img, cam)]
    for _ in range(levels - 1):
        if img.shape[0] % 2 or img.shape[1] % 2 or min(img.shape[:2]) < 16:
            break   # odd or tiny rasters get fewer levels
        img = downsample(img)
        cam = cam.scaled(0.5)
        out.append((img, cam))
    return out[::-1]


def photometric_loss(graph: dc.Graph, I: np.ndarray, target: np.ndarray, pose, depth,
                     cam: Camera, mask: np.ndarray | None = None) -> dc.Tensor:
    """Mean |I(g(p, depth, pose)) - target(p)| over pixels whose sample and
    target are both valid. ``depth`` is ``[1]`` or ``[H, W, 1]``."""
    R, t = pose_tensors(graph, pose)
    coords, _ = epipolar_coords(R, t, depth, cam)
    H, W = cam.height, cam.width
    warped, valid = dc.bilinear_sample(graph.const(I), coords.reshape((H, W, 2)))
    w = (valid > 0.999).astype(np.float64)[..., None]
    if mask is not None:
        w = w * mask.reshape(H, W, 1)
    total = w.sum()
    if total < 1:
        raise FloatingPointError("warp leaves no valid pixels")
    C = I.shape[-1]
    wc = graph.const(np.broadcast_to(w, (H, W, C)) / (total * C))
    return dc.sum_(dc.abs_(warped - graph.const(target)) * wc)


def _log_depth_smoothness(s: dc.Tensor) -> dc.Tensor:
    """Total variation of log-depth; tolerant of depth discontinuities."""
    dx = s[:, 1:] - s[:, :-1]
    dy = s[1:, :] - s[:-1, :]
    return dc.mean(dc.abs_(dx)) + dc.mean(dc.abs_(dy))


def _optimize(objective, params: dict[str, np.ndarray], iters: int, lr: float,
              lr_scale: dict | None = None) -> _FitOutcome:
    """Adam on ``objective(graph, leaves)`` keeping the best iterate.

    Stops early, flagged as diverged, once the loss has risen for
    DIVERGENCE_PATIENCE consecutive steps.
    """
    state = AdamState()
    best = (np.inf, {k: v.copy() for k, v in params.items()})
    prev, rising, diverged = np.inf, 0, False
    for _ in range(iters):
        g = dc.Graph()
        leaves = {k: g.leaf(v, name=k) for k, v in params.items()}
        try:
            loss = objective(g, leaves)
        except FloatingPointError:
            diverged = True
            break
        val = float(loss.value)
        if val < best[0]:
            best = (val, {k: v.copy() for k, v in params.items()})
        rising = rising + 1 if val > prev else 0
        prev = val
        if rising >= DIVERGENCE_PATIENCE:
            diverged = True
            break
        grads = g.backward(loss, wrt=leaves.values())
        adam_step(params, {k: grads[t.id] for k, t in leaves.items()}, state, lr,
                  lr_scale=lr_scale)
    # score the final iterate too
    try:
        g = dc.Graph()
        val = float(objective(g, {k: g.const(v) for k, v in params.items()}).value)
        if val < best[0]:
            best = (val, {k: v.copy() for k, v in params.items()})
    except FloatingPointError:
        diverged = True
    if diverged:
        warnings.warn("pose fit diverged; returning best iterate", RuntimeWarning)
    return _FitOutcome(best[1], best[0], diverged)


def _pose_from_vector(x: np.ndarray) -> PoseSE3:
    return PoseSE3(nearest_rotation(so3_exp(x[:3])), np.array(x[3:6], dtype=np.float64))


def fit_pose_coarse(I: np.ndarray, Ic: np.ndarray, cam: Camera, iters: int = 200,
                    seed: int = 0, levels: int = DEFAULT_LEVELS, lr: float = DEFAULT_LR,
                    init: PoseSE3 | None = None, return_loss: bool = False):
    """Six pose parameters and one log-depth, coarse to fine from identity.

    ``iters`` is per pyramid level. ``seed`` jitters the start by at most
    1e-6 so repeated calls are reproducible but not tied to exact zeros.
    """
    rng = np.random.default_rng(seed)
    x = np.zeros(6) if init is None else init.to_vector()
    x = x + rng.uniform(-1e-6, 1e-6, size=6)
    params = {"pose": x, "log_depth": np.array([np.log(INIT_DEPTH)])}
    outcome = None
    diverged = False
    for (src, c), (tgt, _) in zip(_pyramid(I, cam, levels), _pyramid(Ic, cam, levels)):
        def objective(g, L, src=src, tgt=tgt, c=c):
            return photometric_loss(g, src, tgt, L["pose"], dc.exp(L["log_depth"]), c)

        outcome = _optimize(objective, params, iters, lr)
        params = {k: v.copy() for k, v in outcome.params.items()}
        diverged |= outcome.diverged
    pose = _pose_from_vector(params["pose"])
    if return_loss:
        return pose, outcome.loss, float(np.exp(params["log_depth"][0])), diverged
    return pose


def refine_pose_rotation_aligned(I: np.ndarray, Ic: np.ndarray, cam: Camera,
                                 coarse: PoseSE3, iters: int = 200, lr: float = DEFAULT_LR,
                                 init_depth: float = INIT_DEPTH) -> PoseEstimate:
    """Residual pose on the rotation-aligned pair with per-pixel depth.

    The aligned target is ``Ic`` resampled at ``K R0 K^-1 q``; in that frame
    the model pose is ``(dR, R0^T t0 + dt)`` so ``dt`` is expressed in the
    aligned frame, and ``final = [R0 | 0] o [dR | R0^T t0 + dt]``.
    """
    H, W = cam.height, cam.width
    R0, t0 = coarse.R, coarse.t
    aligned = rotation_align_warp(Ic, R0, cam)
    inside = rotation_align_warp(np.ones((H, W, 1)), R0, cam)[..., 0] > 0.999
    base_t = R0.T @ t0
    params = {"drot": np.zeros(3), "dtrans": np.zeros(3),
              "log_depth": np.full((H, W, 1), np.log(init_depth))}

    def objective(g, L):
        base = g.const(base_t, np.float64)
        pose_a = dc.concat([L["drot"], L["dtrans"] + base])
        s = L["log_depth"]
        data = photometric_loss(g, I, aligned, pose_a, dc.exp(s), cam, mask=inside)
        return data + DEPTH_SMOOTHNESS * _log_depth_smoothness(s)

    g = dc.Graph()
    start = float(objective(g, {k: g.const(v) for k, v in params.items()}).value)
    # depth first with the pose frozen, then everything jointly
    warm = int(iters * DEPTH_WARMUP)
    frozen = dict(REFINE_LR_SCALE, drot=0.0, dtrans=0.0)
    outcome = _optimize(objective, params, warm, lr, frozen)
    outcome = _optimize(objective, outcome.params, iters - warm, lr, REFINE_LR_SCALE)
    dr, dt = outcome.params["drot"], outcome.params["dtrans"]
    aligned_pose = PoseSE3(nearest_rotation(so3_exp(dr)), base_t + dt)
    final = pose_compose(PoseSE3(R0, np.zeros(3)), aligned_pose)
    final = PoseSE3(nearest_rotation(final.R), final.t)
    return PoseEstimate(coarse, dr.copy(), dt.copy(), final, outcome.loss,
                        start, outcome.diverged)


def estimate_pose(I: np.ndarray, Ic: np.ndarray, cam: Camera, coarse_iters: int = 200,
                  refine_iters: int = 200, seed: int = 0, levels: int = DEFAULT_LEVELS,
                  lr: float = DEFAULT_LR) -> PoseEstimate:
    """Coarse pyramid fit followed by rotation-aligned refinement."""
    coarse, _, depth, div = fit_pose_coarse(I, Ic, cam, coarse_iters, seed, levels, lr,
                                                return_loss=True)
    est = refine_pose_rotation_aligned(I, Ic, cam, coarse, refine_iters, lr, depth)
    est.diverged |= div
    return est


def fit_pose_single_stage(I: np.ndarray, Ic: np.ndarray, cam: Camera, iters: int,
                          lr: float = DEFAULT_LR, seed: int = 0) -> PoseEstimate:
    """Baseline: pose and per-pixel depth jointly at full resolution from
    identity, without pyramid or rotation alignment."""
    rng = np.random.default_rng(seed)
    H, W = cam.height, cam.width
    params = {"pose": rng.uniform(-1e-6, 1e-6, size=6),
              "log_depth": np.full((H, W, 1), np.log(INIT_DEPTH))}

    def objective(g, L):
        s = L["log_depth"]
        return photometric_loss(g, I, Ic, L["pose"], dc.exp(s), cam) + \
            DEPTH_SMOOTHNESS * _log_depth_smoothness(s)

    outcome = _optimize(objective, params, iters, lr)
    pose = _pose_from_vector(outcome.params["pose"])
    return PoseEstimate(PoseSE3.identity(), outcome.params["pose"][:3].copy(),
                        outcome.params["pose"][3:].copy(), pose, outcome.loss, np.inf,
                        outcome.diverged)
