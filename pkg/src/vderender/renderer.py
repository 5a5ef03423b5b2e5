"""Relaxed volumetric rendering on a single source image.

Every target pixel ``p`` owns a ray sampled at the schedule distances
``t_i``; the depth logits of the source view are epipolar-projected onto
those samples, softmaxed, and used as convex weights over the projected
source colors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import Camera, SampleSchedule, epipolar_coords, pose_tensors

# logit assigned to samples that fall outside the source raster
OUT_OF_BOUNDS_LOGIT = -30.0


@dataclass
class LogitVolume:
    grid: Tensor                  # [H, W, N] on the source raster
    schedule: SampleSchedule

    def __post_init__(self):
        if self.grid.shape[-1] != self.schedule.N:
            raise ValueError(
                f"logit channels {self.grid.shape[-1]} != schedule N {self.schedule.N}")


@dataclass
class ProjectedProbVolume:
    grid: Tensor                  # [H, W, N] per target pixel, rows sum to 1
    validity: np.ndarray          # [H, W, 1]
    schedule: SampleSchedule | None = None


def sample_coords(graph: dc.Graph, pose, cam: Camera, depths) -> Tensor:
    """g(p, depth, pose, K) for every target pixel and every depth sample."""
    R, t = pose_tensors(graph, pose)
    coords, _ = epipolar_coords(R, t, depths, cam)
    return coords


def project_depth_logits(DL: LogitVolume, pose, cam: Camera,
                         coords: Tensor | None = None) -> ProjectedProbVolume:
    graph = DL.grid.graph
    if coords is None:
        coords = sample_coords(graph, pose, cam, DL.schedule.distances)
    sampled, valid = dc.bilinear_sample_channels(DL.grid, coords, fill=OUT_OF_BOUNDS_LOGIT)
    probs = dc.softmax_channels(sampled)
    return ProjectedProbVolume(probs, valid.max(axis=-1, keepdims=True), DL.schedule)


def coarse_synthesize(Ivc, DP: ProjectedProbVolume, pose, cam: Camera,
                      schedule: SampleSchedule | None = None,
                      coords: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """I''_c(p) = sum_i DP_i(p) Ivc(g(p, t_i)).

    Returns the image ``[H,W,C]`` and the projected colors ``[H,W,N,C]``
    (the sampler head consumes the latter).
    """
    graph = DP.grid.graph
    schedule = schedule or DP.schedule
    if schedule is None:
        raise ValueError("no sample schedule available")
    if DP.schedule is not None and DP.schedule.N != schedule.N or \
            DP.grid.shape[-1] != schedule.N:
        raise ValueError("schedule mismatch between probability volume and renderer")
    Ivc = dc._as_tensor(graph, Ivc)
    if coords is None:
        coords = sample_coords(graph, pose, cam, schedule.distances)
    colors, _ = dc.bilinear_sample(Ivc, coords)
    return dc.weighted_sum(DP.grid, colors), colors


def depth_from_logits(DL: LogitVolume) -> Tensor:
    """Expected distance under the channel softmax, ``[H, W, 1]``."""
    probs = dc.softmax_channels(DL.grid)
    t = DL.grid.graph.const(DL.schedule.distances[:, None])
    return expected_value(probs, t)


def expected_value(probs: Tensor, values) -> Tensor:
    """sum_k probs[..., k] * values[..., k]; ``values`` is [N, 1] or [..., N]."""
    graph = probs.graph
    values = dc._as_tensor(graph, values)
    if values.shape == probs.shape:
        return dc.sum_(probs * values, axis=-1, keepdims=True)
    vals = dc.expand(values.reshape((values.shape[0],)), probs.shape)
    return dc.sum_(probs * vals, axis=-1, keepdims=True)


def occlusion_mask(DL: LogitVolume, pose, cam: Camera,
                   coords: Tensor | None = None) -> Tensor:
    """O_c(p) = clamp(sum_i softmax(DL)_i(g(p, t_i)), 0, 1).

    Softmax is taken on the source raster before sampling; samples outside
    the source contribute zero.
    """
    graph = DL.grid.graph
    if coords is None:
        coords = sample_coords(graph, pose, cam, DL.schedule.distances)
    probs = dc.softmax_channels(DL.grid)
    sampled, _ = dc.bilinear_sample_channels(probs, coords, fill=0.0)
    return dc.clamp(dc.sum_(sampled, axis=-1, keepdims=True), 0.0, 1.0)


def novel_view_depth(tstar, wstar) -> Tensor:
    """D_c(p) = sum_k t*_k(p) w*_k(p)."""
    graph = dc._graph_of(tstar, wstar)
    tstar, wstar = dc._as_tensor(graph, tstar), dc._as_tensor(graph, wstar)
    err = np.abs(wstar.value.sum(axis=-1) - 1.0).max()
    if err > 1e-4:
        raise ValueError(f"sample weights do not sum to one (max error {err:.2e})")
    return dc.sum_(tstar * wstar, axis=-1, keepdims=True)


def clamp_colors(img: np.ndarray) -> np.ndarray:
    """Final emission clamp; never applied inside the differentiable graph."""
    return np.clip(img, -0.5, 0.5)
