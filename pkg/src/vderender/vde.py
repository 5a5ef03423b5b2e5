"""View-dependent effects as negative disparity.

Reflections "follow" the camera: relative to their surface they move
against the rigid flow. The source image is resampled along the negative
depth half of each epipolar line (hypothetical depths ``1/v_j < 0``) under
the target translation only, and the result is blended back into the
high-frequency residual of the source.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import Camera, epipolar_coords
from .renderer import OUT_OF_BOUNDS_LOGIT, ProjectedProbVolume

DEFAULT_EPSILON = 1e-4
BOX_SIZE = 5


@dataclass
class VdeSchedule:
    v: Tensor            # [H, W, N_v] disparities, all <= -epsilon
    epsilon: float

    @property
    def depths(self) -> Tensor:
        return 1.0 / self.v


def low_pass(I) -> Tensor:
    return dc.conv2d_fixed(I, dc.box_kernel(BOX_SIZE))


def high_freq_residual(I: Tensor) -> Tensor:
    """I_H = I - box5x5(I)."""
    return I - low_pass(I)


def vde_disparity_schedule(Dhat: Tensor, N_v: int,
                           epsilon: float = DEFAULT_EPSILON) -> VdeSchedule:
    """v_j(p) = -(j/(N_v-1)) (1/D(p) - eps) - eps for j = 0 .. N_v-1."""
    if N_v < 2:
        raise ValueError("N_v must be at least 2")
    if np.any(Dhat.value <= 0):
        raise ValueError("depth must be positive everywhere")
    graph = Dhat.graph
    H, W = Dhat.shape[:2]
    inv = dc.expand(1.0 / Dhat, (H, W, N_v))
    frac = graph.const(np.broadcast_to(np.arange(N_v) / (N_v - 1), (H, W, N_v)))
    v = -(frac * (inv - epsilon)) - epsilon
    return VdeSchedule(v, float(epsilon))


def _translation_only(graph: dc.Graph, t_c):
    R = graph.const(np.eye(3), np.float64)
    t = t_c if isinstance(t_c, Tensor) else graph.const(t_c, np.float64)
    return R, t


def vde_coords(sched: VdeSchedule, t_c, cam: Camera) -> Tensor:
    """g(p, 1/v_j(p), I|t_c, K): rotation is deliberately ignored."""
    graph = sched.v.graph
    R, t = _translation_only(graph, t_c)
    coords, _ = epipolar_coords(R, t, sched.depths, cam)
    return coords


def project_vde_logits(VL: Tensor, sched: VdeSchedule, t_c, cam: Camera,
                       coords: Tensor | None = None) -> ProjectedProbVolume:
    if coords is None:
        coords = vde_coords(sched, t_c, cam)
    sampled, valid = dc.bilinear_sample_channels(VL, coords, fill=OUT_OF_BOUNDS_LOGIT)
    return ProjectedProbVolume(dc.softmax_channels(sampled),
                               valid.max(axis=-1, keepdims=True))


def infuse_vde(I, VP: ProjectedProbVolume, sched: VdeSchedule, t_c, cam: Camera,
               coords: Tensor | None = None) -> Tensor:
    """I^v_c(p) = I_H(p) + sum_j VP_j(p) L(g(p, 1/v_j(p), I|t_c, K)).

    ``L = I - I_H`` is the box-filtered source; sampling it (rather than
    ``I``) keeps the structural detail single-counted, so a zero
    translation returns ``I`` exactly.
    """
    graph = VP.grid.graph
    I = dc._as_tensor(graph, I)
    if coords is None:
        coords = vde_coords(sched, t_c, cam)
    low = low_pass(I)
    high = I - low
    colors, _ = dc.bilinear_sample(low, coords)
    return high + dc.weighted_sum(VP.grid, colors)


def vde_activation(VL: Tensor, sched: VdeSchedule) -> Tensor:
    """V(p) = sum_j v_j(p) softmax(VL(p))_j, ``[H, W, 1]``."""
    probs = dc.softmax_channels(VL)
    return dc.sum_(probs * sched.v, axis=-1, keepdims=True)
