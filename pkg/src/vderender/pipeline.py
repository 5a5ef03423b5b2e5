"""One target view through the whole two-stage renderer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import heads, renderer, vde
from .diffcore import Tensor
from .geometry import Camera, SampleSchedule, pose_tensors


@dataclass
class ViewOutputs:
    DL: Tensor
    VL: Tensor | None
    Dhat: Tensor             # source depth [H,W,1]
    infused: Tensor          # I^v_c
    DP: renderer.ProjectedProbVolume
    coarse: Tensor           # I''_c
    colors: Tensor           # projected colors [H,W,N,3]
    occlusion: Tensor        # O_c [H,W,1]
    tstar: Tensor | None = None
    wstar: Tensor | None = None
    fine: Tensor | None = None
    vde_schedule: vde.VdeSchedule | None = None
    VP: renderer.ProjectedProbVolume | None = None

    @property
    def validity(self) -> np.ndarray:
        return self.DP.validity

    def novel_depth(self) -> Tensor:
        return renderer.novel_view_depth(self.tstar, self.wstar)

    def vde_activation(self) -> Tensor | None:
        if self.VL is None:
            return None
        return vde.vde_activation(self.VL, self.vde_schedule)


def translation_of(graph: dc.Graph, pose):
    _, t = pose_tensors(graph, pose)
    return t


def render_from_logits(image, DL: Tensor, VL: Tensor | None, pose, cam: Camera,
                       schedule: SampleSchedule, epsilon: float = vde.DEFAULT_EPSILON,
                       sampler: dict | None = None, n_star: int | None = None,
                       tstar=None, wstar=None) -> ViewOutputs:
    """Coarse and (optionally) fine synthesis from given logit volumes.

    The fine stage runs when ``sampler`` parameters are given (``t*``,
    ``w*`` predicted by the sampler head) or when ``tstar``/``wstar`` are
    passed directly. ``VL=None`` disables VDE infusion.
    """
    graph = DL.graph
    I = dc._as_tensor(graph, image)
    dl = renderer.LogitVolume(DL, schedule)
    Dhat = renderer.depth_from_logits(dl)
    vsched = VP = None
    if VL is not None:
        vsched = vde.vde_disparity_schedule(Dhat, VL.shape[-1], epsilon)
        t_c = translation_of(graph, pose)
        vcoords = vde.vde_coords(vsched, t_c, cam)
        VP = vde.project_vde_logits(VL, vsched, t_c, cam, coords=vcoords)
        infused = vde.infuse_vde(I, VP, vsched, t_c, cam, coords=vcoords)
    else:
        infused = I
    coords = renderer.sample_coords(graph, pose, cam, schedule.distances)
    DP = renderer.project_depth_logits(dl, pose, cam, coords=coords)
    coarse, colors = renderer.coarse_synthesize(infused, DP, pose, cam, schedule, coords=coords)
    occ = renderer.occlusion_mask(dl, pose, cam, coords=coords)
    out = ViewOutputs(DL, VL, Dhat, infused, DP, coarse, colors, occ,
                      vde_schedule=vsched, VP=VP)
    if sampler is not None:
        tstar, wstar = heads.sampler_head(DP.grid, colors, sampler, schedule,
                                          n_star or sampler["F_S.2.b"].shape[0] // 2)
    if tstar is not None and wstar is not None:
        out.tstar = dc._as_tensor(graph, tstar)
        out.wstar = dc._as_tensor(graph, wstar)
        out.fine = heads.fine_synthesize(infused, out.tstar, out.wstar, pose, cam)
    return out
