"""Per-scene model: optimizable feature grids plus the shared heads."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import diffcore as dc
from .. import heads
from ..geometry import Camera, SampleSchedule, make_exponential_schedule
from ..pipeline import ViewOutputs, render_from_logits


@dataclass
class FitConfig:
    N: int = 32
    N_v: int = 32
    N_star: int = 16
    t_n: float = 1.0
    t_f: float = 16.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    iters: int = 2000
    lr_halving_points: list[float] = field(default_factory=lambda: [0.5, 0.75, 0.9])
    seed: int = 0
    gamma_mode: str = "learnable"
    gamma_frequencies: int = 4
    epsilon_vde: float = 1e-4
    alpha_sm: float = 0.05
    vde_enabled: bool = True
    C_D: int = 32
    C_V: int = 32
    feature_std: float = 0.1
    feature_lr_scale: float = 1.0    # step multiplier for the per-pixel grids
    train_frames: list[int] = field(default_factory=lambda: [1, 2])
    pose_source: str = "gt"          # or "posefit"
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("N", "N_v", "N_star", "iters", "C_D", "C_V"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "t_n", "epsilon_vde", "feature_lr_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.t_f <= self.t_n:
            raise ValueError("t_f must exceed t_n")
        if self.pose_source not in ("gt", "posefit"):
            raise ValueError(f"unknown pose source {self.pose_source!r}")
        heads.PosEncodingConfig(self.gamma_mode, self.gamma_frequencies)

    @property
    def schedule(self) -> SampleSchedule:
        return make_exponential_schedule(self.t_n, self.t_f, self.N)

    @property
    def dims(self) -> heads.HeadDims:
        return heads.HeadDims(self.N, self.N_v, self.N_star, self.C_D, self.C_V,
                              heads.PosEncodingConfig(self.gamma_mode, self.gamma_frequencies))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_params(cfg: FitConfig, cam: Camera) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    H, W = cam.height, cam.width
    params = {"W_D": rng.normal(0.0, cfg.feature_std, size=(H, W, cfg.C_D)),
              "W_V": rng.normal(0.0, cfg.feature_std, size=(H, W, cfg.C_V))}
    params.update(heads.init_head_params(cfg.dims, rng))
    return params


def render_view(graph: dc.Graph, params: dict, image, pose, cam: Camera,
                cfg: FitConfig, vde_enabled: bool | None = None) -> ViewOutputs:
    """Render the view at ``pose`` (renderer convention) from the source image.

    ``params`` maps names to Tensors or arrays; ``pose`` is a PoseSE3 or a
    differentiable 6-vector.
    """
    vde_on = cfg.vde_enabled if vde_enabled is None else vde_enabled
    P = {k: dc._as_tensor(graph, v) for k, v in params.items()}
    gamma = heads.positional_encoding(graph, pose, cam, cfg.dims.gamma, P)
    DL = heads.recalibrate(P["W_D"], gamma, P, "F_D")
    VL = heads.recalibrate(P["W_V"], gamma, P, "F_V") if vde_on else None
    sampler = {k: v for k, v in P.items() if k.startswith("F_S.")}
    return render_from_logits(image, DL, VL, pose, cam, cfg.schedule, cfg.epsilon_vde,
                              sampler=sampler, n_star=cfg.N_star)
