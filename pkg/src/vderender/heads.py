"""Per-pixel MLP heads: pose-aware recalibration of the logit volumes, the
positional encoding that feeds them, and the sampler for fine rendering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import Camera, PoseSE3, SampleSchedule, epipolar_coords, pose_tensors

GAMMA_INPUTS = 8          # (u, v) + axis-angle + translation
GAMMA_HIDDEN = 16
GAMMA_WIDTH = 16
RECAL_HIDDEN = 32
SAMPLER_HIDDEN = 64


@dataclass(frozen=True)
class PosEncodingConfig:
    mode: str = "learnable"      # or "periodic"
    frequencies: int = 4

    def __post_init__(self):
        if self.mode not in ("learnable", "periodic"):
            raise ValueError(f"unknown positional encoding mode {self.mode!r}")

    @property
    def width(self) -> int:
        if self.mode == "periodic":
            return GAMMA_INPUTS * 2 * self.frequencies
        return GAMMA_WIDTH


@dataclass(frozen=True)
class HeadDims:
    N: int = 32
    N_v: int = 32
    N_star: int = 16
    C_D: int = 32
    C_V: int = 32
    gamma: PosEncodingConfig = PosEncodingConfig()


def init_linear(rng: np.random.Generator, din: int, dout: int, zero: bool = False):
    if zero:
        return np.zeros((din, dout)), np.zeros(dout)
    bound = 1.0 / np.sqrt(din)
    return rng.uniform(-bound, bound, size=(din, dout)), np.zeros(dout)


def _add_mlp(params: dict, rng, name: str, widths: list[int], zero_last: bool = False):
    for k, (din, dout) in enumerate(zip(widths[:-1], widths[1:])):
        last = k == len(widths) - 2
        W, b = init_linear(rng, din, dout, zero=zero_last and last)
        params[f"{name}.{k}.W"] = W
        params[f"{name}.{k}.b"] = b


def init_head_params(dims: HeadDims, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Weights uniform in +-1/sqrt(fan_in), zero biases; the sampler's last
    layer starts at zero so fine sampling begins uniform."""
    params: dict[str, np.ndarray] = {}
    gw = dims.gamma.width
    if dims.gamma.mode == "learnable":
        _add_mlp(params, rng, "gamma", [GAMMA_INPUTS, GAMMA_HIDDEN, GAMMA_WIDTH])
    _add_mlp(params, rng, "F_D", [dims.C_D + gw, RECAL_HIDDEN, dims.N])
    _add_mlp(params, rng, "F_V", [dims.C_V + gw, RECAL_HIDDEN, dims.N_v])
    _add_mlp(params, rng, "F_S", [4 * dims.N, SAMPLER_HIDDEN, SAMPLER_HIDDEN,
                                  2 * dims.N_star], zero_last=True)
    return params


def mlp(x: Tensor, params: dict, name: str) -> Tensor:
    """Linear(-ELU-Linear)* using ``params[name.k.W/b]``."""
    k = 0
    while f"{name}.{k}.W" in params:
        if k > 0:
            x = dc.elu(x)
        x = dc.linear(x, params[f"{name}.{k}.W"], params[f"{name}.{k}.b"])
        k += 1
    if k == 0:
        raise KeyError(f"no parameters for head {name!r}")
    return x


def pose_vector(graph: dc.Graph, pose) -> Tensor:
    if isinstance(pose, Tensor):
        return pose
    if isinstance(pose, PoseSE3):
        return graph.const(pose.to_vector())
    return graph.const(np.asarray(pose, dtype=np.float64))


def gamma_inputs(graph: dc.Graph, pose, cam: Camera) -> Tensor:
    """[H, W, 8]: pixel coords normalized to [-1, 1], then the pose 6-vector."""
    H, W = cam.height, cam.width
    uv = cam.pixel_grid()
    norm = np.stack([2.0 * uv[..., 0] / max(W - 1, 1) - 1.0,
                     2.0 * uv[..., 1] / max(H - 1, 1) - 1.0], axis=-1)
    pv = dc.expand(pose_vector(graph, pose).reshape((1, 1, 6)), (H, W, 6))
    return dc.concat([graph.const(norm), pv], axis=-1)


def positional_encoding(graph: dc.Graph, pose, cam: Camera, cfg: PosEncodingConfig,
                        params: dict | None = None) -> Tensor:
    x = gamma_inputs(graph, pose, cam)
    if cfg.mode == "learnable":
        if params is None:
            raise ValueError("learnable encoding needs gamma parameters")
        return mlp(x, params, "gamma")
    parts = []
    for l in range(cfg.frequencies):
        arg = x * float(2.0 ** l * np.pi)
        parts += [dc.sin(arg), dc.cos(arg)]
    return dc.concat(parts, axis=-1)


def recalibrate(features: Tensor, gamma: Tensor, params: dict, head: str) -> Tensor:
    """Logits F(W(p), gamma(p, R_c, t_c)) for every pixel."""
    expected = params[f"{head}.0.W"].shape[0]
    width = features.shape[-1] + gamma.shape[-1]
    if width != expected:
        raise ValueError(f"{head}: input width {width} != {expected}")
    return mlp(dc.concat([features, gamma], axis=-1), params, head)


def sampler_head(DP: Tensor, colors: Tensor, params: dict, schedule: SampleSchedule,
                 n_star: int) -> tuple[Tensor, Tensor]:
    """Refined distances t* in [t_n, t_f] (log-spaced squash) and softmaxed
    weights w*, both ``[H, W, N*]``."""
    H, W, N = DP.shape
    if colors.shape[:3] != (H, W, N):
        raise ValueError(f"colors {colors.shape} do not match probabilities {DP.shape}")
    x = dc.concat([DP, colors.reshape((H, W, N * colors.shape[-1]))], axis=-1)
    if x.shape[-1] != params["F_S.0.W"].shape[0]:
        raise ValueError(f"sampler input width {x.shape[-1]} != {params['F_S.0.W'].shape[0]}")
    raw = mlp(x, params, "F_S")
    if raw.shape[-1] != 2 * n_star:
        raise ValueError(f"sampler output width {raw.shape[-1]} != {2 * n_star}")
    dist_raw, weight_raw = dc.split_last(raw, [n_star, n_star])
    log_ratio = float(np.log(schedule.t_f / schedule.t_n))
    tstar = dc.exp(dc.sigmoid(dist_raw) * log_ratio) * schedule.t_n
    wstar = dc.softmax_channels(weight_raw)
    return tstar, wstar


def fine_synthesize(Ivc, tstar, wstar, pose, cam: Camera) -> Tensor:
    """I'_c(p) = sum_k w*_k(p) Ivc(g(p, t*_k(p)))."""
    graph = dc._graph_of(Ivc, tstar, wstar)
    Ivc = dc._as_tensor(graph, Ivc)
    tstar, wstar = dc._as_tensor(graph, tstar), dc._as_tensor(graph, wstar)
    R, t = pose_tensors(graph, pose)
    coords, _ = epipolar_coords(R, t, tstar, cam)
    colors, _ = dc.bilinear_sample(Ivc, coords)
    return dc.weighted_sum(wstar, colors)
