"""Pinhole cameras, rigid poses, epipolar projection and sample schedules.

Conventions used throughout the package:

* pixel coordinates ``(u, v)``: u to the right, v down, the center of the
  top-left pixel is ``(0, 0)``;
* a :class:`PoseSE3` ``(R, t)`` handed to :func:`epipolar_project` maps a
  point ``x`` expressed in the target camera frame into the reference
  (source) frame as ``R^T x - R^T t``. In other words ``(R, t)`` is the
  camera-to-world transform of the reference camera, with the target
  camera as world.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

DEGENERATE_Z = 1e-9
# coordinate assigned to degenerate projections: far outside any raster
INVALID_COORD = -1.0e6


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def centered(cls, width: int, height: int, focal: float) -> "Camera":
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def pixel_grid(self) -> np.ndarray:
        """[H, W, 2] array of (u, v) pixel-center coordinates."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)

    def rays(self) -> np.ndarray:
        """[H, W, 3] back-projected rays K^-1 (u, v, 1)."""
        uv = self.pixel_grid()
        return np.stack([(uv[..., 0] - self.cx) / self.fx,
                         (uv[..., 1] - self.cy) / self.fy,
                         np.ones(uv.shape[:2])], axis=-1)

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resized by ``factor`` (pixel-center convention)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        sx, sy = w / self.width, h / self.height
        return Camera(self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5,
                      (self.cy + 0.5) * sy - 0.5, w, h)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.width, "h": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["w"]), int(d["h"]))


@dataclass(frozen=True, eq=False)
class PoseSE3:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or \
                abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_vector(cls, vec) -> "PoseSE3":
        """From (rx, ry, rz, tx, ty, tz): axis-angle then translation."""
        vec = np.asarray(vec, dtype=np.float64)
        return cls(so3_exp(vec[:3]), vec[3:6])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([so3_log(self.R), self.t])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def to_list(self) -> list[float]:
        """12 row-major reals of [R|t]."""
        return self.matrix()[:3].reshape(-1).tolist()

    @classmethod
    def from_list(cls, vals) -> "PoseSE3":
        M = np.asarray(vals, dtype=np.float64).reshape(3, 4)
        return cls(M[:, :3], M[:, 3])

    def inverse(self) -> "PoseSE3":
        return pose_inverse(self)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return pose_compose(self, other)


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    Kx = skew(w)
    if th < 1e-8:
        R = np.eye(3) + Kx + 0.5 * Kx @ Kx
    else:
        R = np.eye(3) + np.sin(th) / th * Kx + (1.0 - np.cos(th)) / th ** 2 * Kx @ Kx
    return nearest_rotation(R)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(c)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if th < 1e-8:
        return 0.5 * vee
    if np.pi - th < 1e-6:
        # axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[k] / np.sqrt(B[k, k])
        return th * axis / np.linalg.norm(axis)
    return th / (2.0 * np.sin(th)) * vee


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def pose_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return PoseSE3(nearest_rotation(a.R @ b.R), a.R @ b.t + a.t)


def pose_inverse(a: PoseSE3) -> PoseSE3:
    Rt = a.R.T
    return PoseSE3(Rt, -Rt @ a.t)


def rotation_angle(R) -> float:
    """Rotation magnitude in radians."""
    return float(np.linalg.norm(so3_log(R)))


def direction_error_deg(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# --------------------------------------------------------------------------
# sample schedule


@dataclass(frozen=True, eq=False)
class SampleSchedule:
    t_n: float
    t_f: float
    N: int
    distances: np.ndarray

    @property
    def ratio(self) -> float:
        return self.t_f / self.t_n


def make_exponential_schedule(t_n: float, t_f: float, N: int) -> SampleSchedule:
    """t_i = t_n (t_f/t_n)^(1 - i/(N-1)); index 0 is the far bound."""
    if not t_n > 0:
        raise ValueError("t_n must be positive")
    if not t_f > t_n:
        raise ValueError("t_f must exceed t_n")
    if N < 2:
        raise ValueError("need at least two samples")
    i = np.arange(N, dtype=np.float64)
    d = t_n * (t_f / t_n) ** (1.0 - i / (N - 1))
    d[0], d[-1] = t_f, t_n
    return SampleSchedule(float(t_n), float(t_f), int(N), d)


# --------------------------------------------------------------------------
# epipolar projection


def epipolar_project(p, depth, pose: PoseSE3, cam: Camera):
    """Scalar/array form of g(p, depth, R|t, K).

    ``p`` is ``[..., 2]``, ``depth`` broadcasts against ``p[..., 0]``.
    Returns ``(p_prime, z_c, ok)``; ``ok`` is False where |z_c| < 1e-9.
    """
    p = np.asarray(p, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    hom = np.stack([p[..., 0], p[..., 1], np.ones(p.shape[:-1])], axis=-1)
    pw = depth[..., None] * (hom @ cam.K_inv.T)
    pc = pw @ pose.R - pose.R.T @ pose.t          # R^T p_w - R^T t
    z = pc[..., 2]
    ok = np.abs(z) >= DEGENERATE_Z
    zs = np.where(ok, z, 1.0)
    proj = pc @ cam.K.T
    pp = np.stack([proj[..., 0] / zs, proj[..., 1] / zs], axis=-1)
    pp = np.where(ok[..., None], pp, INVALID_COORD)
    return pp, z, ok


def so3_exp_t(w: Tensor) -> Tensor:
    """Differentiable Rodrigues map, 3-vector tensor -> 3x3 rotation tensor."""
    wv = np.asarray(w.value, dtype=np.float64)
    th = np.linalg.norm(wv)
    Kx = skew(wv)
    if th < 1e-8:
        R = np.eye(3) + Kx + 0.5 * Kx @ Kx
    else:
        R = np.eye(3) + np.sin(th) / th * Kx + (1.0 - np.cos(th)) / th ** 2 * Kx @ Kx

    def bw(g):
        gw = np.empty(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            if th < 1e-8:
                dR = skew(e) + 0.5 * (skew(e) @ Kx + Kx @ skew(e))
            else:
                # Gallego & Yezzi closed form
                v = np.cross(wv, (np.eye(3) - R) @ e)
                dR = (wv[k] * Kx + skew(v)) / th ** 2 @ R
            gw[k] = np.sum(g * dR)
        return (gw,)

    return w.graph.record(R, (w,), bw)


def epipolar_coords(R, t, depth, cam: Camera) -> tuple[Tensor, np.ndarray]:
    """Differentiable g(p, depth, R|t, K) over the full target pixel grid.

    ``depth`` is ``[H, W, M]`` (per-pixel samples) or ``[M]`` (shared
    schedule). ``R``, ``t`` and ``depth`` may each be a Tensor or a plain
    array. Returns coords ``[H, W, M, 2]`` and the target-frame z (no
    gradient). Degenerate samples get coordinate ``INVALID_COORD`` and zero
    gradient.
    """
    graph = dc._graph_of(R, t, depth)
    R = dc._as_tensor(graph, R)
    t = dc._as_tensor(graph, t)
    depth = dc._as_tensor(graph, depth)
    H, W = cam.height, cam.width
    Rv, tv = R.value, t.value
    dv = depth.value
    shared = dv.ndim == 1
    d = np.broadcast_to(dv, (H, W, dv.shape[-1])) if shared else dv
    if d.shape[:2] != (H, W):
        raise ValueError(f"depth shape {dv.shape} does not match camera {(H, W)}")
    r = cam.rays()                                  # [H,W,3]
    Rv, tv = Rv.astype(np.float64), tv.astype(np.float64)
    d = d.astype(np.float64)
    a = r @ Rv                                      # R^T r
    b = Rv.T @ tv                                   # R^T t
    x = d[..., None] * a[:, :, None, :] - b         # [H,W,M,3]
    z = x[..., 2]
    ok = np.abs(z) >= DEGENERATE_Z
    zs = np.where(ok, z, 1.0)
    u = cam.fx * x[..., 0] / zs + cam.cx
    v = cam.fy * x[..., 1] / zs + cam.cy
    coords = np.stack([np.where(ok, u, INVALID_COORD),
                       np.where(ok, v, INVALID_COORD)], axis=-1)
    fx, fy = cam.fx, cam.fy

    def bw(g):
        gu = np.where(ok, g[..., 0], 0.0)
        gv = np.where(ok, g[..., 1], 0.0)
        gx = gu * fx / zs
        gy = gv * fy / zs
        gz = -(gu * fx * x[..., 0] + gv * fy * x[..., 1]) / zs ** 2
        G = np.stack([gx, gy, gz], axis=-1)         # dL/dx
        gR = gt = gd = None
        if depth.requires_grad:
            gd = np.einsum("hwmk,hwk->hwm", G, a)
            if shared:
                gd = gd.sum(axis=(0, 1))
        if R.requires_grad or t.requires_grad:
            ga = np.einsum("hwmk,hwm->hwk", G, d)    # dL/da
            gb = -G.sum(axis=(0, 1, 2))              # dL/db
            if R.requires_grad:
                # a = R^T r  ->  dL/dR_jk = sum r_j ga_k ; b = R^T t likewise
                gR = np.einsum("hwj,hwk->jk", r, ga) + np.outer(tv, gb)
            if t.requires_grad:
                gt = Rv @ gb
        return gR, gt, gd

    out = graph.record(coords, (R, t, depth), bw, dtype=np.float64)
    return out, z


def pose_tensors(graph: dc.Graph, pose) -> tuple:
    """Pose as (R, t) for :func:`epipolar_coords`.

    ``pose`` is a :class:`PoseSE3`, a constant 6-vector (axis-angle,
    translation), or a 6-vector Tensor that stays differentiable.
    """
    if isinstance(pose, Tensor):
        return so3_exp_t(pose[0:3]), pose[3:6]
    if not isinstance(pose, PoseSE3):
        pose = PoseSE3.from_vector(np.asarray(pose, dtype=np.float64))
    return graph.const(pose.R, np.float64), graph.const(pose.t, np.float64)


# --------------------------------------------------------------------------
# rotation alignment


def rotation_homography(R, cam: Camera) -> np.ndarray:
    return cam.K @ np.asarray(R) @ cam.K_inv


def rotation_align_warp(img: np.ndarray, R, cam: Camera) -> np.ndarray:
    """Resample ``img[H,W,C]`` at K R K^-1 p (zero outside the raster)."""
    Hm = rotation_homography(R, cam)
    uv = cam.pixel_grid()
    hom = np.concatenate([uv, np.ones(uv.shape[:2] + (1,))], axis=-1) @ Hm.T
    z = hom[..., 2:3]
    ok = np.abs(z) >= DEGENERATE_Z
    coords = np.where(ok, hom[..., :2] / np.where(ok, z, 1.0), INVALID_COORD)
    g = dc.Graph(check_finite=False)
    out, _ = dc.bilinear_sample(g.const(img), g.const(coords))
    return out.value
