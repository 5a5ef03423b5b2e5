"""Synthetic ground truth and a scalar reference renderer.

Scenes are stacks of fronto-parallel textured planes seen by a pinhole
camera. An optional glossy highlight obeys the negative-disparity model:
relative to its surface it moves against the rigid flow, by a fraction
``gain`` of it (gain 1 means the highlight sticks to the image, gain 0 means
it is painted on the surface). Pure rotations do not move it relative to
the surface.

:func:`reference_render` re-implements the rendering equations with plain
per-pixel python loops. It shares nothing with the vectorized pipeline and
is the equivalence oracle for it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Camera, PoseSE3, pose_inverse


@dataclass
class Plane:
    depth: float
    # world-space rectangle (x0, x1, y0, y1) on the plane; None = unbounded
    extent: tuple[float, float, float, float] | None = None
    texture_seed: int = 0
    texture_px: float = 6.0      # noise cell size, in source-view pixels
    contrast: float = 0.3


@dataclass
class Highlight:
    surface: int
    center: tuple[float, float]  # source-view pixel
    radius: float = 5.0          # Gaussian sigma, pixels
    intensity: float = 0.2
    gain: float = 0.5


@dataclass
class SceneSpec:
    planes: list[Plane]
    cam: Camera
    highlight: Highlight | None = None
    seed: int = 0
    t_n: float = 1.0
    t_f: float = 16.0

    def __post_init__(self):
        if not self.planes:
            raise ValueError("scene needs at least one plane")
        for p in self.planes:
            if not self.t_n < p.depth < self.t_f:
                raise ValueError(f"plane depth {p.depth} outside ({self.t_n}, {self.t_f})")
        depths = [p.depth for p in self.planes]
        if depths != sorted(depths, reverse=True):
            raise ValueError("planes must be ordered far to near")

    def to_dict(self) -> dict:
        return {"intrinsics": self.cam.to_dict(),
                "planes": [asdict(p) for p in self.planes],
                "highlight": None if self.highlight is None else asdict(self.highlight),
                "seed": self.seed, "t_n": self.t_n, "t_f": self.t_f}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        planes = [Plane(float(p["depth"]),
                        None if p.get("extent") is None else tuple(p["extent"]),
                        int(p.get("texture_seed", 0)), float(p.get("texture_px", 6.0)),
                        float(p.get("contrast", 0.3))) for p in d["planes"]]
        hl = d.get("highlight")
        if hl is not None:
            hl = Highlight(int(hl["surface"]), tuple(hl["center"]), float(hl.get("radius", 5.0)),
                           float(hl.get("intensity", 0.2)), float(hl.get("gain", 0.5)))
        return cls(planes, Camera.from_dict(d["intrinsics"]), hl, int(d.get("seed", 0)),
                   float(d.get("t_n", 1.0)), float(d.get("t_f", 16.0)))


@dataclass
class FrameSet:
    images: list[np.ndarray]
    poses: list[PoseSE3]              # camera-to-world, world = frame 0
    gt_depth: list[np.ndarray]        # [H, W] z-depth per frame
    gt_highlight_mask: list[np.ndarray]
    visible: list[np.ndarray] = field(default_factory=list)  # covisible with frame 0
    cam: Camera | None = None

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.poses) == len(self.gt_depth) == len(self.gt_highlight_mask) == n):
            raise ValueError("inconsistent frame counts")
        if n and not np.allclose(self.poses[0].matrix(), np.eye(4)):
            raise ValueError("frame 0 must have the identity pose")

    def render_pose(self, k: int) -> PoseSE3:
        """Pose handed to the renderer to synthesize frame ``k`` from frame 0."""
        return pose_inverse(self.poses[k])


# --------------------------------------------------------------------------
# textures


class _ValueNoise:
    """Smooth 3-channel value noise on a periodic lattice."""

    SIZE = 64

    def __init__(self, seed: int, octaves: int = 2):
        rng = np.random.default_rng(seed)
        self.lattices = [rng.uniform(-1.0, 1.0, size=(self.SIZE, self.SIZE, 3))
                         for _ in range(octaves)]
        self.base = rng.uniform(-0.5, 0.5, size=3)

    def __call__(self, s: np.ndarray, r: np.ndarray) -> np.ndarray:
        out = np.zeros(s.shape + (3,))
        amp, freq, norm = 1.0, 1.0, 0.0
        for lat in self.lattices:
            out += amp * self._sample(lat, s * freq, r * freq)
            norm += amp
            amp *= 0.5
            freq *= 2.0
        return 0.6 * out / norm + 0.4 * self.base

    def _sample(self, lat, s, r):
        n = self.SIZE
        s0, r0 = np.floor(s), np.floor(r)
        fs, fr = s - s0, r - r0
        # quintic fade: C2-continuous interpolation
        fs = fs * fs * fs * (fs * (fs * 6 - 15) + 10)
        fr = fr * fr * fr * (fr * (fr * 6 - 15) + 10)
        i0, j0 = s0.astype(np.int64) % n, r0.astype(np.int64) % n
        i1, j1 = (i0 + 1) % n, (j0 + 1) % n
        a = lat[j0, i0] * (1 - fs)[..., None] + lat[j0, i1] * fs[..., None]
        b = lat[j1, i0] * (1 - fs)[..., None] + lat[j1, i1] * fs[..., None]
        return a * (1 - fr)[..., None] + b * fr[..., None]


def _plane_hits(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest plane hit per ray: (index, lambda, world xyz); index -1 = miss."""
    shape = dirs.shape[:-1]
    best = np.full(shape, np.inf)
    idx = np.full(shape, -1, dtype=np.int64)
    X = np.zeros(shape + (3,))
    for k, pl in enumerate(spec.planes):
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (pl.depth - origin[2]) / dz
        pts = origin + lam[..., None] * dirs
        ok = np.isfinite(lam) & (lam > 0)
        if pl.extent is not None:
            x0, x1, y0, y1 = pl.extent
            ok &= (pts[..., 0] >= x0) & (pts[..., 0] <= x1) & \
                (pts[..., 1] >= y0) & (pts[..., 1] <= y1)
        take = ok & (lam < best)
        best = np.where(take, lam, best)
        idx = np.where(take, k, idx)
        X = np.where(take[..., None], pts, X)
    return idx, best, X


def _shade(spec: SceneSpec, idx: np.ndarray, X: np.ndarray) -> np.ndarray:
    cam = spec.cam
    img = np.zeros(idx.shape + (3,))
    for k, pl in enumerate(spec.planes):
        sel = idx == k
        if not sel.any():
            continue
        cell = pl.depth * pl.texture_px / cam.fx
        noise = _ValueNoise(spec.seed * 1000 + pl.texture_seed)
        img[sel] = pl.contrast * noise(X[sel][:, 0] / cell + 17.0, X[sel][:, 1] / cell + 29.0)
    return img


def _project(cam: Camera, x: np.ndarray) -> np.ndarray:
    return np.array([cam.fx * x[0] / x[2] + cam.cx, cam.fy * x[1] / x[2] + cam.cy])


def highlight_center(spec: SceneSpec, pose: PoseSE3) -> np.ndarray:
    """Where the highlight sits in the view with camera-to-world ``pose``.

    The source center is first displaced along the negative-depth half of
    its epipolar line under the view translation (disparity ``-gain / D``),
    then carried by the rigid motion of its surface.
    """
    hl = spec.highlight
    cam = spec.cam
    R, t = pose_inverse(pose).R, pose_inverse(pose).t     # render pose
    D0 = spec.planes[hl.surface].depth
    c0 = np.array([hl.center[0], hl.center[1], 1.0])
    ray0 = cam.K_inv @ c0
    if hl.gain > 0:
        d = -D0 / hl.gain
        q = _project(cam, (d - t[2]) * ray0 + t)
    else:
        q = c0[:2]
    Xs = D0 * (cam.K_inv @ np.array([q[0], q[1], 1.0]))
    return _project(cam, R @ Xs + t)


def generate_scene(spec: SceneSpec, poses: list[PoseSE3]) -> FrameSet:
    """Render every pose (camera-to-world, world = frame 0) with z-buffering."""
    cam = spec.cam
    if not poses:
        raise ValueError("need at least one pose")
    rays = cam.rays()
    src_idx, src_lam, _ = _plane_hits(spec, np.zeros(3), rays)
    images, depths, masks, visible = [], [], [], []
    uv = cam.pixel_grid()
    for pose in poses:
        dirs = rays @ pose.R.T
        idx, lam, X = _plane_hits(spec, pose.t, dirs)
        if np.any(idx < 0):
            raise ValueError("some rays miss every plane; add an unbounded background")
        img = _shade(spec, idx, X)
        mask = np.zeros(idx.shape, dtype=bool)
        if spec.highlight is not None:
            hl = spec.highlight
            c = highlight_center(spec, pose)
            r2 = ((uv - c) ** 2).sum(-1)
            on = idx == hl.surface
            blob = hl.intensity * np.exp(-r2 / (2.0 * hl.radius ** 2)) * on
            img = img + blob[..., None]
            mask = on & (r2 <= (2.0 * hl.radius) ** 2)
        images.append(img)
        depths.append(lam)
        masks.append(mask)
        visible.append(_covisible(spec, X, idx, src_idx, src_lam))
    return FrameSet(images, list(poses), depths, masks, visible, cam)


def _covisible(spec: SceneSpec, X: np.ndarray, idx: np.ndarray,
               src_idx: np.ndarray, src_lam: np.ndarray) -> np.ndarray:
    """Pixels whose surface point is also seen (unoccluded, inside) by frame 0."""
    cam = spec.cam
    z = X[..., 2]
    u = cam.fx * X[..., 0] / z + cam.cx
    v = cam.fy * X[..., 1] / z + cam.cy
    inside = (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    rays = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], -1)
    hit_idx, hit_lam, _ = _plane_hits(spec, np.zeros(3), rays)
    return inside & (hit_idx == idx) & (np.abs(hit_lam - z) <= 1e-6 * np.abs(z))


# --------------------------------------------------------------------------
# stock scenes


def two_plane_scene(size: int = 64, focal: float | None = None, seed: int = 0,
                    far: float = 8.0, near: float = 3.0, highlight: bool = False,
                    gain: float = 0.5) -> SceneSpec:
    """Unbounded background plus a near rectangle covering the image center."""
    focal = focal or float(size)
    cam = Camera.centered(size, size, focal)
    half = 0.22 * near * size / focal
    planes = [Plane(far, None, texture_seed=1, texture_px=size / 10.0),
              Plane(near, (-half, half, -half, half), texture_seed=2,
                    texture_px=size / 10.0)]
    hl = None
    if highlight:
        hl = Highlight(0, (0.22 * size, 0.25 * size), radius=size / 12.0,
                       intensity=0.2, gain=gain)
    return SceneSpec(planes, cam, hl, seed=seed)


def specular_scene(size: int = 48, seed: int = 0, gain: float = 0.5) -> SceneSpec:
    """Single textured wall carrying one broad highlight."""
    cam = Camera.centered(size, size, float(size))
    planes = [Plane(4.0, None, texture_seed=3, texture_px=size / 8.0, contrast=0.2)]
    hl = Highlight(0, ((size - 1) / 2.0, (size - 1) / 2.0), radius=size / 10.0,
                   intensity=0.25, gain=gain)
    return SceneSpec(planes, cam, hl, seed=seed)


def lateral_poses(baseline: float, count: int = 3) -> list[PoseSE3]:
    """Frame 0 at the origin, then +-baseline along x (and more if count > 3)."""
    out = [PoseSE3.identity()]
    for k in range(1, count):
        sign = -1.0 if k % 2 else 1.0
        out.append(PoseSE3(np.eye(3), np.array([sign * baseline * ((k + 1) // 2), 0.0, 0.0])))
    return out


# --------------------------------------------------------------------------
# scalar reference renderer


def _softmax(xs: list[float]) -> list[float]:
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    s = sum(es)
    return [e / s for e in es]


def _project_scalar(u, v, depth, R, t, cam: Camera):
    """g(p, depth, R|t, K) one point at a time; None if degenerate."""
    x = depth * (u - cam.cx) / cam.fx
    y = depth * (v - cam.cy) / cam.fy
    z = depth
    # p_c = R^T p_w - R^T t
    dx, dy, dz = x - t[0], y - t[1], z - t[2]
    xc = R[0][0] * dx + R[1][0] * dy + R[2][0] * dz
    yc = R[0][1] * dx + R[1][1] * dy + R[2][1] * dz
    zc = R[0][2] * dx + R[1][2] * dy + R[2][2] * dz
    if abs(zc) < 1e-9:
        return None
    return cam.fx * xc / zc + cam.cx, cam.fy * yc / zc + cam.cy


def _bilinear_scalar(img, H, W, u, v, c, fill):
    x0, y0 = math.floor(u), math.floor(v)
    fx, fy = u - x0, v - y0
    acc = 0.0
    for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            val = img[yy][xx][c] if 0 <= xx < W and 0 <= yy < H else fill
            acc += wx * wy * val
    return acc


def _box5_scalar(img, H, W, C):
    def refl(i, n):
        i = -i if i < 0 else i
        return 2 * (n - 1) - i if i >= n else i
    out = [[[0.0] * C for _ in range(W)] for _ in range(H)]
    for y in range(H):
        for x in range(W):
            for c in range(C):
                s = 0.0
                for a in range(-2, 3):
                    for b in range(-2, 3):
                        s += img[refl(y + a, H)][refl(x + b, W)][c]
                out[y][x][c] = s / 25.0
    return out


def reference_render(image, DL, pose: PoseSE3, cam: Camera, distances, VL=None,
                     epsilon: float = 1e-4, tstar=None, wstar=None) -> dict:
    """Literal per-pixel evaluation of the rendering equations.

    Returns a dict with ``infused`` (or the image itself when ``VL`` is
    None), ``coarse``, ``DP``, ``occlusion`` and, given ``tstar``/``wstar``,
    ``fine``. All outputs are float64 arrays.
    """
    I = np.asarray(image, dtype=np.float64).tolist()
    DLl = np.asarray(DL, dtype=np.float64).tolist()
    H, W, C = len(I), len(I[0]), len(I[0][0])
    N = len(DLl[0][0])
    ts = [float(x) for x in distances]
    R = np.asarray(pose.R, dtype=np.float64).tolist()
    t = [float(x) for x in pose.t]
    Rid = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    FILL = -30.0

    if VL is None:
        Ivc = I
    else:
        VLl = np.asarray(VL, dtype=np.float64).tolist()
        Nv = len(VLl[0][0])
        low = _box5_scalar(I, H, W, C)
        Ivc = [[[0.0] * C for _ in range(W)] for _ in range(H)]
        for y in range(H):
            for x in range(W):
                sm = _softmax(DLl[y][x])
                dhat = sum(ti * pi for ti, pi in zip(ts, sm))
                samples, logits = [], []
                for j in range(Nv):
                    v_j = -(j / (Nv - 1)) * (1.0 / dhat - epsilon) - epsilon
                    pp = _project_scalar(x, y, 1.0 / v_j, Rid, t, cam)
                    samples.append(pp)
                    logits.append(FILL if pp is None else
                                  _bilinear_scalar(VLl, H, W, pp[0], pp[1], j, FILL))
                vp = _softmax(logits)
                for c in range(C):
                    acc = I[y][x][c] - low[y][x][c]
                    for j in range(Nv):
                        if samples[j] is not None:
                            acc += vp[j] * _bilinear_scalar(low, H, W, samples[j][0],
                                                            samples[j][1], c, 0.0)
                    Ivc[y][x][c] = acc

    coarse = np.zeros((H, W, C))
    DP = np.zeros((H, W, N))
    occ = np.zeros((H, W, 1))
    src_soft = [[_softmax(DLl[y][x]) for x in range(W)] for y in range(H)]
    for y in range(H):
        for x in range(W):
            pts = [_project_scalar(x, y, ti, R, t, cam) for ti in ts]
            logits = [FILL if pp is None else
                      _bilinear_scalar(DLl, H, W, pp[0], pp[1], i, FILL)
                      for i, pp in enumerate(pts)]
            dp = _softmax(logits)
            DP[y, x] = dp
            o = 0.0
            for i, pp in enumerate(pts):
                if pp is not None:
                    o += _bilinear_scalar(src_soft, H, W, pp[0], pp[1], i, 0.0)
            occ[y, x, 0] = min(1.0, max(0.0, o))
            for c in range(C):
                acc = 0.0
                for i, pp in enumerate(pts):
                    if pp is not None:
                        acc += dp[i] * _bilinear_scalar(Ivc, H, W, pp[0], pp[1], c, 0.0)
                coarse[y, x, c] = acc
    out = {"infused": np.asarray(Ivc, dtype=np.float64), "coarse": coarse, "DP": DP,
           "occlusion": occ}

    if tstar is not None and wstar is not None:
        ts_ = np.asarray(tstar, dtype=np.float64).tolist()
        ws_ = np.asarray(wstar, dtype=np.float64).tolist()
        fine = np.zeros((H, W, C))
        for y in range(H):
            for x in range(W):
                for c in range(C):
                    acc = 0.0
                    for tk, wk in zip(ts_[y][x], ws_[y][x]):
                        pp = _project_scalar(x, y, tk, R, t, cam)
                        if pp is not None:
                            acc += wk * _bilinear_scalar(Ivc, H, W, pp[0], pp[1], c, 0.0)
                    fine[y, x, c] = acc
        out["fine"] = fine
    return out
