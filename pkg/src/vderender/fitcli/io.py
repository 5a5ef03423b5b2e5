"""On-disk formats: NVDE1 checkpoints, PNG/PFM images, scene and pose JSON.

NVDE1 layout (all integers little-endian)::

    b"NVDE1\\0"  u32 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64),
              u8 ndim, ndim x u32 dims, raw little-endian data }

The fit configuration travels as the first record: an empty f64 tensor
whose name is ``meta.config=`` followed by the canonical config JSON.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import Camera, PoseSE3
from ..synthoracle import FrameSet, SceneSpec

MAGIC = b"NVDE1\0"
VERSION = 1
CONFIG_PREFIX = "meta.config="
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.get("hash", "")


def _config_blob(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    records = [(CONFIG_PREFIX + _config_blob(ckpt.config), np.zeros(0))]
    records += sorted(ckpt.tensors.items())
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"{name}: name or rank too large")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:6] != MAGIC:
        raise ValueError("not an NVDE1 checkpoint")
    version, count = struct.unpack_from("<II", data, 6)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 14
    tensors: dict[str, np.ndarray] = {}
    config: dict = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        tag, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        if tag not in _DTYPES:
            raise ValueError(f"{name}: unknown dtype tag {tag}")
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + size > len(data):
            raise ValueError(f"{name}: truncated data")
        arr = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=pos)
        pos += size
        if name.startswith(CONFIG_PREFIX):
            config = json.loads(name[len(CONFIG_PREFIX):])
        else:
            tensors[name] = arr.reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(data):
        raise ValueError("trailing bytes after last tensor")
    return Checkpoint(tensors, config)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# images


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-0.5, 0.5] -> [0, 255], rounded and clipped."""
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 0.5) * 255.0), 0, 255
                   ).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0 - 0.5


def save_png(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def save_pfm(path, img: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored bottom to top."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[-1] != 1:
            raise ValueError("PFM output is single-channel")
        a = a[..., 0]
    H, W = a.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(a).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines, pos = [], 0
    while len(lines) < 3:
        end = data.index(b"\n", pos)
        lines.append(data[pos:end].decode("ascii").strip())
        pos = end + 1
    if lines[0] != "Pf":
        raise ValueError("only single-channel PFM is supported")
    W, H = (int(x) for x in lines[1].split())
    scale = float(lines[2])
    dt = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(data, dtype=dt, count=W * H, offset=pos).reshape(H, W)
    return np.flipud(a).astype(np.float32)


# --------------------------------------------------------------------------
# scenes and frames


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def pose_to_json(pose: PoseSE3) -> list[float]:
    return pose.to_list()


def pose_from_json(vals) -> PoseSE3:
    if len(vals) != 12:
        raise ValueError(f"pose needs 12 values, got {len(vals)}")
    return PoseSE3.from_list(vals)


def load_scene_file(path) -> tuple[SceneSpec, list[PoseSE3] | None]:
    d = load_json(path)
    poses = d.get("poses")
    return SceneSpec.from_dict(d), None if poses is None else [pose_from_json(p) for p in poses]


def save_frames(out_dir, spec: SceneSpec, frames: FrameSet) -> None:
    """Frames as PNG, depth/highlight/visibility as PFM, plus scene.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = spec.to_dict()
    meta["poses"] = [pose_to_json(p) for p in frames.poses]
    save_json(out / "scene.json", meta)
    for k, img in enumerate(frames.images):
        save_png(out / f"frame_{k:03d}.png", img)
        save_pfm(out / f"depth_{k:03d}.pfm", frames.gt_depth[k])
        save_pfm(out / f"highlight_{k:03d}.pfm", frames.gt_highlight_mask[k].astype(np.float32))
        if k < len(frames.visible):
            save_pfm(out / f"visible_{k:03d}.pfm", frames.visible[k].astype(np.float32))


def load_frames(frames_dir) -> tuple[SceneSpec, FrameSet]:
    d = Path(frames_dir)
    spec, poses = load_scene_file(d / "scene.json")
    if not poses:
        raise ValueError("scene.json lists no poses")
    images = [load_png(d / f"frame_{k:03d}.png") for k in range(len(poses))]
    depth = [load_pfm(d / f"depth_{k:03d}.pfm") for k in range(len(poses))]
    hl = [load_pfm(d / f"highlight_{k:03d}.pfm") > 0.5 for k in range(len(poses))]
    vis = [load_pfm(p) > 0.5 for p in (d / f"visible_{k:03d}.pfm" for k in range(len(poses)))
           if p.exists()]
    return spec, FrameSet(images, poses, depth, hl, vis, spec.cam)


def camera_from_tensor(vec: np.ndarray) -> Camera:
    fx, fy, cx, cy, w, h = (float(x) for x in vec)
    return Camera(fx, fy, cx, cy, int(w), int(h))


def camera_to_tensor(cam: Camera) -> np.ndarray:
    return np.array([cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height], dtype=np.float64)
