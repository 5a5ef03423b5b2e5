"""Image quality metrics. Inputs are [-0.5, 0.5] images; they are shifted to
[0, 1] before comparison."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
LF_KERNEL = 21
LF_SIGMA = 3.5


@dataclass
class MetricReport:
    mae: float
    rmse: float
    psnr: float
    psnr_lf: float
    ssim: float
    valid_fraction: float = 1.0


def _prep(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64) + 0.5
    b = np.asarray(b, dtype=np.float64) + 0.5
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _mask(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.ndim == len(shape) - 1:
        m = m[..., None]
    return np.broadcast_to(m, shape)


def _mean(x: np.ndarray, mask) -> float:
    if mask is None:
        return float(x.mean())
    if not mask.any():
        raise ValueError("empty mask")
    return float(x[mask].mean())


def mae(a, b, mask=None) -> float:
    a, b = _prep(a, b)
    return _mean(np.abs(a - b), _mask(mask, a.shape))


def rmse(a, b, mask=None) -> float:
    a, b = _prep(a, b)
    return float(np.sqrt(_mean((a - b) ** 2, _mask(mask, a.shape))))


def _psnr_from_mse(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def psnr(a, b, mask=None) -> float:
    a, b = _prep(a, b)
    return _psnr_from_mse(_mean((a - b) ** 2, _mask(mask, a.shape)))


def gaussian_filter(img: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Per-channel Gaussian of odd ``size`` with reflect padding (edge not
    repeated)."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] < size or img.shape[1] < size:
        raise ValueError(f"image {img.shape[:2]} smaller than kernel {size}")
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    out = ndimage.correlate1d(img, g, axis=0, mode="mirror")
    return ndimage.correlate1d(out, g, axis=1, mode="mirror")


def psnr_lf(a, b, mask=None, size: int = LF_KERNEL, sigma: float = LF_SIGMA) -> float:
    """PSNR of the two images after low-pass Gaussian filtering."""
    a, b = _prep(a, b)
    return psnr(gaussian_filter(a, size, sigma) - 0.5, gaussian_filter(b, size, sigma) - 0.5,
                mask)


def ssim(a, b, mask=None, size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM on channel-mean luminance."""
    a, b = _prep(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def blur(x):
        return gaussian_filter(x[..., None], size, sigma)[..., 0] if min(x.shape) >= size \
            else ndimage.gaussian_filter(x, sigma, mode="mirror")

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / \
        ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    m = None if mask is None else np.asarray(mask, dtype=bool).reshape(smap.shape)
    return _mean(smap, m)


def report(pred, gt, mask=None) -> MetricReport:
    frac = 1.0 if mask is None else float(np.mean(np.asarray(mask, dtype=bool)))
    gray_mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(
        np.asarray(pred).shape[:2])
    return MetricReport(mae(pred, gt, mask), rmse(pred, gt, mask), psnr(pred, gt, mask),
                        psnr_lf(pred, gt, mask), ssim(pred, gt, gray_mask), frac)


CSV_FIELDS = ["scene_id", "frame_id", "mae", "rmse", "psnr", "psnr_lf", "ssim"]


def write_csv(path, rows: list[tuple[str, str, MetricReport]]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for scene_id, frame_id, r in rows:
            d = asdict(r)
            w.writerow([scene_id, frame_id] + [repr(d[k]) for k in CSV_FIELDS[2:]])
