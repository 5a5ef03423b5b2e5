"""Self-supervised photometric objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha_p: float = 0.01     # kept for config fidelity; no perceptual term here
    alpha_sm: float = 0.05
    lambda_ssim: float = 0.0  # optional structural surrogate

    def __post_init__(self):
        if min(self.alpha_p, self.alpha_sm, self.lambda_ssim) < 0:
            raise ValueError("loss weights must be nonnegative")


def occlusion_blend(pred, gt, Oc) -> Tensor:
    """(1 - O) * gt + O * pred. Low O marks content unseen from the source."""
    graph = dc._graph_of(pred, gt, Oc)
    pred, gt, Oc = (dc._as_tensor(graph, x) for x in (pred, gt, Oc))
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    O = dc.expand(Oc, pred.shape) if Oc.shape != pred.shape else Oc
    return gt + O * (pred - gt)


def _pixel_weights(validity, shape) -> np.ndarray:
    w = np.asarray(validity, dtype=np.float64)
    if w.ndim == 2:
        w = w[..., None]
    return np.broadcast_to(w, shape[:2] + (1,))


def synthesis_loss(Ioc, gt, validity, weights: LossWeights = LossWeights()) -> Tensor:
    """Validity-weighted mean L1, plus lambda_ssim * (1 - SSIM)/2 if enabled."""
    graph = dc._graph_of(Ioc, gt)
    Ioc, gt = dc._as_tensor(graph, Ioc), dc._as_tensor(graph, gt)
    if Ioc.shape != gt.shape:
        raise ValueError(f"shape mismatch {Ioc.shape} vs {gt.shape}")
    w = _pixel_weights(validity, Ioc.shape)
    total = float(w.sum())
    if total <= 0:
        raise ValueError("no valid pixels")
    C = Ioc.shape[-1]
    wc = graph.const(np.broadcast_to(w, Ioc.shape) / (total * C))
    loss = dc.sum_(dc.abs_(Ioc - gt) * wc)
    if weights.lambda_ssim > 0:
        loss = loss + weights.lambda_ssim * 0.5 * (1.0 - ssim_t(Ioc, gt))
    return loss


def ssim_t(a: Tensor, b: Tensor, size: int = 11, sigma: float = 1.5) -> Tensor:
    """Differentiable mean SSIM on channel-mean luminance (images in [-0.5, 0.5])."""
    k = dc.gaussian_kernel(size, sigma)
    la = dc.mean(a + 0.5, axis=-1, keepdims=True)
    lb = dc.mean(b + 0.5, axis=-1, keepdims=True)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = dc.conv2d_fixed(la, k), dc.conv2d_fixed(lb, k)
    saa = dc.conv2d_fixed(la * la, k) - mu_a * mu_a
    sbb = dc.conv2d_fixed(lb * lb, k) - mu_b * mu_b
    sab = dc.conv2d_fixed(la * lb, k) - mu_a * mu_b
    num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return dc.mean(num / den)


def _channel_mean(I) -> np.ndarray:
    I = np.asarray(I, dtype=np.float64)
    return I.mean(axis=-1) if I.ndim == 3 else I


def smoothness_loss(Dhat: Tensor, I) -> Tensor:
    """Edge-aware smoothness of mean-normalized disparity 1/D.

    mean(|dx d| exp(-|dx I|)) + mean(|dy d| exp(-|dy I|)), forward differences,
    ``I`` reduced to channel-mean intensity and treated as constant.
    """
    if np.any(Dhat.value <= 0):
        raise ValueError("depth must be positive")
    graph = Dhat.graph
    disp = 1.0 / Dhat
    disp = disp / dc.expand(dc.mean(disp).reshape((1, 1, 1)), disp.shape)
    gray = _channel_mean(I)
    wx = np.exp(-np.abs(np.diff(gray, axis=1)))[..., None]
    wy = np.exp(-np.abs(np.diff(gray, axis=0)))[..., None]
    dx = disp[:, 1:] - disp[:, :-1]
    dy = disp[1:, :] - disp[:-1, :]
    return dc.mean(dc.abs_(dx) * graph.const(wx)) + dc.mean(dc.abs_(dy) * graph.const(wy))


def total_loss(coarse: Tensor, fine: Tensor, gt, Oc, Dhat: Tensor, I,
               weights: LossWeights = LossWeights(), validity=None) -> Tensor:
    """l_syn(coarse) + l_syn(fine) + alpha_sm * l_sm.

    ``Oc`` enters the blend as a constant: letting gradients reach it would
    reward shrinking the mask instead of fixing the render.
    """
    graph = coarse.graph
    Ocv = Oc.value if isinstance(Oc, Tensor) else np.asarray(Oc)
    O = graph.const(Ocv)
    if validity is None:
        validity = np.ones(coarse.shape[:2] + (1,))
    l_c = synthesis_loss(occlusion_blend(coarse, gt, O), gt, validity, weights)
    l_f = synthesis_loss(occlusion_blend(fine, gt, O), gt, validity, weights)
    loss = l_c + l_f
    if weights.alpha_sm > 0:
        loss = loss + weights.alpha_sm * smoothness_loss(Dhat, I)
    return loss
