"""Training losses (MSE, adversarial, TV, their weighted sum, discriminator)
and the PSNR / SSIM image metrics.

Every loss returns ``(value, grad)`` where ``grad`` is taken with respect to
the first argument. Tensors are averaged over all elements, so a single
``(1, 1, H, W)`` image gets the ``1/(W*H)`` prefactor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "LossWeights",
    "MetricReport",
    "TV_EPS",
    "PSNR_CAP",
    "loss_mse",
    "loss_adv",
    "loss_tv",
    "loss_ae",
    "loss_dis",
    "psnr",
    "ssim",
    "evaluate",
]

TV_EPS = 1e-8
PSNR_CAP = 200.0


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1e-3
    alpha3: float = 2e-8

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float

    def __str__(self):
        return f"PSNR={self.psnr:.3f} SSIM={self.ssim:.3f}"


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def loss_mse(pred, gt):
    _same_shape(pred, gt)
    diff = pred - gt
    n = diff.size
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


def loss_adv(d_out):
    """``1 - D(G(x))`` averaged over the batch; gradient w.r.t. ``d_out``."""
    d_out = np.asarray(d_out)
    return float(np.mean(1.0 - d_out)), np.full(d_out.shape, -1.0 / max(d_out.size, 1))


def loss_tv(pred, eps: float = TV_EPS):
    """Mean over pixels of ``sqrt(dx^2 + dy^2 + eps)`` with forward differences.

    Differences past the last row / column are zero. Works on the trailing
    two axes of any array.
    """
    pred = np.asarray(pred)
    dx = np.zeros_like(pred)
    dy = np.zeros_like(pred)
    dx[..., :, :-1] = pred[..., :, 1:] - pred[..., :, :-1]
    dy[..., :-1, :] = pred[..., 1:, :] - pred[..., :-1, :]
    mag = np.sqrt(dx * dx + dy * dy + eps)
    n = pred.size
    px = dx / mag / n
    py = dy / mag / n
    grad = -(px + py)
    grad[..., :, 1:] += px[..., :, :-1]
    grad[..., 1:, :] += py[..., :-1, :]
    return float(np.sum(mag) / n), grad


def loss_ae(pred, gt, d_out, weights: LossWeights = LossWeights()):
    """Weighted generator loss.

    Returns ``(total, grad_pred, grad_d_out, parts)``; ``parts`` holds the
    unweighted ``mse``, ``adv`` and ``reg`` terms. ``d_out`` may be None when
    no discriminator is in play (the adversarial term is then 0).
    """
    mse, g_mse = loss_mse(pred, gt)
    reg, g_reg = loss_tv(pred)
    if d_out is None:
        adv, g_adv = 0.0, None
    else:
        adv, g_adv = loss_adv(d_out)
    total = weights.alpha1 * mse + weights.alpha2 * adv + weights.alpha3 * reg
    grad_pred = weights.alpha1 * g_mse + weights.alpha3 * g_reg
    grad_d = None if g_adv is None else weights.alpha2 * g_adv
    return total, grad_pred, grad_d, {"mse": mse, "adv": adv, "reg": reg}


def loss_dis(d_real, d_fake):
    """``1 - D(real) + D(fake)``; returns ``(value, grad_real, grad_fake)``."""
    d_real = np.asarray(d_real)
    d_fake = np.asarray(d_fake)
    value = float(1.0 - np.mean(d_real) + np.mean(d_fake))
    return (
        value,
        np.full(d_real.shape, -1.0 / max(d_real.size, 1)),
        np.full(d_fake.shape, 1.0 / max(d_fake.size, 1)),
    )


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give the 200 dB cap."""
    _same_shape(a, b)
    if peak <= 0:
        raise ValueError("peak must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * np.log10(peak) - 10.0 * np.log10(mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid positions."""
    _same_shape(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < win_size:
        raise ValueError(f"SSIM needs 2-D images of at least {win_size}x{win_size}")
    g = _gaussian_window(win_size, sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate(pred, gt, peak: float = 1.0) -> MetricReport:
    return MetricReport(psnr(pred, gt, peak), ssim(pred, gt, data_range=peak))
