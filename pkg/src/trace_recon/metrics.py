"""Image-quality metrics and trajectory diagnostics."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["psnr", "ssim", "delta_series", "SSIM_WINDOW", "PSNR_IDENTICAL"]

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
#: returned by :func:`psnr` for identical images; serialized as "inf"
PSNR_IDENTICAL = math.inf


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, peak: float = 1.0) -> float:
    x, ref = _pair(x, ref)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak**2 / mse)


def _window_means(img: np.ndarray, k: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(img, (k, k)).mean(axis=(-1, -2))


def _ssim_2d(x: np.ndarray, y: np.ndarray, k: int, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _window_means(x, k), _window_means(y, k)
    vx = _window_means(x * x, k) - mx * mx
    vy = _window_means(y * y, k) - my * my
    cxy = _window_means(x * y, k) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(x, ref, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid 7x7 uniform windows, averaged over channels.

    Accepts [H,W] or [C,H,W] arrays; window statistics use population
    (biased) variances.
    """
    x, ref = _pair(x, ref)
    if x.ndim == 2:
        x, ref = x[None], ref[None]
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValueError(f"image {x.shape[-2:]} smaller than the {window}x{window} window")
    return float(np.mean([_ssim_2d(a, b, window, data_range) for a, b in zip(x, ref)]))


def delta_series(states, betas) -> tuple[np.ndarray, np.ndarray]:
    """State variation ``||x_t - x_{t+1}||`` and its ``beta_t``-weighted form.

    ``states`` is ordered ``x_T, x_{T-1}, ..., x_0``; ``betas[t]`` is indexed
    by trajectory step. Both outputs follow the order t = T-1 .. 0.
    """
    states = [np.asarray(s, dtype=np.float64) for s in states]
    if len(states) < 2:
        raise ValueError("need at least two states")
    T = len(states) - 1
    deltas = np.array([np.linalg.norm((states[i + 1] - states[i]).ravel()) for i in range(T)])
    weights = np.array([betas[T - 1 - i] for i in range(T)], dtype=np.float64)
    return deltas, weights * deltas
