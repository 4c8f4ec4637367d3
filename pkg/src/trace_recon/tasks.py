"""Test images and task assembly (ground truth -> measurement, operator)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .operators import (
    ForwardOperator,
    limited_angle_angles,
    make_anisotropic_blur,
    make_downsample,
    make_inpaint,
    make_motion_blur,
    make_radon,
    sparse_view_angles,
)

__all__ = [
    "TASK_KINDS",
    "SHEPP_LOGAN_ELLIPSES",
    "TaskSpec",
    "pixel_grid",
    "shepp_logan",
    "piecewise_smooth",
    "make_operator",
    "degrade",
]

TASK_KINDS = ("inpaint50", "inpaint70", "sr2", "sr4", "motion", "nonlinear", "ct_sparse", "ct_limited")

# (intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees)
SHEPP_LOGAN_ELLIPSES = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def pixel_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates on [-1,1]^2; row 0 is the top (y = +1 side)."""
    c = -1.0 + (2.0 * np.arange(n) + 1.0) / n
    return np.meshgrid(c, -c)


def shepp_logan(n: int) -> np.ndarray:
    """Ten-ellipse head phantom (modified intensities), shape [1,n,n]."""
    if n < 16:
        raise ValueError("phantom needs n >= 16")
    x, y = pixel_grid(n)
    img = np.zeros((n, n))
    for value, a, b, x0, y0, phi in SHEPP_LOGAN_ELLIPSES:
        th = math.radians(phi)
        dx, dy = x - x0, y - y0
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def piecewise_smooth(n: int, channels: int = 1) -> np.ndarray:
    """Deterministic synthetic image: shaded background, disc, bar and ring."""
    x, y = pixel_grid(n)
    img = 0.35 + 0.15 * x + 0.1 * y
    disc = (x + 0.3) ** 2 + (y - 0.25) ** 2 < 0.35**2
    img = np.where(disc, 0.8 - 0.25 * ((x + 0.3) ** 2 + (y - 0.25) ** 2) / 0.35**2, img)
    bar = (np.abs(x - 0.35) < 0.2) & (np.abs(y + 0.3) < 0.45)
    img = np.where(bar, 0.15 + 0.2 * (y + 0.75), img)
    r = np.hypot(x - 0.45, y - 0.5)
    img = np.where((r > 0.18) & (r < 0.3), 0.9, img)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    if channels == 1:
        return img[None]
    tints = np.linspace(0.8, 1.0, channels, dtype=np.float32)[:, None, None]
    return np.clip(img[None] * tints, 0.0, 1.0)


@dataclass
class TaskSpec:
    kind: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task {self.kind!r}; choose from {', '.join(TASK_KINDS)}")


def make_operator(task: TaskSpec, image_shape: tuple[int, int, int]) -> ForwardOperator:
    """Build the operator a task implies for an image of ``image_shape``."""
    c, h, w = image_shape
    p = task.params
    kind = task.kind
    if kind in ("inpaint50", "inpaint70"):
        fraction = p.get("missing_fraction", 0.5 if kind == "inpaint50" else 0.7)
        return make_inpaint(h, w, fraction, task.seed)
    if kind in ("sr2", "sr4"):
        factor = 2 if kind == "sr2" else 4
        if h % factor or w % factor:
            raise ValueError(f"{h}x{w} image not divisible by {factor}")
        return make_downsample(factor)
    if kind == "motion":
        return make_motion_blur(p.get("length", 21), p.get("angle", 45.0))
    if kind == "nonlinear":
        return make_anisotropic_blur(p.get("sigma_x", 3.0), p.get("sigma_y", 8.0), p.get("angle", 30.0))
    if c != 1 or h != w:
        raise ValueError(f"CT tasks need a square single-channel image, got {image_shape}")
    if kind == "ct_sparse":
        angles = sparse_view_angles(p.get("views", 60))
    else:
        angles = limited_angle_angles(p.get("start", 0.0), p.get("stop", 119.0), p.get("step", 1.0))
    return make_radon(h, angles, p.get("detectors"))


def degrade(task: TaskSpec, x_true: np.ndarray) -> tuple[Tensor, ForwardOperator]:
    """Noiseless measurement ``y = A(x_true)`` together with ``A``."""
    x_true = np.asarray(x_true, dtype=np.float32)
    if x_true.ndim != 3:
        raise ValueError("x_true must be [C,H,W]")
    if x_true.min() < 0 or x_true.max() > 1:
        raise ValueError("x_true must lie in [0,1]")
    op = make_operator(task, x_true.shape)
    y = op.apply(Tensor(x_true))
    return Tensor(y.data), op
