"""Degradation models: masking, decimation, blur and parallel-beam Radon.

Each operator maps a [C,H,W] :class:`Tensor` to a measurement tensor through
autograd primitives, so data-consistency losses differentiate through it.
``adjoint`` acts on plain arrays and is exact for the linear part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import Tensor

__all__ = [
    "ForwardOperator",
    "Identity",
    "Inpaint",
    "Downsample",
    "Blur",
    "Radon",
    "Sinogram",
    "make_inpaint",
    "make_downsample",
    "make_motion_blur",
    "make_anisotropic_blur",
    "motion_kernel",
    "anisotropic_gaussian_kernel",
    "make_radon",
    "sparse_view_angles",
    "limited_angle_angles",
    "adjoint_check",
]


class ForwardOperator:
    kind: str = "identity"
    linear: bool = True
    #: shape used by :func:`adjoint_check` when none is given
    probe_shape: tuple[int, int, int] = (1, 8, 8)

    def apply(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def apply_linear(self, x: Tensor) -> Tensor:
        """The linear part of ``apply`` (identical for linear operators)."""
        return self.apply(x)

    def adjoint(self, r: np.ndarray, in_shape: tuple[int, int, int] | None = None) -> np.ndarray:
        raise NotImplementedError

    def image_shape(self, y_shape: tuple[int, ...]) -> tuple[int, int, int]:
        """Shape of the unknown image that produces a measurement of ``y_shape``."""
        return tuple(y_shape)

    def __call__(self, x: Tensor) -> Tensor:
        return self.apply(x)


class Identity(ForwardOperator):
    def apply(self, x):
        return x

    def adjoint(self, r, in_shape=None):
        return np.asarray(r)


@dataclass(eq=False)
class Inpaint(ForwardOperator):
    mask: np.ndarray  # [1,H,W], 1 = observed
    kind = "inpaint"

    def __post_init__(self):
        self.probe_shape = (3,) + self.mask.shape[1:]
        self._mask_t = Tensor(self.mask)

    def _check(self, shape):
        if tuple(shape[1:]) != self.mask.shape[1:]:
            raise ValueError(f"image extents {shape[1:]} do not match mask {self.mask.shape[1:]}")

    def apply(self, x):
        self._check(x.shape)
        mask = self._mask_t if x.dtype == np.float32 else Tensor(self.mask.astype(x.dtype))
        return ag.mul(x, mask)

    def adjoint(self, r, in_shape=None):
        r = np.asarray(r)
        self._check(r.shape)
        return r * self.mask.astype(r.dtype)


def make_inpaint(h: int, w: int, missing_fraction: float, seed: int) -> Inpaint:
    """Random pixel mask with exactly ``round(missing_fraction*h*w)`` holes."""
    if not 0.0 < missing_fraction < 1.0:
        raise ValueError(f"missing_fraction must lie in (0,1), got {missing_fraction}")
    n_missing = int(round(missing_fraction * h * w))
    rng = np.random.default_rng(seed)
    mask = np.ones(h * w, dtype=np.float32)
    mask[rng.choice(h * w, size=n_missing, replace=False)] = 0.0
    return Inpaint(mask.reshape(1, h, w))


def _depthwise(kernel2d: np.ndarray, channels: int, dtype) -> Tensor:
    k = np.broadcast_to(kernel2d, (channels, 1) + kernel2d.shape)
    return Tensor(np.ascontiguousarray(k, dtype=dtype))


@dataclass(eq=False)
class Downsample(ForwardOperator):
    """Separable triangle low-pass (unit DC gain) followed by decimation."""

    factor: int
    kind = "downsample"

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be positive")
        f = self.factor
        tri = np.array([f - abs(i - (f - 1)) for i in range(2 * f - 1)], dtype=np.float64)
        tri /= tri.sum()
        self.kernel = np.outer(tri, tri)
        self.probe_shape = (3, 4 * f, 4 * f)

    def image_shape(self, y_shape):
        c, h, w = y_shape
        return (c, h * self.factor, w * self.factor)

    def _check(self, shape):
        if shape[1] % self.factor or shape[2] % self.factor:
            raise ValueError(f"extents {shape[1:]} not divisible by factor {self.factor}")

    def apply(self, x):
        self._check(x.shape)
        k = _depthwise(self.kernel, x.shape[0], x.dtype)
        return ag.decimate(ag.conv2d(x, k, "symmetric", 1, depthwise=True), self.factor)

    def adjoint(self, r, in_shape=None):
        r = np.asarray(r)
        c, h, w = r.shape
        f = self.factor
        up = np.zeros((c, h * f, w * f), dtype=r.dtype)
        up[:, ::f, ::f] = r
        k = _depthwise(self.kernel, c, r.dtype).data
        return ag.conv2d_transpose(up, k, up.shape, "symmetric", 1, depthwise=True)


@dataclass(eq=False)
class Blur(ForwardOperator):
    """Depthwise convolution with symmetric padding, then clipping to [0,1].

    The clip makes the operator nonlinear; ``adjoint`` covers the
    convolution only.
    """

    kernel: np.ndarray
    kind = "blur"
    linear = False
    probe_shape = (3, 24, 24)

    def apply_linear(self, x):
        k = _depthwise(self.kernel, x.shape[0], x.dtype)
        return ag.conv2d(x, k, "symmetric", 1, depthwise=True)

    def apply(self, x):
        return ag.clip(self.apply_linear(x), 0.0, 1.0)

    def adjoint(self, r, in_shape=None):
        r = np.asarray(r)
        k = _depthwise(self.kernel, r.shape[0], r.dtype).data
        return ag.conv2d_transpose(r, k, r.shape, "symmetric", 1, depthwise=True)


def motion_kernel(length: int = 21, angle_deg: float = 45.0, size: int = 21) -> np.ndarray:
    """Unit-sum line kernel of the given length through the kernel centre.

    The segment is sampled densely and every pixel whose centre is nearest
    to a sample is set; ``angle_deg`` is measured counter-clockwise from the
    +x axis with rows pointing down.
    """
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    k = np.zeros((size, size))
    c = size // 2
    if length <= 1:
        k[c, c] = 1.0
        return k
    theta = math.radians(angle_deg)
    half = (length - 1) / 2.0
    for t in np.linspace(-half, half, 8 * length + 1):
        col = int(round(c + t * math.cos(theta)))
        row = int(round(c - t * math.sin(theta)))
        if 0 <= row < size and 0 <= col < size:
            k[row, col] = 1.0
    return k / k.sum()


def anisotropic_gaussian_kernel(
    sigma_x: float = 3.0, sigma_y: float = 8.0, angle_deg: float = 30.0, size: int = 21
) -> np.ndarray:
    """Rotated anisotropic Gaussian sampled at integer offsets, unit sum."""
    c = size // 2
    dy, dx = np.mgrid[-c : c + 1, -c : c + 1].astype(np.float64)
    theta = math.radians(angle_deg)
    u = math.cos(theta) * dx + math.sin(theta) * dy
    v = -math.sin(theta) * dx + math.cos(theta) * dy
    k = np.exp(-0.5 * (u**2 / sigma_x**2 + v**2 / sigma_y**2))
    return k / k.sum()


def make_motion_blur(length: int = 21, angle_deg: float = 45.0, size: int = 21) -> Blur:
    return Blur(motion_kernel(length, angle_deg, size))


def make_anisotropic_blur(
    sigma_x: float = 3.0, sigma_y: float = 8.0, angle_deg: float = 30.0, size: int = 21
) -> Blur:
    return Blur(anisotropic_gaussian_kernel(sigma_x, sigma_y, angle_deg, size))


def make_downsample(factor: int) -> Downsample:
    if factor not in (2, 4):
        raise ValueError(f"factor must be 2 or 4, got {factor}")
    return Downsample(factor)


# ---------------------------------------------------------------------- radon


@dataclass
class Sinogram:
    values: np.ndarray  # [num_angles, num_detectors]
    angles: np.ndarray  # degrees

    def __post_init__(self):
        if self.values.shape[0] != len(self.angles):
            raise ValueError("one sinogram row per angle required")


def sparse_view_angles(num_views: int = 60) -> np.ndarray:
    return np.arange(num_views) * (180.0 / num_views)


def limited_angle_angles(start: float = 0.0, stop: float = 119.0, step: float = 1.0) -> np.ndarray:
    return np.arange(start, stop + step / 2, step)


def _radon_matrix(n: int, angles_deg: np.ndarray, num_detectors: int) -> sp.csr_matrix:
    centre = (n - 1) / 2.0
    det = np.arange(num_detectors) - (num_detectors - 1) / 2.0
    reach = int(math.ceil(n / math.sqrt(2.0))) + 1
    tau = np.arange(-reach, reach + 1, dtype=np.float64)
    rows, cols, vals = [], [], []
    for a_index, angle in enumerate(angles_deg):
        theta = math.radians(angle)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        # exact axes keep the hot-pixel geometry free of rounding noise
        if angle % 90 == 0:
            cos_t, sin_t = float(round(cos_t)), float(round(sin_t))
        x = det[:, None] * cos_t - tau[None, :] * sin_t
        y = det[:, None] * sin_t + tau[None, :] * cos_t
        fr = centre - y
        fc = x + centre
        r0 = np.floor(fr).astype(np.int64)
        c0 = np.floor(fc).astype(np.int64)
        wr = fr - r0
        wc = fc - c0
        ray = a_index * num_detectors + np.broadcast_to(np.arange(num_detectors)[:, None], x.shape)
        for dr, dc, weight in (
            (0, 0, (1 - wr) * (1 - wc)),
            (0, 1, (1 - wr) * wc),
            (1, 0, wr * (1 - wc)),
            (1, 1, wr * wc),
        ):
            rr, cc = r0 + dr, c0 + dc
            keep = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n) & (weight > 0)
            rows.append(ray[keep])
            cols.append(rr[keep] * n + cc[keep])
            vals.append(weight[keep])
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(angles_deg) * num_detectors, n * n),
    )
    return m.tocsr()


@dataclass(eq=False)
class Radon(ForwardOperator):
    """Parallel-beam line integrals as an explicit sparse system matrix.

    Row ``a * num_detectors + d`` holds the ray for angle ``a`` and detector
    ``d``; rays are sampled at unit steps with bilinear pixel weights.
    """

    n: int
    angles: np.ndarray
    num_detectors: int
    kind = "radon"

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.matrix = _radon_matrix(self.n, self.angles, self.num_detectors)
        self._matrix32 = self.matrix.astype(np.float32)
        self.probe_shape = (1, self.n, self.n)

    @property
    def out_shape(self) -> tuple[int, int]:
        return (len(self.angles), self.num_detectors)

    def image_shape(self, y_shape):
        return (1, self.n, self.n)

    def _check(self, shape):
        if tuple(shape) != (1, self.n, self.n):
            raise ValueError(f"radon expects shape (1,{self.n},{self.n}), got {tuple(shape)}")

    def apply(self, x):
        self._check(x.shape)
        m = self._matrix32 if x.dtype == np.float32 else self.matrix
        return ag.sparse_matvec(m, x, self.out_shape)

    def adjoint(self, r, in_shape=None):
        r = np.asarray(r)
        m = self._matrix32 if r.dtype == np.float32 else self.matrix
        return np.asarray(m.T @ r.reshape(-1), dtype=r.dtype).reshape(1, self.n, self.n)

    def sinogram(self, x: Tensor) -> Sinogram:
        return Sinogram(self.apply(x).data, self.angles)


def make_radon(n: int, angles, num_detectors: int | None = None) -> Radon:
    angles = np.asarray(angles, dtype=np.float64).reshape(-1)
    if n < 2:
        raise ValueError("image side must be at least 2")
    if angles.size == 0:
        raise ValueError("angle list is empty")
    if num_detectors is None:
        num_detectors = int(math.ceil(math.sqrt(2.0) * n))
    return Radon(n, angles, num_detectors)


# --------------------------------------------------------------- adjoint test


def adjoint_check(
    op: ForwardOperator, trials: int = 50, seed: int = 0, shape: tuple[int, int, int] | None = None
) -> float:
    """Max over trials of ``|<Ax,y> - <x,A^T y>| / (||Ax|| ||y||)``, in float64.

    For blur the convolution part is checked.
    """
    shape = tuple(shape or op.probe_shape)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(shape)
        ax = op.apply_linear(Tensor(x)).data
        y = rng.standard_normal(ax.shape)
        aty = op.adjoint(y, shape)
        lhs = float(np.dot(ax.ravel(), y.ravel()))
        rhs = float(np.dot(x.ravel(), aty.ravel()))
        denom = np.linalg.norm(ax) * np.linalg.norm(y)
        if denom == 0:
            continue
        worst = max(worst, abs(lhs - rhs) / denom)
    return worst
