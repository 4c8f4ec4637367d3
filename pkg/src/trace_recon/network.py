"""Untrained encoder-decoder used as the per-step proximal approximation.

Layout for ``depth`` levels and ``width`` channels everywhere::

    inc      conv3x3 in->w, lrelu                         (full resolution)
    down_d   conv3x3/2 w->w, lrelu, conv3x3 w->w, lrelu   (d = 1..depth)
    up_d     upsample x2, concat skip, conv3x3 2w->w, lrelu
    out      conv1x1 w->out, sigmoid

Parameter count: ``9*cin*w + w + depth*(36*w*w + 3*w) + w*cout + cout``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

__all__ = ["ArchConfig", "NetworkParams", "init_network", "forward_net", "parameter_count"]

LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class ArchConfig:
    depth: int = 3
    width: int = 16
    in_channels: int = 1
    out_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be at least 1")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")

    def layer_shapes(self) -> list[tuple[str, tuple[int, int, int, int]]]:
        k, w = self.kernel_size, self.width
        shapes = [("inc", (w, self.in_channels, k, k))]
        for d in range(1, self.depth + 1):
            shapes.append((f"down{d}a", (w, w, k, k)))
            shapes.append((f"down{d}b", (w, w, k, k)))
        for d in range(self.depth, 0, -1):
            shapes.append((f"up{d}", (w, 2 * w, k, k)))
        shapes.append(("out", (self.out_channels, w, 1, 1)))
        return shapes


def parameter_count(arch: ArchConfig) -> int:
    w, cin, cout = arch.width, arch.in_channels, arch.out_channels
    kk = arch.kernel_size**2
    return kk * cin * w + w + arch.depth * (4 * kk * w * w + 3 * w) + w * cout + cout


@dataclass
class NetworkParams:
    arch: ArchConfig
    seed: int
    kernels: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    def tensors(self) -> list[Tensor]:
        return [t for pair in zip(self.kernels, self.biases) for t in pair]

    def copy(self) -> NetworkParams:
        return NetworkParams(
            self.arch,
            self.seed,
            [Tensor(k.data.copy(), requires_grad=True) for k in self.kernels],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
        )

    def astype(self, dtype) -> NetworkParams:
        return NetworkParams(
            self.arch,
            self.seed,
            [Tensor(k.data.astype(dtype), requires_grad=True) for k in self.kernels],
            [Tensor(b.data.astype(dtype), requires_grad=True) for b in self.biases],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors()])

    def equals(self, other: NetworkParams) -> bool:
        """Bitwise equality of every parameter array."""
        return all(
            a.data.dtype == b.data.dtype and np.array_equal(a.data, b.data)
            for a, b in zip(self.tensors(), other.tensors())
        )


def init_network(arch: ArchConfig, seed: int) -> NetworkParams:
    """Kaiming-uniform kernels (bound ``sqrt(6/fan_in)``) and zero biases."""
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    for _, shape in arch.layer_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        bound = math.sqrt(6.0 / fan_in)
        kernels.append(Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True))
        biases.append(Tensor(np.zeros((shape[0], 1, 1), dtype=np.float32), requires_grad=True))
    return NetworkParams(arch, seed, kernels, biases)


def _conv(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    return ag.add(ag.conv2d(x, kernel, "zero", stride), bias)


def forward_net(params: NetworkParams, x: Tensor) -> Tensor:
    arch = params.arch
    c, h, w = x.shape
    scale = 2**arch.depth
    if h % scale or w % scale:
        raise ValueError(f"input extents {h}x{w} must be divisible by {scale}")
    if c != arch.in_channels:
        raise ValueError(f"network expects {arch.in_channels} channels, got {c}")
    ks, bs = params.kernels, params.biases
    act = lambda t: ag.leaky_relu(t, LEAKY_SLOPE)  # noqa: E731

    h_cur = act(_conv(x, ks[0], bs[0]))
    skips = [h_cur]
    layer = 1
    for _ in range(arch.depth):
        h_cur = act(_conv(h_cur, ks[layer], bs[layer], stride=2))
        h_cur = act(_conv(h_cur, ks[layer + 1], bs[layer + 1]))
        layer += 2
        skips.append(h_cur)
    skips.pop()
    for _ in range(arch.depth):
        up = ag.upsample_nearest(h_cur, 2)
        h_cur = act(_conv(ag.concat([up, skips.pop()], axis=0), ks[layer], bs[layer]))
        layer += 1
    return ag.sigmoid(_conv(h_cur, ks[layer], bs[layer]))
