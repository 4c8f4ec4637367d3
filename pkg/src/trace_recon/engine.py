"""Trajectory-constrained reconstruction: schedules, DIP start, backward sweep.

States are indexed backward: ``x_T`` comes from an uncoupled DIP fit and
each step ``t = T-1 .. 0`` refits the warm-started network on

    0.5 * ||A D(u_t) - y||^2 + 0.5 * beta_t * ||D(u_t) - x_{t+1}||^2,

with ``u_t = x_{t+1} + sigma_t * eps_t``, then sets ``x_t = D(u_t)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .autograd import AdamState, Tensor
from .metrics import psnr, ssim
from .network import ArchConfig, NetworkParams, forward_net, init_network
from .operators import ForwardOperator

logger = logging.getLogger(__name__)

__all__ = [
    "Schedules",
    "TraceConfig",
    "StepRecord",
    "TrajectoryRecord",
    "TraceDivergence",
    "beta_schedule",
    "sigma_schedule",
    "dip_initialize",
    "training_loss",
    "trace_step",
    "run_trace",
]


class TraceDivergence(RuntimeError):
    """A trajectory state became non-finite."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite state at trajectory step t={step}" + (f": {detail}" if detail else ""))


def beta_schedule(T: int, beta_hi: float = 5e-3, beta_lo: float = 5e-4) -> list[float]:
    """Coupling weights, linear from ``beta_lo`` at t=0 up to ``beta_hi`` at t=T-1."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if beta_lo <= 0 or beta_hi <= 0:
        raise ValueError("coupling weights must be positive")
    if beta_hi < beta_lo:
        raise ValueError("beta_hi must not be below beta_lo")
    if T == 1:
        return [beta_hi]
    # linspace pins both endpoints exactly
    return [float(b) for b in np.linspace(beta_lo, beta_hi, T)]


def sigma_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 1e-2, eta: float = 1.0) -> list[float]:
    """Perturbation levels ``eta * sqrt(b_t)`` on a linear variance ladder."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if T == 1:
        return [eta * math.sqrt(beta_start)]
    return [eta * math.sqrt(float(b)) for b in np.linspace(beta_start, beta_end, T)]


@dataclass
class Schedules:
    T: int = 40
    K: int = 150
    lr: float = 1e-3
    beta_hi: float = 5e-3
    beta_lo: float = 5e-4
    beta_start: float = 1e-4
    beta_end: float = 1e-2
    eta: float = 1.0

    def __post_init__(self):
        if self.T < 1 or self.K < 0:
            raise ValueError("need T >= 1 and K >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")

    @property
    def uncoupled(self) -> bool:
        """A [0, 0] beta schedule is the no-coupling ablation."""
        return self.beta_hi == 0 and self.beta_lo == 0

    def betas(self) -> list[float]:
        if self.uncoupled:
            return [0.0] * self.T
        return beta_schedule(self.T, self.beta_hi, self.beta_lo)

    def sigmas(self) -> list[float]:
        return sigma_schedule(self.T, self.beta_start, self.beta_end, self.eta)


@dataclass
class TraceConfig:
    schedules: Schedules = field(default_factory=Schedules)
    arch: ArchConfig = field(default_factory=ArchConfig)
    seed: int = 0
    disable_coupling: bool = False
    disable_perturbation: bool = False
    disable_inheritance: bool = False
    snapshot_every: int = 1

    @property
    def coupling_off(self) -> bool:
        return self.disable_coupling or self.schedules.uncoupled

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TraceConfig:
        d = dict(d)
        return cls(
            schedules=Schedules(**d.pop("schedules")),
            arch=ArchConfig(**d.pop("arch")),
            **d,
        )


@dataclass
class StepRecord:
    t: int
    delta: float
    beta: float
    sigma: float
    loss_data: float
    loss_couple: float
    psnr: float = float("nan")
    ssim: float = float("nan")

    @property
    def beta_delta(self) -> float:
        return self.beta * self.delta


@dataclass
class TrajectoryRecord:
    """Per-step diagnostics plus retained states.

    ``states`` maps trajectory index to state; ``T`` and ``0`` are always
    kept, intermediate ones follow the snapshot cadence.
    """

    steps: list[StepRecord] = field(default_factory=list)
    states: dict[int, np.ndarray] = field(default_factory=dict)
    psnr_init: float = float("nan")
    ssim_init: float = float("nan")
    optimizer_steps: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def xT(self) -> np.ndarray:
        return self.states[max(self.states)]

    def deltas(self) -> np.ndarray:
        return np.array([s.delta for s in self.steps])


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for the DIP input and the per-step perturbations."""
    z_seq, eps_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(z_seq), np.random.default_rng(eps_seq)


def _step_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, 1 + t]).generate_state(1)[0])


def training_loss(
    params: NetworkParams,
    u: Tensor,
    x_prev: np.ndarray | None,
    y: Tensor,
    op: ForwardOperator,
    beta: float,
) -> tuple[Tensor, float, float]:
    """Coupled loss and its two components (data, coupling) as floats.

    ``beta == 0`` or ``x_prev is None`` drops the coupling term.
    """
    out = forward_net(params, u)
    data = ag.scale(ag.sum_of_squares(ag.sub(op.apply(out), y)), 0.5)
    if beta == 0 or x_prev is None:
        return data, float(data.data), 0.0
    couple = ag.scale(ag.sum_of_squares(ag.sub(out, Tensor(x_prev.astype(out.dtype)))), 0.5 * beta)
    return ag.add(data, couple), float(data.data), float(couple.data)


def _fit(params, u, x_prev, y, op, beta, K, lr, history=None, counter=None):
    state = AdamState(lr=lr)
    tensors = params.tensors()
    for _ in range(K):
        loss, ld, _ = training_loss(params, u, x_prev, y, op, beta)
        ag.adam_update(tensors, ag.gradients(loss, tensors), state)
        if history is not None:
            history.append(ld)
        if counter is not None:
            counter[0] += 1
    return state


def dip_initialize(
    y: Tensor,
    op: ForwardOperator,
    arch: ArchConfig,
    K: int,
    lr: float,
    seed: int,
    *,
    shape: tuple[int, int, int] | None = None,
    history: list[float] | None = None,
    counter: list[int] | None = None,
) -> tuple[np.ndarray, NetworkParams, np.ndarray]:
    """Uncoupled DIP fit from a fixed noise input ``z ~ U[0, 0.1]``."""
    if K < 0:
        raise ValueError("K must be non-negative")
    shape = tuple(shape or op.image_shape(y.shape))
    z_rng, _ = _rngs(seed)
    z = z_rng.uniform(0.0, 0.1, size=shape).astype(np.float32)
    params = init_network(arch, seed)
    zt = Tensor(z)
    _fit(params, zt, None, y, op, 0.0, K, lr, history, counter)
    return forward_net(params, zt).data, params, z


def trace_step(
    t: int,
    x_prev: np.ndarray,
    theta_warm: NetworkParams,
    y: Tensor,
    op: ForwardOperator,
    beta: float,
    sigma: float,
    K: int,
    lr: float,
    rng: np.random.Generator,
    *,
    disable_inheritance: bool = False,
    seed: int = 0,
    history: list[float] | None = None,
    counter: list[int] | None = None,
) -> tuple[np.ndarray, NetworkParams, dict]:
    """One coupled trajectory step; returns ``(x_t, theta_t^K, info)``.

    ``eps_t`` is drawn from ``rng`` even when ``sigma == 0`` so that the
    random stream does not depend on the perturbation schedule.
    """
    eps = rng.standard_normal(x_prev.shape).astype(np.float32)
    u = x_prev if sigma == 0 else (x_prev + np.float32(sigma) * eps).astype(np.float32)
    if disable_inheritance:
        params = init_network(theta_warm.arch, _step_seed(seed, t))
    else:
        params = theta_warm.copy()
    theta0 = params.copy()
    ut = Tensor(u)
    _fit(params, ut, x_prev, y, op, beta, K, lr, history, counter)
    _, ld, lc = training_loss(params, ut, x_prev, y, op, beta)
    x_t = forward_net(params, ut).data
    if not np.all(np.isfinite(x_t)):
        raise TraceDivergence(t)
    return x_t, params, {"u": u, "theta0": theta0, "loss_data": ld, "loss_couple": lc}


def run_trace(
    config: TraceConfig,
    y: Tensor,
    op: ForwardOperator,
    ground_truth: np.ndarray | None = None,
    *,
    shape: tuple[int, int, int] | None = None,
    keep_loss_history: bool = False,
    on_step: Callable[[int, NetworkParams, NetworkParams], None] | None = None,
) -> TrajectoryRecord:
    """Run the full backward trajectory and return its record.

    ``on_step(t, theta_t^0, theta_t^K)`` is called after every coupled step.
    BLAS is pinned to one thread for bitwise reproducibility.
    """
    with threadpool_limits(limits=1):
        return _run_trace(config, y, op, ground_truth, shape, keep_loss_history, on_step)


def _run_trace(config, y, op, ground_truth, shape, keep_loss_history, on_step):
    sch = config.schedules
    betas = [0.0] * sch.T if config.coupling_off else sch.betas()
    sigmas = [0.0] * sch.T if config.disable_perturbation else sch.sigmas()
    if not config.coupling_off and min(betas) <= 0:
        raise ValueError("coupling weights must be positive")
    cadence = max(1, config.snapshot_every)
    record = TrajectoryRecord()
    history = record.loss_history if keep_loss_history else None
    counter = [0]

    def metrics(x):
        if ground_truth is None:
            return float("nan"), float("nan")
        return psnr(x, ground_truth), ssim(x, ground_truth)

    try:
        x_prev, params, _ = dip_initialize(
            y, op, config.arch, sch.K, sch.lr, config.seed, shape=shape, history=history, counter=counter
        )
    except ag.NonFiniteError as exc:
        raise TraceDivergence(sch.T, f"DIP initialization: {exc}") from exc
    if not np.all(np.isfinite(x_prev)):
        raise TraceDivergence(sch.T, "DIP initialization")
    record.states[sch.T] = x_prev
    record.psnr_init, record.ssim_init = metrics(x_prev)
    _, eps_rng = _rngs(config.seed)

    for t in range(sch.T - 1, -1, -1):
        try:
            x_t, new_params, info = trace_step(
                t,
                x_prev,
                params,
                y,
                op,
                betas[t],
                sigmas[t],
                sch.K,
                sch.lr,
                eps_rng,
                disable_inheritance=config.disable_inheritance,
                seed=config.seed,
                history=history,
                counter=counter,
            )
        except ag.NonFiniteError as exc:
            raise TraceDivergence(t, str(exc)) from exc
        delta = float(np.linalg.norm((x_t.astype(np.float64) - x_prev.astype(np.float64)).ravel()))
        p, s = metrics(x_t)
        record.steps.append(StepRecord(t, delta, betas[t], sigmas[t], info["loss_data"], info["loss_couple"], p, s))
        if on_step is not None:
            on_step(t, info["theta0"], new_params)
        if t == 0 or t % cadence == 0:
            record.states[t] = x_t
        logger.debug("t=%d delta=%.4e data=%.4e psnr=%.2f", t, delta, info["loss_data"], p)
        x_prev, params = x_t, new_params

    record.optimizer_steps = counter[0]
    expected = sch.K + sch.T * sch.K
    if record.optimizer_steps != expected:
        raise AssertionError(f"optimizer ran {record.optimizer_steps} steps, expected {expected}")
    return record
