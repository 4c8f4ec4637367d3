"""Closed-form proximal maps on quadratics, used as numerical certificates.

For ``F(x) = 0.5 x^T H x - c^T x`` the coupled subproblem

    argmin_x F(x) + beta/2 ||x - x_ref||^2

is the linear solve ``(H + beta I) x = c + beta x_ref``. The checks here
verify, in float64, the transition identity, the proximal Lipschitz factors
``beta/(beta-rho)`` and ``beta/(beta+mu)``, and the propagation of injected
per-step errors along a backward trajectory.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuadInstance",
    "Certificate",
    "BoundViolation",
    "random_orthogonal",
    "spectral_instance",
    "data_fidelity_instance",
    "quad_prox",
    "verify_transition_bound",
    "prox_ratio",
    "prox_lipschitz_certificate",
    "propagation_bound",
    "verify_error_propagation",
    "remark1_demo",
    "certify_all",
    "certificates_csv",
]

STATIONARITY_TOL = 1e-10
IDENTITY_TOL = 1e-9
RATIO_SLACK = 1e-9
BOUND_SLACK = 1e-9


class BoundViolation(AssertionError):
    def __init__(self, name: str, step, lhs: float, rhs: float):
        self.name, self.step, self.lhs, self.rhs = name, step, lhs, rhs
        super().__init__(f"{name} violated at step {step}: {lhs!r} > {rhs!r}")


@dataclass
class QuadInstance:
    H: np.ndarray
    c: np.ndarray
    eigenvalues: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if not np.allclose(self.H, self.H.T, rtol=0, atol=1e-12):
            raise ValueError("H must be symmetric")
        if self.eigenvalues is None:
            self.eigenvalues = np.linalg.eigvalsh(self.H)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def lambda_min(self) -> float:
        return float(np.min(self.eigenvalues))

    @property
    def mu(self) -> float:
        return max(0.0, self.lambda_min)

    @property
    def rho(self) -> float:
        return max(0.0, -self.lambda_min)

    def value(self, x) -> float:
        return float(0.5 * x @ self.H @ x - self.c @ x)

    def gradient(self, x) -> np.ndarray:
        return self.H @ x - self.c

    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.H, self.c)


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def spectral_instance(eigenvalues, rng: np.random.Generator, c=None) -> QuadInstance:
    """``H = Q diag(e) Q^T`` with a random rotation, so ``mu``/``rho`` are exact."""
    e = np.asarray(eigenvalues, dtype=np.float64)
    q = random_orthogonal(e.size, rng)
    H = (q * e) @ q.T
    H = 0.5 * (H + H.T)
    c = rng.standard_normal(e.size) if c is None else np.asarray(c, dtype=np.float64)
    return QuadInstance(H, c, e.copy())


def data_fidelity_instance(A, y, lam: float = 0.0) -> QuadInstance:
    """``F(x) = 0.5||Ax - y||^2 + lam/2 ||x||^2`` (constant dropped)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    return QuadInstance(A.T @ A + lam * np.eye(A.shape[1]), A.T @ y)


def quad_prox(inst: QuadInstance, beta: float, x_ref) -> np.ndarray:
    if beta <= inst.rho:
        raise np.linalg.LinAlgError(f"beta={beta} must exceed rho={inst.rho} for a well-posed prox")
    x_ref = np.asarray(x_ref, dtype=np.float64)
    return np.linalg.solve(inst.H + beta * np.eye(inst.n), inst.c + beta * x_ref)


@dataclass
class Certificate:
    instance: str
    bound: str
    lhs: float
    rhs: float
    passed: bool

    def row(self) -> list[str]:
        return [self.instance, self.bound, f"{self.lhs:.12e}", f"{self.rhs:.12e}", "1" if self.passed else "0"]


def verify_transition_bound(inst: QuadInstance, beta: float, x_ref) -> tuple[float, float, float]:
    """Return ``(||x* - x_ref||, ||g*||/beta, stationarity residual)``.

    ``g* = H x* - c`` is the gradient at the prox point; at the exact
    minimiser the transition bound holds with equality.
    """
    x_ref = np.asarray(x_ref, dtype=np.float64)
    x_star = quad_prox(inst, beta, x_ref)
    g = inst.gradient(x_star)
    residual = float(np.linalg.norm(g + beta * (x_star - x_ref)))
    return float(np.linalg.norm(x_star - x_ref)), float(np.linalg.norm(g)) / beta, residual


def prox_ratio(inst: QuadInstance, beta: float, a, b) -> float:
    """``||P(a) - P(b)|| / ||a - b||``; 0 when ``a == b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    gap = float(np.linalg.norm(a - b))
    if gap == 0:
        return 0.0
    return float(np.linalg.norm(quad_prox(inst, beta, a) - quad_prox(inst, beta, b))) / gap


def prox_lipschitz_certificate(
    inst: QuadInstance, beta: float, trials: int = 100, seed: int = 0
) -> tuple[float, float]:
    """Largest observed ``||P(a)-P(b)|| / ||a-b||`` and the theoretical factor.

    The factor is ``beta/(beta+mu)`` when ``mu > 0`` and ``beta/(beta-rho)``
    otherwise. Identical pairs contribute a ratio of 0.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        a = rng.standard_normal(inst.n)
        b = rng.standard_normal(inst.n)
        worst = max(worst, prox_ratio(inst, beta, a, b))
    if inst.mu > 0:
        factor = beta / (beta + inst.mu)
    else:
        factor = beta / (beta - inst.rho)
    return worst, factor


def propagation_bound(deltas, factors, t: int = 0) -> float:
    """``sum_{s>=t} delta_s prod_{t<=i<s} factor_i`` (empty product = 1)."""
    total = 0.0
    for s in range(t, len(deltas)):
        total += deltas[s] * float(np.prod(factors[t:s]))
    return total


@dataclass
class PropagationResult:
    deviations: list[float]  # indexed by t = 0..T
    bound_weak: list[float]
    bound_strong: list[float] | None
    closed_form: float | None = None
    violations: list[BoundViolation] = field(default_factory=list)

    @property
    def final_deviation(self) -> float:
        return self.deviations[0]

    @property
    def bound(self) -> float:
        return self.bound_weak[0]


def verify_error_propagation(
    instances, betas, deltas, T: int, seed: int = 0, raise_on_violation: bool = True
) -> PropagationResult:
    """Compare the exact backward prox trajectory with one that receives an
    error of norm exactly ``deltas[t]`` after every step.

    ``instances[t]`` and ``betas[t]`` define the step-``t`` prox. Bounds are
    checked for every intermediate state.
    """
    if not (len(instances) == len(betas) == len(deltas) == T):
        raise ValueError("need one instance, beta and delta per step")
    for t in range(T):
        if betas[t] <= instances[t].rho:
            raise ValueError(f"beta_{t}={betas[t]} must exceed rho_{t}={instances[t].rho}")
    rng = np.random.default_rng(seed)
    n = instances[0].n
    start = rng.standard_normal(n)
    ideal, actual = start.copy(), start.copy()
    dev = [0.0] * (T + 1)
    for t in range(T - 1, -1, -1):
        ideal = quad_prox(instances[t], betas[t], ideal)
        direction = rng.standard_normal(n)
        direction /= np.linalg.norm(direction)
        actual = quad_prox(instances[t], betas[t], actual) + deltas[t] * direction
        dev[t] = float(np.linalg.norm(actual - ideal))

    weak = [betas[i] / (betas[i] - instances[i].rho) for i in range(T)]
    bound_weak = [propagation_bound(deltas, weak, t) for t in range(T)] + [0.0]
    strong = None
    bound_strong = None
    if all(inst.mu > 0 for inst in instances):
        strong = [betas[i] / (betas[i] + instances[i].mu) for i in range(T)]
        bound_strong = [propagation_bound(deltas, strong, t) for t in range(T)] + [0.0]
    closed = None
    if strong is not None and np.allclose(strong, strong[0], rtol=0, atol=1e-15) and np.ptp(deltas) == 0:
        q = strong[0]
        closed = deltas[0] * (1 - q**T) / (1 - q)

    result = PropagationResult(dev, bound_weak, bound_strong, closed)
    for t in range(T + 1):
        if dev[t] > bound_weak[t] + BOUND_SLACK:
            result.violations.append(BoundViolation("weakly-convex propagation", t, dev[t], bound_weak[t]))
        if bound_strong is not None and dev[t] > bound_strong[t] + BOUND_SLACK:
            result.violations.append(BoundViolation("contractive propagation", t, dev[t], bound_strong[t]))
    if closed is not None and dev[0] > closed + BOUND_SLACK:
        result.violations.append(BoundViolation("geometric closed form", 0, dev[0], closed))
    if raise_on_violation and result.violations:
        raise result.violations[0]
    return result


def remark1_demo(x_ref, lipschitz: float = 1.0, beta: float = 1.0, shifts=(0.0, 1.0, 10.0, 100.0), seed: int = 0):
    """Transition lengths for ``F_s(x) = L ||x - m_s||`` with ``||m_s - x_ref|| = s``.

    Without coupling the step lands on ``m_s`` (distance ``s``, unbounded in
    ``s``); with coupling ``beta`` the prox step moves at most ``L/beta``.
    Returns one dict per shift; nothing is asserted.
    """
    x_ref = np.asarray(x_ref, dtype=np.float64)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(x_ref.size)
    d /= np.linalg.norm(d)
    rows = []
    for s in shifts:
        m = x_ref + s * d
        gap = x_ref - m
        dist_gap = np.linalg.norm(gap)
        # prox of L||. - m||: block soft-threshold of x_ref around m
        shrink = max(0.0, 1.0 - (lipschitz / beta) / dist_gap) if dist_gap > 0 else 0.0
        x_star = m + shrink * gap
        g = beta * (x_ref - x_star)
        rows.append(
            {
                "shift": float(s),
                "distance_uncoupled": float(np.linalg.norm(m - x_ref)),
                "distance_coupled": float(np.linalg.norm(x_star - x_ref)),
                "subgradient_norm": float(np.linalg.norm(g)),
                "bound": lipschitz / beta,
            }
        )
    return rows


# ------------------------------------------------------------------ the suite


def _instance_family(kind: str, n: int, rng: np.random.Generator, curvature: float = 1.0) -> QuadInstance:
    spread = rng.uniform(0.5, 5.0, size=n)
    if kind == "strong":
        e = curvature + spread
        e[0] = curvature
    elif kind == "convex":
        e = spread
        e[0] = 0.0
    elif kind == "weak":
        e = spread
        e[0] = -curvature
    elif kind == "fidelity":
        A = rng.standard_normal((n // 2, n))
        return data_fidelity_instance(A, rng.standard_normal(n // 2), lam=curvature)
    else:
        raise ValueError(kind)
    return spectral_instance(e, rng)


def certify_all(n: int = 16, trials: int = 100, seed: int = 0, tolerance_scale: float = 1.0) -> list[Certificate]:
    """Run every certificate family and return the table.

    ``tolerance_scale`` multiplies all tolerances; a negative value is a
    test hook that makes every check fail.
    """
    rng = np.random.default_rng(seed)
    certs: list[Certificate] = []
    stat_tol = STATIONARITY_TOL * tolerance_scale
    ident_tol = IDENTITY_TOL * tolerance_scale
    slack = RATIO_SLACK * tolerance_scale
    bslack = BOUND_SLACK * tolerance_scale
    kinds = ("strong", "convex", "weak", "fidelity")

    for i in range(trials):
        kind = kinds[i % len(kinds)]
        inst = _instance_family(kind, n, rng, curvature=rng.uniform(0.1, 2.0))
        beta = inst.rho + rng.uniform(0.05, 5.0)
        x_ref = rng.standard_normal(n)
        lhs, rhs, residual = verify_transition_bound(inst, beta, x_ref)
        g_norm = rhs * beta
        tag = f"transition-{i:03d}-{kind}"
        certs.append(Certificate(tag, "stationarity", residual, stat_tol * (1 + g_norm), residual <= stat_tol * (1 + g_norm)))
        rel = abs(lhs * beta - g_norm) / max(g_norm, 1e-300)
        certs.append(Certificate(tag, "transition identity (rel err)", rel, ident_tol, rel <= ident_tol))

    lip_cases = [
        ("weak-beta2rho", "weak", 2.0),
        ("weak-beta1.2rho", "weak", 1.2),
        ("convex", "convex", None),
        ("strong", "strong", None),
        ("fidelity", "fidelity", None),
    ]
    for name, kind, mult in lip_cases:
        inst = _instance_family(kind, n, rng, curvature=1.0)
        beta = mult * inst.rho if mult else 1.5
        worst, factor = prox_lipschitz_certificate(inst, beta, trials, int(rng.integers(2**31)))
        label = "prox Lipschitz <= beta/(beta+mu)" if inst.mu > 0 else "prox Lipschitz <= beta/(beta-rho)"
        certs.append(Certificate(f"lipschitz-{name}", label, worst, factor + slack, worst <= factor + slack))
        if inst.mu > 0:
            weak_factor = beta / (beta - inst.rho)
            certs.append(
                Certificate(f"lipschitz-{name}", "prox Lipschitz <= beta/(beta-rho)", worst, weak_factor + slack,
                            worst <= weak_factor + slack)
            )

    for T in (2, 4, 8):
        for kind in ("convex", "weak", "strong"):
            insts = [_instance_family(kind, n, rng, curvature=rng.uniform(0.2, 1.0)) for _ in range(T)]
            betas = [inst.rho + rng.uniform(0.2, 3.0) for inst in insts]
            deltas = list(rng.uniform(0.0, 0.2, size=T))
            res = verify_error_propagation(insts, betas, deltas, T, int(rng.integers(2**31)), raise_on_violation=False)
            for t in range(T):
                certs.append(
                    Certificate(f"propagation-T{T}-{kind}", f"weakly-convex bound t={t}", res.deviations[t],
                                res.bound_weak[t] + bslack, res.deviations[t] <= res.bound_weak[t] + bslack)
                )
                if res.bound_strong is not None:
                    certs.append(
                        Certificate(f"propagation-T{T}-{kind}", f"contractive bound t={t}", res.deviations[t],
                                    res.bound_strong[t] + bslack, res.deviations[t] <= res.bound_strong[t] + bslack)
                    )

    for T in (2, 4, 8):
        beta, delta = 1.0, 0.1
        insts = [spectral_instance(np.full(n, 1.0), rng) for _ in range(T)]  # q = 0.5
        res = verify_error_propagation(insts, [beta] * T, [delta] * T, T, int(rng.integers(2**31)),
                                       raise_on_violation=False)
        certs.append(
            Certificate(f"geometric-T{T}", "delta(1-q^T)/(1-q)", res.final_deviation, res.closed_form + bslack,
                        res.final_deviation <= res.closed_form + bslack)
        )
    return certs


def certificates_csv(certs: list[Certificate]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["instance", "bound", "lhs", "rhs", "pass"])
    for c in certs:
        writer.writerow(c.row())
    return buf.getvalue()
