"""Top Hessian eigenvalues by deflated power iteration, and quadratic GD regimes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError

__all__ = [
    "SpectrumReport",
    "QuadraticSpec",
    "TrajectoryReport",
    "top_k_eigs",
    "convergence_interval",
    "classify_factor",
    "simulate_quadratic_gd",
    "MONOTONE_CONVERGE",
    "OSCILLATING_CONVERGE",
    "NEUTRAL",
    "DIVERGE",
]

MONOTONE_CONVERGE = "monotone_converge"
OSCILLATING_CONVERGE = "oscillating_converge"
NEUTRAL = "neutral"
DIVERGE = "diverge"


@dataclass
class SpectrumReport:
    eigenvalues: list[float]
    eigenvectors: np.ndarray  # (k, dim), rows match ``eigenvalues``
    iterations_used: list[int]
    residuals: list[float]
    converged: list[bool]
    rayleigh_history: list[list[float]] = field(default_factory=list)

    @property
    def intervals(self) -> list[tuple[float, float] | None]:
        return [convergence_interval(lam) for lam in self.eigenvalues]

    @property
    def all_converged(self) -> bool:
        return all(self.converged)

    def to_dict(self) -> dict:
        return {
            "eigenvalues": list(self.eigenvalues),
            "intervals": [None if iv is None else list(iv) for iv in self.intervals],
            "residuals": list(self.residuals),
            "iterations_used": list(self.iterations_used),
            "converged": list(self.converged),
        }


def convergence_interval(lam: float):
    """Learning rates ``(0, 2 / lam)`` that contract a direction of curvature ``lam``.

    Returns ``None`` for ``lam <= 0``: such a direction puts no upper bound on the rate.
    """
    if lam <= 0:
        return None
    return (0.0, 2.0 / lam)


def _ritz(prev_v, prev_hv, v, hv):
    # Rayleigh-Ritz on span{prev_v, v}; both H-images are already known.
    # Picks the Ritz value of largest magnitude, which also settles +/- pairs.
    q1, hq1 = v, hv
    c = float(q1 @ prev_v) if prev_v is not None else 1.0
    if prev_v is not None:
        r = prev_v - c * q1
        nr = float(np.linalg.norm(r))
    else:
        nr = 0.0
    if nr < 1e-8:
        theta = float(q1 @ hq1)
        return theta, q1, hq1
    q2 = r / nr
    hq2 = (prev_hv - c * hq1) / nr
    off = 0.5 * (float(q1 @ hq2) + float(q2 @ hq1))
    t = np.array([[float(q1 @ hq1), off], [off, float(q2 @ hq2)]])
    vals, vecs = np.linalg.eigh(t)
    j = int(np.argmax(np.abs(vals) + 1e-15 * vals))
    a, b = vecs[:, j]
    y = a * q1 + b * q2
    hy = a * hq1 + b * hq2
    ny = float(np.linalg.norm(y))
    return float(vals[j]), y / ny, hy / ny


def top_k_eigs(op, k: int, max_iters: int = 1000, tol: float = 1e-6, seed: int = 0) -> SpectrumReport:
    """Largest-magnitude eigenpairs of a symmetric operator exposing ``dim`` and ``hvp``.

    Each pair is found by power iteration on the operator deflated against the
    pairs already found (Gram-Schmidt projection on both sides). A pair is
    accepted when ``||H y - theta y|| <= tol * |theta|``; pairs that do not get
    there within ``max_iters`` are reported with ``converged = False``.
    """
    dim = int(op.dim)
    if not 1 <= k <= dim:
        raise ValidationError(f"k must lie in [1, {dim}], got {k}")
    if not tol > 0:
        raise ValidationError("tol must be positive")
    rng = np.random.default_rng(seed)
    found: list[np.ndarray] = []

    def project(x):
        for u in found:
            x = x - (u @ x) * u
        return x

    def apply(x):
        return project(np.asarray(op.hvp(project(x)), dtype=np.float64))

    values, vectors, iters, residuals, flags, history = [], [], [], [], [], []
    for _ in range(k):
        v = project(rng.standard_normal(dim))
        v /= np.linalg.norm(v)
        hv = apply(v)
        prev_v = prev_hv = None
        theta, y = float(v @ hv), v
        hist = []
        ok = False
        it = 0
        for it in range(1, max_iters + 1):
            theta, y, hy = _ritz(prev_v, prev_hv, v, hv)
            hist.append(theta)
            res = float(np.linalg.norm(hy - theta * y))
            if res <= tol * abs(theta) or res <= 1e-300:
                ok = True
                break
            nh = float(np.linalg.norm(hv))
            prev_v, prev_hv = v, hv
            v = hv / nh
            v = project(v)
            v /= np.linalg.norm(v)
            hv = apply(v)
        y = project(y)
        y /= np.linalg.norm(y)
        true_hy = np.asarray(op.hvp(y), dtype=np.float64)
        theta = float(y @ true_hy)
        found.append(y)
        values.append(theta)
        vectors.append(y)
        iters.append(it)
        residuals.append(float(np.linalg.norm(true_hy - theta * y)))
        flags.append(ok)
        history.append(hist)

    order = sorted(range(k), key=lambda i: -abs(values[i]))
    return SpectrumReport(
        eigenvalues=[values[i] for i in order],
        eigenvectors=np.array([vectors[i] for i in order]),
        iterations_used=[iters[i] for i in order],
        residuals=[residuals[i] for i in order],
        converged=[flags[i] for i in order],
        rayleigh_history=[history[i] for i in order],
    )


@dataclass(frozen=True)
class QuadraticSpec:
    """Loss ``0.5 * sum_i eigenvalues[i] * c_i**2`` written in the Hessian eigenbasis."""

    eigenvalues: tuple[float, ...]
    init: tuple[float, ...] | None = None

    def __post_init__(self):
        lam = tuple(float(x) for x in self.eigenvalues)
        object.__setattr__(self, "eigenvalues", lam)
        if not lam or any(not x > 0 for x in lam):
            raise ValidationError("eigenvalues must be positive")
        init = (1.0,) * len(lam) if self.init is None else tuple(float(x) for x in self.init)
        if len(init) != len(lam):
            raise DimensionError("init must have one coefficient per eigenvalue")
        object.__setattr__(self, "init", init)


@dataclass
class TrajectoryReport:
    lr: float
    factors: np.ndarray  # 1 - lr * lambda per direction
    classifications: list[str]
    coefficients: np.ndarray  # (steps + 1, d); row k is the coefficient after k steps

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "factors": self.factors.tolist(),
            "classifications": list(self.classifications),
            "final": self.coefficients[-1].tolist(),
        }


def classify_factor(factor: float) -> str:
    a = abs(factor)
    if math.isclose(a, 1.0, rel_tol=1e-12, abs_tol=1e-12):
        return NEUTRAL
    if a > 1.0:
        return DIVERGE
    return MONOTONE_CONVERGE if factor >= 0 else OSCILLATING_CONVERGE


def simulate_quadratic_gd(spec: QuadraticSpec, lr: float, steps: int) -> TrajectoryReport:
    """Closed-form GD on a quadratic: coefficient ``k`` along direction ``i`` is ``init_i * (1 - lr*lam_i)**k``."""
    if not lr > 0:
        raise ValidationError("lr must be positive")
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    lam = np.array(spec.eigenvalues)
    factors = 1.0 - lr * lam
    k = np.arange(steps + 1)[:, None]
    with np.errstate(over="ignore"):
        coeffs = np.array(spec.init)[None, :] * np.power(factors[None, :], k)
    return TrajectoryReport(
        lr=float(lr),
        factors=factors,
        classifications=[classify_factor(f) for f in factors],
        coefficients=coeffs,
    )
