"""Stability diagnostics and the closed-form error bound.

Everything here is descriptive: the error rate over a labeled set, a
Lyapunov-style stability value combining error with parameter drift, window
summaries of a stability trace, and the three-term bound

    err0 * exp(-kappa * gamma0 * T)
        + (c1 * epsilon / gamma0) * sqrt(T / m)
        + c2 * sqrt(log(m * T / delta) / m)

whose constants are derived, never stored: kappa = mu * gamma0 / 2,
c1 = sigma2 * gamma0^2 / sqrt(2), c2 = 2 * c * sqrt(log(1 / delta)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .domains import Dataset
from .errors import ContractError, ShapeError
from .osmosis import RunRecord, pseudo_labels


def err_rate(model: nn.MlpModel, labeled: Dataset) -> float:
    """Misclassification fraction of the model on a labeled set."""
    if labeled.y is None:
        raise ContractError("err_rate needs oracle labels")
    return float((pseudo_labels(model, labeled.X) != labeled.y).mean())


def lyapunov_v(err: float, theta_now: np.ndarray, theta_prev: np.ndarray,
               lambda_v: float) -> float:
    """Stability value: err + lambda_v * ||theta_now - theta_prev||^2."""
    a = np.asarray(theta_now, dtype=np.float64)
    b = np.asarray(theta_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(
            f"parameter shapes differ: {a.shape} vs {b.shape}"
        )
    diff = (a - b).ravel()
    return float(err + lambda_v * (diff @ diff))


@dataclass(frozen=True)
class LyapunovEntry:
    t: int
    k: int
    err: float
    theta_drift_sq: float
    v: float


@dataclass
class LyapunovTrace:
    """Per-step stability values at a fixed drift weight lambda_v.

    Every appended entry satisfies v = err + lambda_v * theta_drift_sq by
    construction.
    """

    lambda_v: float = 1.0
    entries: list[LyapunovEntry] = field(default_factory=list)

    def append(self, t: int, k: int, err: float, theta_drift_sq: float) -> None:
        v = err + self.lambda_v * theta_drift_sq
        self.entries.append(LyapunovEntry(t, k, err, theta_drift_sq, v))

    def values(self) -> np.ndarray:
        return np.array([e.v for e in self.entries])

    @classmethod
    def from_run(cls, record: RunRecord, lambda_v: float = 1.0) -> "LyapunovTrace":
        """Build a trace from a run's step logs.

        Steps whose incoming domain carried no labels (error sentinel -1)
        have no error value and are left out.
        """
        trace = cls(lambda_v)
        for step in record.steps:
            if step.err_next < 0.0:
                continue
            trace.append(step.t, step.k, step.err_next, step.drift_sq)
        return trace


@dataclass(frozen=True)
class DriftReport:
    """Window summary of a stability trace; descriptive only."""

    first_window_mean: float
    last_window_mean: float
    nonincrease_fraction: float
    contraction_ratio: float


def drift_report(trace: LyapunovTrace, window: int) -> DriftReport:
    """Compare the head and tail of a trace and fit a per-step ratio.

    The contraction ratio is the geometric mean of consecutive V ratios
    (equivalently the least-squares slope of log V per step); pairs with a
    non-positive denominator are skipped, and a trace with no usable pair
    reports a ratio of exactly 1.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    v = trace.values()
    if v.size < 2 * window:
        raise ValueError(
            f"trace has {v.size} entries, need at least {2 * window}"
        )
    pairs = [(a, b) for a, b in zip(v, v[1:])]
    noninc = sum(b <= a for a, b in pairs) / len(pairs)
    log_ratios = [math.log(b / a) for a, b in pairs if a > 0 and b > 0]
    ratio = math.exp(float(np.mean(log_ratios))) if log_ratios else 1.0
    return DriftReport(
        first_window_mean=float(v[:window].mean()),
        last_window_mean=float(v[-window:].mean()),
        nonincrease_fraction=float(noninc),
        contraction_ratio=ratio,
    )


@dataclass(frozen=True)
class BoundParams:
    """Inputs to the error bound; derived constants are properties."""

    mu: float
    sigma2: float
    gamma0: float
    epsilon: float
    m: int
    T: int
    delta: float
    err0: float
    c: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.gamma0 <= 0:
            raise ValueError(f"gamma0 must be > 0, got {self.gamma0}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.T < 0:
            raise ValueError(f"T must be >= 0, got {self.T}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 <= self.err0 <= 1.0:
            raise ValueError(f"err0 must lie in [0, 1], got {self.err0}")
        if self.c < 0:
            raise ValueError(f"c must be >= 0, got {self.c}")

    @property
    def kappa(self) -> float:
        return self.mu * self.gamma0 / 2.0

    @property
    def c1(self) -> float:
        return self.sigma2 * self.gamma0 ** 2 / math.sqrt(2.0)

    @property
    def c2(self) -> float:
        return 2.0 * self.c * math.sqrt(math.log(1.0 / self.delta))


def error_bound(p: BoundParams) -> float:
    """Evaluate the three-term bound at p.

    Terms with a zero coefficient are skipped outright, so configurations
    like T=0 with c=0 stay well-defined; a nonzero confidence term requires
    log(m*T/delta) >= 0 and raises otherwise.
    """
    decay = p.err0 * math.exp(-p.kappa * p.gamma0 * p.T)
    variance = (p.c1 * p.epsilon / p.gamma0) * math.sqrt(p.T / p.m)
    if p.c2 == 0.0:
        confidence = 0.0
    else:
        inside = math.log(p.m * p.T / p.delta) if p.T > 0 else -math.inf
        if inside < 0.0:
            raise ValueError(
                f"confidence term undefined: log(m*T/delta) = {inside:.3g} < 0"
            )
        confidence = p.c2 * math.sqrt(inside / p.m)
    return decay + variance + confidence
