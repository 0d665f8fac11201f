"""Relative error metrics and the error-propagation diagnostic.

``rmae``/``rrmse`` use plain sums over all nodes. The per-step quantities
``e_n`` (distance to the true solution) and ``delta_n`` (one-step discrepancy
against the exact flow map) use the discrete L2 norm ``sqrt(dx * sum(v**2))``.
For a flow map with Lipschitz constant ``L`` the triangle inequality gives

    ||e_{n+1}|| <= L ||e_n|| + delta_n,

which :func:`check_bound` verifies step by step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .problems import UnsupportedProblem


class MetricError(ValueError):
    pass


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise MetricError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def rmae(pred, truth):
    pred, truth = _pair(pred, truth)
    denom = np.abs(truth).sum()
    if denom == 0.0:
        raise MetricError("relative error undefined for an all-zero truth")
    return float(np.abs(pred - truth).sum() / denom)


def rrmse(pred, truth):
    pred, truth = _pair(pred, truth)
    denom = np.square(truth).sum()
    if denom == 0.0:
        raise MetricError("relative error undefined for an all-zero truth")
    return float(math.sqrt(np.square(pred - truth).sum() / denom))


def l2_norm(values, dx):
    """Discrete L2 norm along axis 0."""
    return np.sqrt(dx * np.square(np.asarray(values, dtype=float)).sum(axis=0))


def step_errors(pred, truth, dx):
    """``||e_n||`` for every time column n = 0..M."""
    pred, truth = _pair(pred, truth)
    return l2_norm(pred - truth, dx)


def rollout_errors(pred, problem, grid):
    """``delta_n = ||u(t_{n+1}) - G(dt) u(t_n)||`` for n = 0..M-1."""
    if problem.flow is None:
        raise UnsupportedProblem(f"{problem.name} has no exact flow map; rollout errors are undefined")
    pred = np.asarray(pred, dtype=float)
    if pred.shape != grid.shape:
        raise MetricError(f"field shape {pred.shape} does not match grid {grid.shape}")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        evolved = problem.flow_oracle(pred[:, :-1], grid.dt, grid)
        delta = l2_norm(pred[:, 1:] - evolved, grid.dx)
    return np.where(np.isnan(delta), np.inf, delta)


def step_lipschitz(problem, grid, pred, truth):
    """Lipschitz constant of the flow for each step, over the states it acts on."""
    lo = np.minimum(pred[:, :-1].min(axis=0), truth[:, :-1].min(axis=0))
    hi = np.maximum(pred[:, :-1].max(axis=0), truth[:, :-1].max(axis=0))
    return np.array([problem.lipschitz(grid.dt, a, b) for a, b in zip(lo, hi)])


@dataclass
class BoundVerdict:
    passed: np.ndarray        # per n
    rhs: np.ndarray           # L ||e_n|| + delta_n + tol
    slack: np.ndarray         # rhs - ||e_{n+1}||

    @property
    def all_pass(self):
        return bool(np.all(self.passed))

    @property
    def first_failure(self):
        bad = np.flatnonzero(~self.passed)
        return int(bad[0]) if bad.size else None


def check_bound(e, delta, lipschitz, tol=0.0):
    e = np.asarray(e, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if e.shape[0] != delta.shape[0] + 1:
        raise MetricError(f"need len(e) == len(delta) + 1, got {e.shape[0]} and {delta.shape[0]}")
    lip = np.broadcast_to(np.asarray(lipschitz, dtype=float), delta.shape)
    with np.errstate(invalid="ignore"):
        # inf * 0 would be nan; an unbounded constant bounds anything
        propagated = np.where(np.isinf(lip), np.inf, lip * e[:-1])
    rhs = propagated + delta + tol
    slack = rhs - e[1:]
    return BoundVerdict(e[1:] <= rhs, rhs, slack)


def oracle_tolerance(problem, grid):
    """Oracle imprecision measured on the analytical field.

    The largest one-step discrepancy of the exact solution, plus a few ulps
    of the field scale to absorb rounding in the inequality itself.
    """
    truth = problem.analytical(grid.x[:, None], grid.t[None, :])
    scale = float(l2_norm(truth, grid.dx).max())
    return float(rollout_errors(truth, problem, grid).max()) + 64 * np.finfo(float).eps * scale


@dataclass
class MetricsReport:
    problem: str
    grid: str
    seed: Optional[int]
    rmae: float
    rrmse: float
    per_step_error: list = field(default_factory=list)
    delta: Optional[list] = None
    bound_slack: Optional[float] = None
    bound_pass: Optional[bool] = None
    max_delta: Optional[float] = None

    def summary(self):
        """The compact JSON record: problem, grid, seed, metrics and bound verdict."""
        keys = ("problem", "grid", "seed", "rmae", "rrmse", "bound_pass", "max_delta")
        return {k: asdict(self)[k] for k in keys}


def evaluate_field(problem, grid, pred, seed=None, tol=None):
    """Metrics plus, when the problem has a flow map, the bound diagnostic."""
    truth = problem.analytical(grid.x[:, None], grid.t[None, :])
    pred, truth = _pair(pred, truth)
    e = step_errors(pred, truth, grid.dx)
    report = MetricsReport(problem.name, grid.describe(), seed, rmae(pred, truth),
                           rrmse(pred, truth), e.tolist())
    if problem.flow is not None:
        delta = rollout_errors(pred, problem, grid)
        if tol is None:
            tol = oracle_tolerance(problem, grid)
        verdict = check_bound(e, delta, step_lipschitz(problem, grid, pred, truth), tol)
        report.delta = delta.tolist()
        report.bound_slack = float(verdict.slack.min())
        report.bound_pass = verdict.all_pass
        report.max_delta = float(delta.max())
    return report


def diagnose(problem, grid, pred, tol=None):
    """Per-step rows ``(n, e_n, delta_n, bound_rhs, pass)`` and the verdict."""
    truth = problem.analytical(grid.x[:, None], grid.t[None, :])
    e = step_errors(pred, truth, grid.dx)
    delta = rollout_errors(pred, problem, grid)
    if tol is None:
        tol = oracle_tolerance(problem, grid)
    verdict = check_bound(e, delta, step_lipschitz(problem, grid, np.asarray(pred), truth), tol)
    rows = [(n, float(e[n]), float(delta[n]), float(verdict.rhs[n]), bool(verdict.passed[n]))
            for n in range(delta.shape[0])]
    return rows, verdict, tol
