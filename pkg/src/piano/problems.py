"""The four time-dependent benchmarks: wave, reaction, convection and heat.

Every problem carries its initial condition, boundary treatment, residual
operator on a predicted field ``u[x_index, t_index]``, closed-form solution,
and (except for the wave equation) an exact one-step flow map together with
its Lipschitz constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import fft

from .numerics import Tensor, as_tensor, getitem, square
from .stencils import StencilSpec, diff_space, diff_time, second_derivative


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid with ``nx`` spatial nodes and ``m`` time steps.

    Dirichlet grids include both spatial endpoints; periodic grids drop the
    right endpoint, which is identified with the left one. ``offset=0.5``
    shifts the spatial nodes by half a spacing (used for evaluation grids).
    """

    x_min: float
    x_max: float
    t_min: float
    t_max: float
    nx: int
    m: int
    periodic: bool = False
    offset: float = 0.0

    def __post_init__(self):
        if self.nx < 4 or self.m < 4:
            raise GridError(f"grid needs nx >= 4 and m >= 4, got nx={self.nx}, m={self.m}")
        if not (self.x_max > self.x_min and self.t_max > self.t_min):
            raise GridError("grid bounds must be increasing")
        if self.offset not in (0.0, 0.5):
            raise GridError("offset must be 0 or 0.5")

    @property
    def dx(self):
        length = self.x_max - self.x_min
        if self.periodic or self.offset:
            return length / self.nx
        return length / (self.nx - 1)

    @property
    def dt(self):
        return (self.t_max - self.t_min) / self.m

    @property
    def x(self):
        return self.x_min + (np.arange(self.nx) + self.offset) * self.dx

    @property
    def t(self):
        return self.t_min + np.arange(self.m + 1) * self.dt

    @property
    def shape(self):
        return (self.nx, self.m + 1)

    @property
    def has_boundary_nodes(self):
        return not self.periodic and self.offset == 0.0

    def describe(self):
        return f"{self.nx}x{self.m + 1}"


@dataclass(frozen=True)
class PdeProblem:
    name: str
    x_min: float
    x_max: float
    t_min: float
    t_max: float
    periodic: bool
    ic: Callable[[np.ndarray], np.ndarray]
    analytical: Callable[[np.ndarray, np.ndarray], np.ndarray]
    interior_operator: Callable
    boundary_values: tuple = (0.0, 0.0)
    flow: Optional[Callable] = None
    lipschitz_fn: Optional[Callable] = None
    velocity_ic: bool = False

    def stencil(self, accuracy=2):
        return StencilSpec(accuracy, "periodic" if self.periodic else "one-sided")

    def residual(self, field, grid, spec=None, first_step=1):
        """PDE residual on the interior: time columns first_step..M, interior x nodes.

        Periodic problems have no spatial boundary, so every x node is
        interior. Returns a Tensor when given a Tensor, an array otherwise.
        """
        if first_step not in (0, 1):
            raise ValueError("first_step must be 0 or 1")
        spec = spec or self.stencil()
        if spec.periodic and not self.periodic:
            raise ValueError("periodic stencils need a periodic problem")
        _check_field(field, grid)
        raw = not isinstance(field, Tensor)
        r = self.interior_operator(as_tensor(field), grid, spec)
        rows = slice(None) if self.periodic else slice(1, grid.nx - 1)
        out = getitem(r, (rows, slice(first_step, None)))
        return out.data if raw else out

    def bc_residual(self, field, grid):
        """Deviation from the Dirichlet values at both ends, columns 1..M.

        ``None`` for periodic problems, where the boundary condition holds by
        construction of the grid.
        """
        if self.periodic:
            return None
        _check_field(field, grid)
        raw = not isinstance(field, Tensor)
        target = np.array(self.boundary_values, dtype=float)[:, None]
        edge = getitem(as_tensor(field), ([0, grid.nx - 1], slice(1, None)))
        out = edge - target
        return out.data if raw else out

    def velocity_residual(self, field, grid):
        """One-sided second-order du/dt at t_0 (wave problem only)."""
        if not self.velocity_ic:
            return None
        _check_field(field, grid)
        raw = not isinstance(field, Tensor)
        f = as_tensor(field)
        c = np.zeros(grid.m + 1)
        c[:3] = (-1.5, 2.0, -0.5)
        c /= grid.dt
        out = f @ Tensor(c[:, None])
        return out.data if raw else out

    def flow_oracle(self, state, dt, grid=None):
        """Exact evolution of a grid state over ``dt``; ``None`` if unavailable."""
        if self.flow is None:
            raise UnsupportedProblem(f"{self.name} has no one-step flow oracle")
        return self.flow(np.asarray(state, dtype=float), dt, grid)

    def lipschitz(self, dt, lo=None, hi=None):
        """Lipschitz constant of the flow map over ``dt``.

        ``lo``/``hi`` bound the states it acts on; only the nonlinear reaction
        flow depends on them.
        """
        if self.lipschitz_fn is None:
            raise UnsupportedProblem(f"{self.name} has no flow map")
        return self.lipschitz_fn(dt, lo, hi)

    def make_grid(self, nx, m, offset=0.0):
        return Grid(self.x_min, self.x_max, self.t_min, self.t_max, int(nx), int(m),
                    self.periodic, offset)


class UnsupportedProblem(ValueError):
    pass


def _check_field(field, grid):
    if tuple(field.shape) != grid.shape:
        raise GridError(f"field shape {tuple(field.shape)} does not match grid {grid.shape}")


# ----------------------------------------------------------------------------
# Wave
# ----------------------------------------------------------------------------

WAVE_SPEED = 2.0


def _wave_ic(x):
    return np.sin(np.pi * x) + 0.5 * np.sin(3 * np.pi * x)


def _wave_exact(x, t):
    return (np.sin(np.pi * x) * np.cos(2 * np.pi * t)
            + 0.5 * np.sin(3 * np.pi * x) * np.cos(6 * np.pi * t))


def _wave_operator(u, grid, spec):
    u_tt = second_derivative(u, grid.dt, 1, spec)
    u_xx = second_derivative(u, grid.dx, 0, spec)
    return u_tt - WAVE_SPEED ** 2 * u_xx


def make_wave():
    return PdeProblem("wave", 0.0, 1.0, 0.0, 1.0, False, _wave_ic, _wave_exact,
                      _wave_operator, velocity_ic=True)


# ----------------------------------------------------------------------------
# Reaction
# ----------------------------------------------------------------------------

REACTION_RATE = 5.0


def _reaction_ic(x):
    return np.exp(-((x - np.pi) ** 2) / (2 * (np.pi / 4) ** 2))


def _logistic(h, t):
    # h g / (1 + h (g - 1)); exact at t = 0 where g - 1 vanishes
    gm1 = np.expm1(REACTION_RATE * t)
    return h * (1.0 + gm1) / (1.0 + h * gm1)


def _reaction_exact(x, t):
    return _logistic(_reaction_ic(x), t)


def _reaction_operator(u, grid, spec):
    # u_t - rho*u*(1-u) == u_t - rho*u + rho*u^2
    u_t = diff_time(u, grid.dt, spec)
    return u_t - REACTION_RATE * u + REACTION_RATE * square(u)


def _reaction_flow(state, dt, grid):
    return _logistic(state, dt)


def _reaction_lipschitz(dt, lo=None, hi=None):
    """sup |d/dh logistic(h, dt)| over h in [lo, hi] (default [0, 1]).

    The derivative g / (1 + h (g - 1))^2 decreases in h wherever it is
    finite, so the supremum sits at ``lo``; it is infinite once the interval
    reaches the pole of the flow map.
    """
    lo = 0.0 if lo is None else float(lo)
    g = np.exp(REACTION_RATE * dt)
    denom = 1.0 + lo * (g - 1.0)
    if denom <= 0.0:
        return np.inf
    return float(g / denom ** 2)


def make_reaction():
    return PdeProblem("reaction", 0.0, 2 * np.pi, 0.0, 1.0, True, _reaction_ic,
                      _reaction_exact, _reaction_operator, flow=_reaction_flow,
                      lipschitz_fn=_reaction_lipschitz)


# ----------------------------------------------------------------------------
# Convection
# ----------------------------------------------------------------------------

CONVECTION_SPEED = 50.0


def _convection_ic(x):
    return np.sin(x)


def _convection_exact(x, t):
    return np.sin(x - CONVECTION_SPEED * t)


def _convection_operator(u, grid, spec):
    return diff_time(u, grid.dt, spec) + CONVECTION_SPEED * diff_space(u, grid.dx, spec)


def periodic_shift(state, shift, period):
    """Translate periodic samples by ``shift`` through their trigonometric interpolant."""
    n = state.shape[0]
    k = np.arange(n // 2 + 1)
    coeffs = fft.rfft(state, axis=0)
    phase = np.exp(-2j * np.pi * k * shift / period)
    # irfft discards the imaginary part of the Nyquist bin, i.e. keeps cos(k*shift)
    return fft.irfft(coeffs * phase.reshape((-1,) + (1,) * (state.ndim - 1)), n=n, axis=0)


def _convection_flow(state, dt, grid):
    return periodic_shift(state, CONVECTION_SPEED * dt, 2 * np.pi)


def _unit_lipschitz(dt, lo=None, hi=None):
    return 1.0


def make_convection():
    return PdeProblem("convection", 0.0, 2 * np.pi, 0.0, 1.0, True, _convection_ic,
                      _convection_exact, _convection_operator, flow=_convection_flow,
                      lipschitz_fn=_unit_lipschitz)


# ----------------------------------------------------------------------------
# Heat
# ----------------------------------------------------------------------------

DIFFUSIVITY = 0.1


def _heat_ic(x):
    return np.sin(np.pi * x)


def _heat_exact(x, t):
    return np.sin(np.pi * x) * np.exp(-DIFFUSIVITY * np.pi ** 2 * t)


def _heat_operator(u, grid, spec):
    return diff_time(u, grid.dt, spec) - DIFFUSIVITY * second_derivative(u, grid.dx, 0, spec)


def _heat_flow(state, dt, grid):
    """Sine-series evolution of the interior nodes; boundary nodes set to zero.

    Needs the full Dirichlet grid (both endpoints present).
    """
    if grid is not None and not grid.has_boundary_nodes:
        raise UnsupportedProblem("the heat flow map needs a grid that includes both boundary nodes")
    n = state.shape[0]
    interior = state[1:-1]
    modes = np.arange(1, n - 1)
    decay = np.exp(-DIFFUSIVITY * (modes * np.pi) ** 2 * dt)
    coeffs = fft.dst(interior, type=1, axis=0)
    evolved = fft.idst(coeffs * decay.reshape((-1,) + (1,) * (state.ndim - 1)),
                       type=1, axis=0)
    out = np.zeros_like(state)
    out[1:-1] = evolved
    return out


def _heat_lipschitz(dt, lo=None, hi=None):
    return float(np.exp(-DIFFUSIVITY * np.pi ** 2 * dt))


def make_heat():
    return PdeProblem("heat", 0.0, 1.0, 0.0, 1.0, False, _heat_ic, _heat_exact,
                      _heat_operator, flow=_heat_flow, lipschitz_fn=_heat_lipschitz)


PROBLEMS = {
    "wave": make_wave,
    "reaction": make_reaction,
    "convection": make_convection,
    "heat": make_heat,
}


def get_problem(name):
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


@dataclass(frozen=True)
class Sample:
    grid: Grid
    ic: np.ndarray
    truth: np.ndarray


def sample_grid(problem, nx, m, offset=0.0):
    """Grid, initial-condition vector and analytical field for ``problem``."""
    grid = problem.make_grid(nx, m, offset)
    x, t = grid.x, grid.t
    return Sample(grid, problem.ic(x), problem.analytical(x[:, None], t[None, :]))


def eval_grid(problem, train_grid):
    """Spatially staggered evaluation grid sharing the training time steps.

    Nodes sit halfway between training nodes, so a Dirichlet grid of ``nx``
    nodes yields ``nx - 1`` evaluation nodes and a periodic one ``nx``.
    """
    nx = train_grid.nx if problem.periodic else train_grid.nx - 1
    return problem.make_grid(nx, train_grid.m, offset=0.5)
