"""Physics-informed experience learning.

Each iteration rolls the model out from the exact initial condition over the
whole time horizon, scores the generated field by its finite-difference PDE
and boundary residuals, backpropagates through the entire rollout, clips the
global gradient norm and takes an AdamW step on a cosine learning-rate
schedule. No solution data is used.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics as nx
from .model import DivergenceError

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "lr", "total", "E_interior", "E_boundary")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20_000
    lr: float = 3e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_interior: float = 1.0
    lambda_boundary: float = 1.0
    fd_order: int = 2
    residual_first_step: int = 0     # 0: PDE residual also at t_0; 1: only t_1..t_M
    seed: int = 0
    batch: Optional[int] = None
    snapshot_every: int = 0
    snapshot_fractions: tuple = ()
    log_every: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ValueError("need 0 <= lr_min <= lr and lr > 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.weight_decay < 0 or self.lambda_interior < 0 or self.lambda_boundary < 0:
            raise ValueError("weights must be non-negative")
        if self.fd_order not in (1, 2):
            raise ValueError("fd_order must be 1 or 2")
        if self.residual_first_step not in (0, 1):
            raise ValueError("residual_first_step must be 0 or 1")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch must be positive")

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class LossBreakdown:
    total: float
    interior: float
    boundary: float
    velocity: Optional[float] = None


# ----------------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------------

def residual_energy(field, problem, grid, spec=None, first_step=1):
    """Per-node residual energies averaged over time steps first_step..M.

    Returns ``(interior, boundary)`` where ``interior[i]`` is the mean squared
    PDE residual at interior node ``i`` and ``boundary`` holds one energy per
    Dirichlet boundary node (``None`` for periodic problems).
    """
    r = problem.residual(field, grid, spec, first_step)
    interior = nx.mean(nx.square(r), axis=1) if isinstance(r, nx.Tensor) else (r ** 2).mean(axis=1)
    b = problem.bc_residual(field, grid)
    if b is None:
        return interior, None
    boundary = nx.mean(nx.square(b), axis=1) if isinstance(b, nx.Tensor) else (b ** 2).mean(axis=1)
    return interior, boundary


def piano_loss(field, problem, grid, spec=None, lambda_interior=1.0, lambda_boundary=1.0,
               first_step=1):
    """Weighted residual loss of a predicted field, plus its breakdown."""
    field = nx.as_tensor(field)
    interior, boundary = residual_energy(field, problem, grid, spec, first_step)
    e_int = nx.mean(interior)
    total = lambda_interior * e_int
    e_bnd = None
    if boundary is not None:
        e_bnd = nx.mean(boundary)
        total = total + lambda_boundary * e_bnd
    e_vel = None
    v = problem.velocity_residual(field, grid)
    if v is not None:
        e_vel = nx.mean(nx.square(v))
        total = total + lambda_interior * e_vel
    parts = LossBreakdown(
        float(total.data),
        float(e_int.data),
        0.0 if e_bnd is None else float(e_bnd.data),
        None if e_vel is None else float(e_vel.data),
    )
    return total, parts


# ----------------------------------------------------------------------------
# Optimiser pieces
# ----------------------------------------------------------------------------

def cosine_lr(iteration, total, lr0, lr_min=0.0):
    if total <= 0:
        return lr0
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * iteration / total))


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, arrays):
        return cls(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])

    def to_dict(self):
        return {"step": self.step, "m": [a.tolist() for a in self.m],
                "v": [a.tolist() for a in self.v]}


def adamw_step(params, grads, state, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place AdamW update of the arrays in ``params``.

    Weight decay is decoupled: parameters shrink by ``lr * weight_decay``
    before the bias-corrected Adam step.
    """
    if len(state.m) != len(params):
        raise ValueError("optimiser state does not match parameters")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise nx.ShapeError("moment shape mismatch")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


# ----------------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object                  # parameters with the lowest training loss
    final_state: dict
    history: list                  # rows matching HISTORY_COLUMNS
    best_loss: float
    best_iteration: int
    snapshots: dict                # iteration -> predicted field
    optimizer: AdamWState
    seconds: float = 0.0


def snapshot_iterations(config):
    its = set()
    if config.snapshot_every:
        its.update(range(0, config.iterations, config.snapshot_every))
    for frac in config.snapshot_fractions:
        its.add(min(config.iterations - 1, max(0, int(round(frac * config.iterations)) - 1)))
    return its


def train(problem, grid, model, config=TrainConfig(), ic=None, callback=None):
    """Fit ``model`` to ``problem`` on ``grid``; returns a :class:`TrainResult`.

    ``model`` is updated in place and ends holding the best parameters seen.
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    ic = problem.ic(grid.x) if ic is None else np.asarray(ic, dtype=float)
    spec = problem.stencil(config.fd_order)
    params = model.parameters()
    arrays = [p.data for p in params]
    opt = AdamWState.zeros_like(arrays)
    rng = np.random.default_rng(config.seed)
    batch = config.batch
    if batch is not None and batch < grid.nx:
        if problem.name != "reaction":
            raise ValueError("spatial mini-batches need a problem without spatial derivatives")
    else:
        batch = None

    snaps_at = snapshot_iterations(config)
    history, snapshots = [], {}
    best_loss, best_it, best_state = math.inf, -1, model.get_state()
    last_finite = None
    start = time.perf_counter()

    for it in range(config.iterations):
        lr = cosine_lr(it, config.iterations, config.lr, config.lr_min)
        if batch is None:
            sub_grid, x_sub, ic_sub = grid, None, ic
        else:
            idx = np.sort(rng.choice(grid.nx, size=batch, replace=False))
            x_sub, ic_sub = grid.x[idx], ic[idx]
            sub_grid = replace(grid, nx=batch)
        with nx.Tape() as tape:
            try:
                result = model.rollout(sub_grid, ic_sub, x=x_sub)
            except DivergenceError as exc:
                raise DivergenceError(f"rollout diverged at iteration {it}: {exc}",
                                      step=exc.step, iteration=it, last_loss=last_finite) from exc
            loss, parts = piano_loss(result.field, problem, sub_grid, spec,
                                     config.lambda_interior, config.lambda_boundary,
                                     config.residual_first_step)
        if not math.isfinite(parts.total):
            raise DivergenceError(f"non-finite loss at iteration {it}", iteration=it,
                                  last_loss=last_finite)
        last_finite = parts.total
        history.append((it, lr, parts.total, parts.interior, parts.boundary))
        if it in snaps_at:
            snapshots[it] = result.field.data.copy()
        if parts.total < best_loss:
            best_loss, best_it = parts.total, it
            best_state = model.get_state()

        grads = nx.backward(tape, loss, params)
        g = [grads[p] for p in params]
        clip_grad_norm(g, config.clip_norm)
        adamw_step(arrays, g, opt, lr, config.weight_decay,
                   config.beta1, config.beta2, config.adam_eps)
        del tape, result, loss, grads, g

        if config.log_every and it % config.log_every == 0:
            log.info("iter %d lr %.3e loss %.4e", it, lr, parts.total)
        if callback is not None:
            callback(it, parts)

    final_state = model.get_state()
    if best_it >= 0:
        model.set_state(best_state)
    return TrainResult(model, final_state, history, best_loss, best_it, snapshots, opt,
                       time.perf_counter() - start)
