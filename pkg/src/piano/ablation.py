"""Experiment matrix: train and evaluate cells over seeds, aggregate, compare.

A cell is one (problem, backbone, FD order, k, grid, iterations) setting run
for several seeds. Diverged seeds are reported and left out of the means.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import io
from .metrics import rmae, rrmse
from .model import BACKBONES, DivergenceError, PianoModel
from .problems import PROBLEMS, eval_grid, get_problem
from .training import TrainConfig, train

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("problem", "backbone", "fd_order", "k", "Nx", "M", "seed_count",
                  "rmae_mean", "rmae_std", "rrmse_mean", "rrmse_std", "diverged_count")

DESK_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentSpec:
    problem: str = "reaction"
    backbone: str = "ssm"
    fd_order: int = 2
    k: int = 64
    nx: int = 50
    m: int = 50
    iterations: int = 20_000
    seeds: tuple = DESK_SEEDS
    lr: float = 3e-4
    residual_first_step: int = 0
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.fd_order not in (1, 2):
            raise ValueError("fd_order must be 1 or 2")
        if self.k < 1 or self.iterations < 0 or not self.seeds:
            raise ValueError("need k >= 1, iterations >= 0 and at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def key(self):
        return (self.problem, self.backbone, self.fd_order, self.k, self.nx, self.m)

    def train_config(self, seed):
        return TrainConfig(iterations=self.iterations, lr=self.lr, fd_order=self.fd_order, seed=seed,
                           residual_first_step=self.residual_first_step)


@dataclass
class RunRecord:
    seed: int
    rmae: float = math.nan
    rrmse: float = math.nan
    best_loss: float = math.nan
    seconds: float = 0.0
    diverged: bool = False
    message: str = ""


@dataclass
class CellResult:
    spec: ExperimentSpec
    runs: list = field(default_factory=list)

    def _finite(self, attr):
        return np.array([getattr(r, attr) for r in self.runs if not r.diverged])

    @staticmethod
    def _stats(values):
        if values.size == 0:
            return math.nan, math.nan
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        return float(values.mean()), std

    @property
    def rmae_stats(self):
        return self._stats(self._finite("rmae"))

    @property
    def rrmse_stats(self):
        return self._stats(self._finite("rrmse"))

    @property
    def diverged_count(self):
        return sum(r.diverged for r in self.runs)

    def row(self):
        s = self.spec
        rm, rs = self.rmae_stats
        qm, qs = self.rrmse_stats
        return {"problem": s.problem, "backbone": s.backbone, "fd_order": s.fd_order,
                "k": s.k, "Nx": s.nx, "M": s.m, "seed_count": len(self.runs) - self.diverged_count,
                "rmae_mean": rm, "rmae_std": rs, "rrmse_mean": qm, "rrmse_std": qs,
                "diverged_count": self.diverged_count}


def run_cell_seed_full(spec, seed):
    """Train one seed of a cell and score it on the staggered evaluation grid.

    Returns a JSON-serialisable record with the metrics, the loss history and
    the best parameters (``None`` entries when the run diverged).
    """
    problem = get_problem(spec.problem)
    grid = problem.make_grid(spec.nx, spec.m)
    model = PianoModel.create(spec.backbone, spec.k, seed=seed)
    record = {"seed": seed, "diverged": False, "message": "", "rmae": math.nan,
              "rrmse": math.nan, "best_loss": math.nan, "seconds": 0.0,
              "history": None, "manifest": None}
    try:
        result = train(problem, grid, model, spec.train_config(seed))
        egrid = eval_grid(problem, grid)
        pred = model.predict(egrid, problem.ic(egrid.x))
    except DivergenceError as exc:
        log.warning("cell %s seed %d diverged: %s", spec.key, seed, exc)
        record.update(diverged=True, message=str(exc))
        return record
    truth = problem.analytical(egrid.x[:, None], egrid.t[None, :])
    record.update(rmae=rmae(pred, truth), rrmse=rrmse(pred, truth),
                  best_loss=result.best_loss, seconds=result.seconds,
                  history=[list(row) for row in result.history],
                  manifest=model.to_manifest())
    return record


def run_cell_seed(spec, seed):
    full = run_cell_seed_full(spec, seed)
    return RunRecord(seed, full["rmae"], full["rrmse"], full["best_loss"], full["seconds"],
                     full["diverged"], full["message"])


def run_matrix(specs, runner: Callable = run_cell_seed, output_dir=None):
    """Run every cell for every seed; write ``results.csv``/``results.json`` if asked."""
    specs = list(specs)
    if not specs:
        raise ValueError("empty experiment matrix")
    results = []
    for spec in specs:
        cell = CellResult(spec)
        for seed in spec.seeds:
            cell.runs.append(runner(spec, seed))
        results.append(cell)
    if output_dir is not None:
        write_results(results, output_dir)
    return results


def write_results(results, output_dir):
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_csv(out / "results.csv", RESULT_COLUMNS,
                 [[c.row()[col] for col in RESULT_COLUMNS] for c in results])
    payload = [{"spec": asdict(c.spec), "summary": c.row(),
                "runs": [asdict(r) for r in c.runs]} for c in results]
    io.write_json(out / "results.json", payload)


@dataclass
class OrderingVerdict:
    name: str
    larger: tuple
    smaller: tuple
    margin: float         # larger - smaller (or larger - factor * smaller)
    passed: bool
    strict: bool = True


def _lookup(results, **match):
    hits = [c for c in results
            if all(getattr(c.spec, k) == v for k, v in match.items())]
    if not hits:
        raise KeyError(f"no result cell matches {match}")
    if len(hits) > 1:
        raise KeyError(f"several result cells match {match}")
    mean = hits[0].rrmse_stats[0]
    if not math.isfinite(mean):
        raise KeyError(f"cell {match} has no finished runs")
    return mean


def compare(results, name, larger, smaller, strict=True, factor=1.0):
    """Check ``mean(larger) > factor * mean(smaller)`` (``>=`` when not strict)."""
    a = _lookup(results, **dict(larger))
    b = _lookup(results, **dict(smaller))
    margin = a - factor * b
    ok = margin > 0 if strict else margin >= 0
    return OrderingVerdict(name, tuple(larger), tuple(smaller), float(margin), bool(ok), strict)


def ordering_check(results, problem="reaction", include_fd=True, nonar_factor=10.0):
    """Expected backbone and FD-order orderings of mean rRMSE.

    Missing cells raise ``KeyError``. Ties fail the strict comparisons.
    """
    def cell(backbone, fd=2):
        return (("problem", problem), ("backbone", backbone), ("fd_order", fd))

    checks = [
        compare(results, "nonar>mlp", cell("nonar"), cell("mlp")),
        compare(results, "mlp>gru", cell("mlp"), cell("gru")),
        compare(results, "gru>=ssm", cell("gru"), cell("ssm"), strict=False),
        compare(results, f"nonar>{nonar_factor:g}*ssm", cell("nonar"), cell("ssm"),
                factor=nonar_factor),
    ]
    if include_fd:
        checks.append(compare(results, "fd1>fd2", cell("ssm", 1), cell("ssm", 2)))
    return checks


def desk_matrix(problem="reaction", iterations=20_000, seeds=DESK_SEEDS, k=64, n=50):
    """Backbone ablation plus the first-order FD cell at desk scale."""
    specs = [ExperimentSpec(problem, b, 2, k, n, n, iterations, tuple(seeds))
             for b in ("nonar", "mlp", "gru", "ssm")]
    specs.append(ExperimentSpec(problem, "ssm", 1, k, n, n, iterations, tuple(seeds)))
    return specs


def load_results(path):
    """Rebuild cell results from a ``results.json`` written by :func:`write_results`."""
    payload = json.loads(Path(path).read_text())
    cells = []
    for entry in payload:
        spec = ExperimentSpec(**entry["spec"])
        cells.append(CellResult(spec, [RunRecord(**r) for r in entry["runs"]]))
    return cells
