"""Command-line interface: ``piano train | eval | diagnose | ablate``.

Every flag can also be given in a config file (``--config FILE``) as a
``key = value`` line, where ``key`` is the flag name without the leading
dashes and with ``-`` replaced by ``_``. Blank lines and ``#`` comments are
ignored; flags on the command line override file values and unknown keys are
rejected.

Exit codes: 0 success, 1 usage error, 2 divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .ablation import ExperimentSpec, ordering_check, run_matrix
from .metrics import diagnose, evaluate_field
from .model import BACKBONES, DivergenceError, PianoModel
from .problems import PROBLEMS, UnsupportedProblem, eval_grid, get_problem
from .training import HISTORY_COLUMNS, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("piano")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _str_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


# (flag, type, default, help); choices are checked by the consumers
_COMMON = [
    ("problem", str, None, f"benchmark: one of {', '.join(PROBLEMS)}"),
    ("nx", int, None, "spatial nodes of the training grid"),
    ("steps", int, None, "time steps M of the training grid"),
    ("out", str, None, "output directory"),
    ("dense", bool, False, "write grids as dense Nx x (M+1) matrices instead of x_index,t_index,value rows"),
]

_OPTIONS = {
    "train": _COMMON + [
        ("backbone", str, "ssm", f"transition backbone: one of {', '.join(BACKBONES)}"),
        ("k", int, 64, "state dimension"),
        ("iters", int, 20_000, "training iterations"),
        ("seed", int, 0, "seed for initialisation and mini-batch sampling"),
        ("lr", float, 3e-4, "peak learning rate"),
        ("lr_min", float, 0.0, "final learning rate of the cosine schedule"),
        ("weight_decay", float, 1e-4, "decoupled AdamW weight decay"),
        ("clip_norm", float, 1.0, "global gradient-norm clip"),
        ("lambda_interior", float, 1.0, "weight of the interior residual"),
        ("lambda_boundary", float, 1.0, "weight of the boundary residual"),
        ("fd_order", int, 2, "accuracy order of first-derivative stencils (1 or 2)"),
        ("residual_first_step", int, 0,
         "first time column of the interior residual: 0 adds a forward-stencil t0 column, 1 starts at t1"),
        ("batch", int, None, "spatial mini-batch size (reaction only)"),
        ("snapshots", _float_list, [5.0, 25.0, 50.0, 100.0], "snapshot points in percent of iterations"),
    ],
    "eval": _COMMON + [
        ("checkpoint", str, None, "checkpoint written by train"),
        ("grid", str, "eval", "'eval' (staggered evaluation grid) or 'train'"),
        ("seed", int, None, "seed recorded in the metrics file"),
        ("profile_x", int, None, "also write the temporal profile at this x index"),
    ],
    "diagnose": _COMMON + [
        ("checkpoint", str, None, "checkpoint written by train"),
        ("tol", float, None, "bound tolerance (default: measured oracle residual)"),
    ],
    "ablate": [
        ("problem", str, "reaction", "benchmark"),
        ("backbones", _str_list, ["nonar", "mlp", "gru", "ssm"], "comma-separated backbones"),
        ("fd_orders", _int_list, [2], "comma-separated FD orders"),
        ("ks", _int_list, [64], "comma-separated state dimensions"),
        ("grids", _int_list, [50], "comma-separated grid sizes G (Nx = M = G)"),
        ("iters", int, 20_000, "training iterations per run"),
        ("seeds", _int_list, [0, 1, 2], "comma-separated seeds"),
        ("lr", float, 3e-4, "peak learning rate"),
        ("residual_first_step", int, 0, "first time column of the interior residual (0 or 1)"),
        ("out", str, None, "output directory"),
        ("check_order", bool, False, "run the backbone/FD ordering check on the results"),
    ],
}

_REQUIRED = {
    "train": ("problem", "nx", "steps", "out"),
    "eval": ("checkpoint", "out"),
    "diagnose": ("checkpoint", "out"),
    "ablate": ("out",),
}


def build_parser():
    parser = _Parser(prog="piano", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, options in _OPTIONS.items():
        p = sub.add_parser(name, help=f"{name} subcommand")
        p.add_argument("--config", help="key = value file supplying any of the flags below")
        for key, kind, default, text in options:
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None,
                               help=f"{text} (config: {key} = true|false)")
            else:
                shown = default if not isinstance(default, list) else ",".join(map(str, default))
                p.add_argument(flag, dest=key, default=None,
                               help=f"{text} (default: {shown})")
    return parser


def _convert(command, key, raw):
    for name, kind, _default, _text in _OPTIONS[command]:
        if name != key:
            continue
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise UsageError(f"{key}: expected true or false, got {raw!r}")
        try:
            return kind(raw)
        except (TypeError, ValueError):
            raise UsageError(f"{key}: cannot parse {raw!r}") from None
    raise UsageError(f"unknown option {key!r} for {command}")


def read_config(path, command):
    """Parse a ``key = value`` file into raw strings, rejecting unknown keys."""
    known = {name for name, *_ in _OPTIONS[command]}
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve(command, args):
    """Merge defaults, config file and flags into a validated settings dict."""
    settings = {name: default for name, _k, default, _t in _OPTIONS[command]}
    if args.config:
        for key, raw in read_config(args.config, command).items():
            settings[key] = _convert(command, key, raw)
    for name, *_ in _OPTIONS[command]:
        raw = getattr(args, name, None)
        if raw is not None:
            settings[name] = _convert(command, name, raw)
    missing = [k for k in _REQUIRED[command] if settings.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    if settings.get("problem") is not None and settings["problem"] not in PROBLEMS:
        raise UsageError(f"unknown problem {settings['problem']!r}; choose from {', '.join(PROBLEMS)}")
    return settings


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

def _train_config(s):
    fractions = tuple(p / 100.0 for p in s["snapshots"])
    if any(not 0 < f <= 1 for f in fractions):
        raise UsageError("snapshots must be percentages in (0, 100]")
    if s["backbone"] not in BACKBONES:
        raise UsageError(f"unknown backbone {s['backbone']!r}; choose from {', '.join(BACKBONES)}")
    try:
        return TrainConfig(iterations=s["iters"], lr=s["lr"], lr_min=s["lr_min"],
                           weight_decay=s["weight_decay"], clip_norm=s["clip_norm"],
                           lambda_interior=s["lambda_interior"],
                           lambda_boundary=s["lambda_boundary"], fd_order=s["fd_order"],
                           seed=s["seed"], batch=s["batch"], snapshot_fractions=fractions,
                           residual_first_step=s["residual_first_step"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _make_grid(problem, nx, steps):
    try:
        return problem.make_grid(nx, steps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(s):
    problem = get_problem(s["problem"])
    config = _train_config(s)
    grid = _make_grid(problem, s["nx"], s["steps"])
    if config.batch is not None and config.batch < grid.nx and problem.name != "reaction":
        raise UsageError("--batch is only supported for the reaction problem")
    if s["k"] < 1:
        raise UsageError("k must be positive")
    out = Path(s["out"])
    model = PianoModel.create(s["backbone"], s["k"], seed=config.seed)
    result = train(problem, grid, model, config)
    io.write_csv(out / "loss.csv", HISTORY_COLUMNS, result.history)
    model.meta = {"problem": problem.name, "nx": grid.nx, "steps": grid.m,
                  "seed": config.seed, "fd_order": config.fd_order,
                  "residual_first_step": config.residual_first_step}
    model.save(out / "checkpoint.json")
    by_iteration = {}
    for frac in config.snapshot_fractions:
        it = max(0, int(round(frac * config.iterations)) - 1)
        by_iteration.setdefault(min(it, max(config.iterations - 1, 0)), []).append(frac)
    for it, fracs in sorted(by_iteration.items()):
        if it in result.snapshots:
            for frac in fracs:
                io.write_grid_csv(out / "snapshots" / f"snapshot_{frac * 100:g}pct.csv",
                                  result.snapshots[it], s["dense"])
    io.write_json(out / "train_summary.json", {
        "problem": problem.name, "grid": grid.describe(), "backbone": model.backbone,
        "k": model.k, "iterations": config.iterations, "seed": config.seed,
        "best_loss": result.best_loss if result.best_iteration >= 0 else None,
        "best_iteration": result.best_iteration, "seconds": result.seconds,
        "parameters": model.n_parameters(),
    })
    log.info("trained %s/%s in %.1fs, best loss %.3e", problem.name, model.backbone,
             result.seconds, result.best_loss)
    return EXIT_OK


def load_model(path):
    return PianoModel.load(path)


def _checkpoint_grid(s, model):
    meta = getattr(model, "meta", None) or {}
    name = s.get("problem") or meta.get("problem")
    if name is None:
        raise UsageError("--problem is required when the checkpoint does not record it")
    problem = get_problem(name)
    nx = s.get("nx") or meta.get("nx")
    steps = s.get("steps") or meta.get("steps")
    if nx is None or steps is None:
        raise UsageError("--nx and --steps are required when the checkpoint does not record them")
    return problem, _make_grid(problem, nx, steps), meta


def cmd_eval(s):
    model = load_model(s["checkpoint"])
    problem, grid, meta = _checkpoint_grid(s, model)
    if s["grid"] not in ("eval", "train"):
        raise UsageError("--grid must be 'eval' or 'train'")
    if s["grid"] == "eval":
        grid = eval_grid(problem, grid)
    pred = np.asarray(model.predict(grid, problem.ic(grid.x)))
    if pred.shape != grid.shape:
        raise UsageError(f"model produced a field of shape {pred.shape}, grid expects {grid.shape}")
    truth = problem.analytical(grid.x[:, None], grid.t[None, :])
    seed = s["seed"] if s["seed"] is not None else meta.get("seed")
    tol_grid_ok = problem.flow is not None and (problem.periodic or grid.has_boundary_nodes)
    report = evaluate_field(problem, grid, pred, seed=seed) if tol_grid_ok else None
    if report is None:
        from .metrics import MetricsReport, rmae, rrmse, step_errors
        report = MetricsReport(problem.name, grid.describe(), seed, rmae(pred, truth),
                               rrmse(pred, truth), step_errors(pred, truth, grid.dx).tolist())
    out = Path(s["out"])
    io.write_json(out / "metrics.json", report.summary())
    io.write_json(out / "metrics_full.json", report.__dict__)
    io.write_grid_csv(out / "pred.csv", pred, s["dense"])
    io.write_grid_csv(out / "truth.csv", truth, s["dense"])
    io.write_grid_csv(out / "abs_error.csv", np.abs(pred - truth), s["dense"])
    if s["profile_x"] is not None:
        i = s["profile_x"]
        if not 0 <= i < grid.nx:
            raise UsageError(f"--profile-x must lie in [0, {grid.nx - 1}]")
        io.write_csv(out / "profile.csv", ("t_index", "t", "pred", "truth"),
                     [(j, grid.t[j], pred[i, j], truth[i, j]) for j in range(grid.m + 1)])
    log.info("%s rMAE %.4g rRMSE %.4g", problem.name, report.rmae, report.rrmse)
    return EXIT_OK


def cmd_diagnose(s):
    model = load_model(s["checkpoint"])
    problem, grid, _meta = _checkpoint_grid(s, model)
    if problem.flow is None:
        raise UnsupportedProblem(
            f"diagnose needs an exact flow map; {problem.name} has none "
            "(supported: " + ", ".join(n for n in PROBLEMS if get_problem(n).flow) + ")")
    pred = np.asarray(model.predict(grid, problem.ic(grid.x)))
    rows, verdict, tol = diagnose(problem, grid, pred, s["tol"])
    out = Path(s["out"])
    io.write_csv(out / "diagnose.csv", ("n", "e_n", "delta_n", "bound_rhs", "pass"),
                 [(n, e, d, r, int(p)) for n, e, d, r, p in rows])
    io.write_json(out / "diagnose_summary.json", {
        "problem": problem.name, "grid": grid.describe(), "tol": tol,
        "bound_pass": verdict.all_pass, "first_failure": verdict.first_failure,
        "min_slack": float(verdict.slack.min()), "max_delta": max(r[2] for r in rows),
    })
    log.info("bound %s (tol %.3g)", "holds" if verdict.all_pass else "VIOLATED", tol)
    return EXIT_OK


def cmd_ablate(s):
    bad = [b for b in s["backbones"] if b not in BACKBONES]
    if bad:
        raise UsageError(f"unknown backbone(s): {', '.join(bad)}")
    specs = []
    try:
        for g in s["grids"]:
            for k in s["ks"]:
                for b in s["backbones"]:
                    for fd in s["fd_orders"]:
                        specs.append(ExperimentSpec(
                            s["problem"], b, fd, k, g, g, s["iters"], tuple(s["seeds"]),
                            lr=s["lr"], residual_first_step=s["residual_first_step"],
                            output_dir=s["out"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not specs:
        raise UsageError("empty experiment matrix")
    results = run_matrix(specs, output_dir=s["out"])
    if s["check_order"]:
        try:
            checks = ordering_check(results, s["problem"], include_fd=1 in s["fd_orders"])
        except KeyError as exc:
            raise UsageError(f"ordering check needs the full backbone matrix: {exc}") from None
        io.write_json(Path(s["out"]) / "ordering.json", [c.__dict__ for c in checks])
        for c in checks:
            log.info("%-16s margin %+.4g %s", c.name, c.margin, "ok" if c.passed else "FAIL")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("choose a subcommand: " + " | ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        settings = resolve(args.command, args)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnsupportedProblem as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        # malformed checkpoints and similar input problems
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
