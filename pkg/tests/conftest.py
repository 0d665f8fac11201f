import hashlib
import json
import os
from pathlib import Path

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from piano import numerics as nx  # noqa: E402

SRC = Path(__file__).resolve().parents[1] / "src" / "piano"


def numeric_grad(fn, tensors, step=1e-6):
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``tensors``."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = float(fn().data)
            flat[i] = keep - step
            down = float(fn().data)
            flat[i] = keep
            g.reshape(-1)[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


def tape_grads(fn, tensors):
    with nx.Tape() as tape:
        loss = fn()
    grads = nx.backward(tape, loss, tensors)
    return [grads[t] for t in tensors]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------------------------------
# Desk-scale training runs shared by the slow tests.
#
# Runs are memoised for the session. Setting PIANO_TRAIN_CACHE to a directory
# also keeps results on disk, keyed by the run settings and a hash of the
# package sources, so editing the code invalidates them.
# ----------------------------------------------------------------------------

def _source_hash():
    h = hashlib.sha256()
    for path in sorted(SRC.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class DeskRuns:
    def __init__(self, cache_dir=None):
        self._memo = {}
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.source = _source_hash()

    def get(self, problem="reaction", backbone="ssm", fd_order=2, k=64, n=50,
            iterations=20_000, seed=0):
        from piano.ablation import ExperimentSpec, run_cell_seed_full

        key = (problem, backbone, fd_order, k, n, iterations, seed)
        if key in self._memo:
            return self._memo[key]
        path = None
        if self.cache_dir is not None:
            name = "-".join(map(str, key)) + f"-{self.source}.json"
            path = self.cache_dir / name
            if path.exists():
                self._memo[key] = json.loads(path.read_text())
                return self._memo[key]
        spec = ExperimentSpec(problem, backbone, fd_order, k, n, n, iterations, (seed,))
        record = run_cell_seed_full(spec, seed)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(record))
        self._memo[key] = record
        return record


@pytest.fixture(scope="session")
def desk_runs():
    return DeskRuns(os.environ.get("PIANO_TRAIN_CACHE"))


# ----------------------------------------------------------------------------
# Acceptance verdict lines, repeated in the terminal summary so they show up
# without ``-s``.
# ----------------------------------------------------------------------------

_VERDICTS = []


class AcceptanceLog:
    def record(self, number, title, passed, detail):
        line = f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _VERDICTS.append((number, line))
        print(line)
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _number, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
