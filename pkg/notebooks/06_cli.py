# %% [markdown]
# # The command-line workflow
#
# train -> eval -> diagnose, each writing CSV and JSON files ready for any
# plotting tool. Settings can come from a key = value file; flags override it.

# %%
import json
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp(prefix="piano-cli-"))
(work / "heat.cfg").write_text("problem = heat\nnx = 24\nsteps = 24\nk = 16\niters = 600\nlr = 0.001\n")


def piano(*args):
    proc = subprocess.run([sys.executable, "-m", "piano", *map(str, args)],
                          capture_output=True, text=True)
    print("$ piano", " ".join(map(str, args)), "->", proc.returncode)
    if proc.stderr:
        print(proc.stderr.strip())
    return proc.returncode


# %%
piano("train", "--config", work / "heat.cfg", "--out", work / "run")
print(sorted(p.name for p in (work / "run").iterdir()))
print(sorted(p.name for p in (work / "run" / "snapshots").iterdir()))

# %%
piano("eval", "--checkpoint", work / "run" / "checkpoint.json", "--profile-x", 10,
      "--out", work / "eval")
print(json.loads((work / "eval" / "metrics.json").read_text()))

# %%
piano("diagnose", "--checkpoint", work / "run" / "checkpoint.json", "--out", work / "diag")
print(json.loads((work / "diag" / "diagnose_summary.json").read_text()))

# %% [markdown]
# Errors map to exit codes: 1 for usage problems (including an unsupported
# benchmark for diagnose), 2 for a diverged run, 3 for I/O failures.

# %%
piano("train", "--problem", "burgers", "--nx", 10, "--steps", 10, "--out", work / "bad")
