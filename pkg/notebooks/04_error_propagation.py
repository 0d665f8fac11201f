# %% [markdown]
# # How rollout errors propagate
#
# For benchmarks with an exact one-step evolution map G we can split the
# error at step n+1 into the propagated error and the fresh one-step error:
#
#     ||e_{n+1}|| <= L_G ||e_n|| + delta_n,   delta_n = ||u_{n+1} - G(u_n)||
#
# This script evaluates the pieces for random models and for a corrupted copy
# of the exact field, where the one-step error spikes at the damaged step.

# %%
import numpy as np

from piano.metrics import diagnose, oracle_tolerance, rollout_errors
from piano.model import PianoModel
from piano.problems import get_problem, sample_grid

# %% [markdown]
# ## The bound for untrained models

# %%
for name in ("heat", "convection", "reaction"):
    p = get_problem(name)
    s = sample_grid(p, 40, 40)
    pred = PianoModel.create("ssm", 16, seed=0).predict(s.grid, s.ic)
    rows, verdict, tol = diagnose(p, s.grid, pred)
    print(f"{name:<11} tol {tol:.1e}  holds at all {len(rows)} steps: {verdict.all_pass}  "
          f"min slack {verdict.slack.min():.3e}")

# %% [markdown]
# ## A corrupted column
# Damage step 15 of the exact reaction field. The one-step error is near
# machine precision everywhere except at the two steps that touch it.

# %%
p = get_problem("reaction")
s = sample_grid(p, 40, 30)
field = s.truth.copy()
field[:, 15] += 0.05
delta = rollout_errors(field, p, s.grid)
print("oracle tolerance", f"{oracle_tolerance(p, s.grid):.1e}")
for n in range(11, 18):
    print(f"delta_{n:<2} {delta[n]:.3e}")

# %% [markdown]
# ## Local Lipschitz constants
# The logistic flow contracts for states near one, expands by at most e^{5dt}
# on [0, 1], and expands faster once a prediction undershoots zero.

# %%
dt = s.grid.dt
for lo in (0.5, 0.0, -0.1, -0.5):
    print(f"lowest state {lo:>5}: L = {p.lipschitz(dt, lo, 1.0):.4f}")
