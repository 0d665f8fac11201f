# %% [markdown]
# # Training on the heat equation
#
# Physics-informed experience learning: the model rolls out a full trajectory
# from the initial condition, the finite-difference residual of that trajectory
# is the loss, and AdamW with a cosine schedule updates the weights. No
# solution data is used. A reduced budget keeps this script around a minute;
# the acceptance suite runs the full 50x50, 20k-iteration version.

# %%
import numpy as np

from piano.metrics import rmae, rrmse
from piano.model import PianoModel
from piano.problems import eval_grid, get_problem, sample_grid
from piano.training import TrainConfig, train

heat = get_problem("heat")
s = sample_grid(heat, 30, 30)
model = PianoModel.create("ssm", 32, seed=0)
config = TrainConfig(iterations=1500, lr=1e-3, seed=0, snapshot_fractions=(0.05, 0.25, 1.0))
result = train(heat, s.grid, model, config)
print(f"{config.iterations} iterations in {result.seconds:.1f}s, best loss {result.best_loss:.3e}")

# %% [markdown]
# ## Loss history
# Columns: iteration, lr, total, interior energy, boundary energy.

# %%
history = np.array(result.history)
for row in history[:: len(history) // 6]:
    print("  ".join(f"{v:.3e}" if i else f"{int(v):>5}" for i, v in enumerate(row)))

# %% [markdown]
# ## Accuracy on the staggered evaluation grid
# Evaluation nodes sit half a spacing away from the training nodes.

# %%
eg = eval_grid(heat, s.grid)
pred = model.predict(eg, heat.ic(eg.x))
truth = heat.analytical(eg.x[:, None], eg.t[None, :])
print(f"rMAE {rmae(pred, truth):.4f}  rRMSE {rrmse(pred, truth):.4f}")

# %% [markdown]
# ## Snapshots through training
# rRMSE of the stored intermediate rollouts on the training grid.

# %%
for it, field in sorted(result.snapshots.items()):
    print(f"iteration {it:>5}: rRMSE {rrmse(field, s.truth):.4f}")
