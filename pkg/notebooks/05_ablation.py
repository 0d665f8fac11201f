# %% [markdown]
# # Backbone and stencil ablation
#
# The harness trains every cell of a matrix over several seeds and reports
# mean and sample standard deviation of rMAE and rRMSE. The full desk-scale
# matrix (50x50, k=64, 20k iterations, three seeds, five cells) takes a couple
# of hours on one core; this script runs a miniature version so the mechanics
# are visible. Orderings at this budget are only indicative.

# %%
import tempfile

from piano.ablation import ExperimentSpec, ordering_check, run_matrix

cells = [ExperimentSpec("reaction", b, fd, 16, 24, 24, 400, (0, 1), lr=1e-3)
         for b, fd in (("nonar", 2), ("mlp", 2), ("gru", 2), ("ssm", 2), ("ssm", 1))]
out = tempfile.mkdtemp(prefix="ablation-")
results = run_matrix(cells, output_dir=out)
print("results written to", out)

# %%
for cell in results:
    row = cell.row()
    print(f"{row['backbone']:<6} fd{row['fd_order']}  rRMSE {row['rrmse_mean']:.4f} "
          f"+/- {row['rrmse_std']:.4f}  diverged {row['diverged_count']}")

# %%
for check in ordering_check(results):
    print(f"{check.name:<14} margin {check.margin:+.4f}  {'ok' if check.passed else 'not met'}")
