# %% [markdown]
# # Multi-seed reports
#
# Each (method, seed) pair trains from its own seed-derived random streams.
# The report mirrors the usual "average plus per-seed" table layout.

# %%
import tempfile

from archxform.config import parse_config
from archxform.harness import aggregate, emit_report, run_experiment

cfg = parse_config("""
model = resnet-mini
channels = 4
classes = 4
image_size = 8
train_per_class = 30
test_per_class = 10
noise = 0.5
total_epochs = 4
batch_size = 16
lr_theta = 0.05
seeds = 1, 2, 3
""")
print(cfg.hash())

# %%
report = run_experiment(cfg)
for r in report.runs:
    print(r.method, r.seed, round(r.accuracy_pct, 2), r.params, r.flops, r.changed_edges, r.status)

# %%
out = tempfile.mkdtemp()
emit_report(report, "markdown", out)
print(open(f"{out}/report.md").read())

# %% [markdown]
# Sample standard deviation (n - 1), two decimals for display.

# %%
a = aggregate([91.74, 91.74, 91.65, 91.76, 91.39])
print(a.display(), a.n)
