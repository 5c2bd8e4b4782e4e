# %% [markdown]
# # Transforming a small network
#
# Every edge of a cell graph becomes a mixed edge
# `c_none * 0 + c_id * x + c_same * o(x)`.  After a short joint stage the
# argmax of each theta row decides whether the edge keeps its op, turns into
# a skip, or disappears.

# %%
import numpy as np

from archxform.data import SyntheticSpec, gen_synthetic
from archxform.graph import NetConfig, build_network, count_cost, to_dot, validate
from archxform.mixed import init_arch_params
from archxform.model import forward, init_weights
from archxform.trainer import TrainConfig, run_two_stage

net = build_network("resnet-mini", NetConfig(channels=8, num_classes=10, input_shape=(3, 16, 16)))
for ci, cell in enumerate(net.cells):
    print(ci, cell.name, [(e.src, e.dst, e.op.kind.value, e.op.stride) for e in cell.edges])
print(count_cost(net), validate(net).ok)

# %% [markdown]
# With theta at (0, 0, 1) and the raw parameterization the mixed network is
# the original network, bit for bit.

# %%
rng = np.random.default_rng(1)
weights = init_weights(net, rng)
arch = init_arch_params(net, tying="cell", mode="raw")
x = rng.standard_normal((8, 3, 16, 16))
print(forward(net, weights, x, arch).data.tobytes() == forward(net, weights, x).data.tobytes())
print(arch.keys)

# %% [markdown]
# Cell tying gives one row per template edge, full tying one per edge.

# %%
print(init_arch_params(net, tying="cell").shape, init_arch_params(net, tying="full").shape)

# %% [markdown]
# Now a real run on the synthetic grating task.  A larger theta step than
# the library default lets theta move within two short epochs.

# %%
data = gen_synthetic(SyntheticSpec(train_per_class=60, test_per_class=20))
cfg = TrainConfig(total_epochs=4, arch_epochs=2, transform_mode="full", lr_theta=0.05, seed=3)
model = run_two_stage(cfg, data, net)
print("test accuracy", model.test_accuracy)
print(model.decisions.counts())
for eid, row in model.arch.edge_table().items():
    print(eid, np.round(row[:3], 3), "->", model.decisions[eid])

# %%
print(count_cost(model.original), "->", count_cost(model.network))
print(to_dot(model.original, model.network)[:600])
