# %% [markdown]
# # How good is the argmax pick?
#
# The tiny template has four edges, so all 81 discrete architectures can be
# trained from the same starting weights and ranked.

# %%
from archxform.data import SyntheticSpec, gen_synthetic
from archxform.graph import NetConfig, build_network
from archxform.harness import enumerate_discrete
from archxform.trainer import TrainConfig, run_two_stage

data = gen_synthetic(SyntheticSpec(classes=10, train_per_class=40, test_per_class=20, image_size=8, noise=0.6))
net = build_network("tiny", NetConfig(channels=4, num_classes=10, input_shape=(3, 8, 8)))
cfg = TrainConfig(total_epochs=8, batch_size=32, seed=2, lr_theta=0.05)
model = run_two_stage(cfg, data, net)
print(model.decisions.choices)

# %%
result = enumerate_discrete(net, data, 2, cfg, selected=model.decisions)
for cand, acc in result.ranking[:10]:
    print(result.rank_of(cand), cand, round(acc, 2))
print("selected rank", result.selected_rank, "of", result.n_candidates, "top half:", result.in_top_half())
