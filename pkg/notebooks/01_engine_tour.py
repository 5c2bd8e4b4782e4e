# %% [markdown]
# # The autodiff engine
#
# Everything in archxform runs on a small tape-based reverse-mode engine
# over numpy arrays.  This script pokes at it directly.

# %%
import numpy as np

from archxform import engine as E

rng = np.random.default_rng(0)

# %% [markdown]
# Forward ops work outside a tape too; they just aren't recorded.

# %%
x = rng.standard_normal((2, 3, 6, 6))
k = np.zeros((4, 3, 3, 3))
k[:, :, 1, 1] = 1.0  # unit impulse: each output channel sums the inputs
y = E.conv2d(x, k)
print(y.shape, np.allclose(y.data[:, 0], x.sum(axis=1)))

# %% [markdown]
# Gradients: open a tape, compute a scalar, call backward.

# %%
w = E.Parameter(rng.standard_normal((4, 3, 3, 3)) * 0.3, name="w")
head = E.Parameter(rng.standard_normal((5, 4)) * 0.3, name="head")
labels = np.array([0, 3])

with E.Tape() as tape:
    logits = E.dense(E.global_avg_pool(E.relu(E.conv2d(x, w))), head)
    loss = E.softmax_cross_entropy(logits, labels)
E.backward(loss, [w, head], tape)
print("loss", float(loss.data))
print("|dL/dw|", np.linalg.norm(w.grad), "|dL/dhead|", np.linalg.norm(head.grad))

# %% [markdown]
# Central differences agree as long as no relu sits within eps of its kink.

# %%
def f():
    return E.softmax_cross_entropy(E.dense(E.global_avg_pool(E.relu(E.conv2d(x, w))), head), labels)

print("max relative error", E.finite_diff_check(f, [w, head], eps=1e-5))

# %% [markdown]
# A few steps of momentum SGD on this one batch.

# %%
opt = E.SGD([w, head], lr=0.1, momentum=0.9)
for step in range(20):
    with E.Tape() as tape:
        loss = f()
    E.backward(loss, [w, head], tape)
    opt.step()
    if step % 5 == 0:
        print(step, round(float(loss.data), 4))
