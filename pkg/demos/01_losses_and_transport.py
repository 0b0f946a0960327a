# %% [markdown]
# # Losses and transport on a tiny batch
#
# Build a four-item batch, compute the global, summary and fine-grained
# contrastive terms, then look at the Sinkhorn plan that weights the
# region-to-stimulus logits.

# %%
import numpy as np

from affectkit.contrastive import ContrastiveConfig, fine_grained_loss, global_loss, pool_regions, region_similarity, summary_loss
from affectkit.embedding import ToyEncoder, encode_dataset, make_synthetic_dataset
from affectkit.transport import brute_force_assignment, cost_from_similarity, ot_loss, sinkhorn

np.set_printoptions(precision=3, suppress=True)

data = make_synthetic_dataset(4, d_raw=32, d=16, n_clusters=2, sigma=0.05, seed=0, n_patches=6)
visual = ToyEncoder.init(data.d_raw, 16, "visual", seed=0)
text = ToyEncoder.init(data.d_raw, 16, "text", seed=0)
batch = encode_dataset(data, visual, text, tau=0.07)
print("image x text cosine grid:\n", batch.image_global.value @ batch.text_full.value.T)

# %% [markdown]
# With random encoders the diagonal is not special yet, so the InfoNCE terms
# sit near log(n) scaled by how spread the similarities are.

# %%
cfg = ContrastiveConfig(tau=0.07, pool_tau=0.2)
print("global    ", global_loss(batch).item())
print("summary   ", summary_loss(batch).item())
print("fine      ", fine_grained_loss(batch, cfg).item())

# %% [markdown]
# ## Pooling
#
# Each stimulus attends over its own image's patches. The weights for one
# stimulus form a distribution over patches.

# %%
reg = pool_regions(batch.image_patches, batch.text_stimuli, cfg)
print("item 0 attention (patch x stimulus):\n", reg.attention[0])
print("column sums:", reg.attention[0].sum(axis=0))

# %% [markdown]
# ## Transport
#
# The 12 x 12 region grid becomes a cost W = 1 - S. Sinkhorn returns a plan
# with uniform marginals; smaller epsilon pushes it toward a permutation.

# %%
S = region_similarity(reg.values, batch.text_stimuli)
cost = cost_from_similarity(S.value)
for eps in (1.0, 0.1, 0.01):
    plan = sinkhorn(cost, eps)
    print(f"eps={eps:<5} iters={plan.iterations:<5} violation={plan.violation:.1e} "
          f"<W,P>={plan.cost(cost.values):.4f} entropy={plan.entropy():.3f}")

# %% [markdown]
# On a small square cost the brute-force assignment gives the epsilon -> 0 target.

# %%
small = cost_from_similarity(S.value[:6, :6])
perm, best = brute_force_assignment(small)
print("optimal permutation", perm, "mean cost", round(best, 4))
print("Sinkhorn at eps=1e-3:", round(sinkhorn(small, 1e-3).cost(small.values), 4))

# %%
plan = sinkhorn(cost, 0.05)
print("transport term:", ot_loss(plan, S, scale=S.shape[0] / 0.07).item())
