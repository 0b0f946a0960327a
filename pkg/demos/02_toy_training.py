# %% [markdown]
# # Toy training and the FG/OT ablation
#
# Train the two linear encoders on a small stimulus-structured dataset and
# compare the four loss configurations. Sizes are kept small so the whole
# script runs in well under a minute; the acceptance suite uses larger ones.

# %%
import numpy as np

from affectkit.embedding import make_synthetic_dataset
from affectkit.objective import TrainConfig, ablation_grid, train_toy

data = make_synthetic_dataset(64, seed=0)
cfg = TrainConfig(steps=150, lr=0.1, folds=2, seed=0)

# %%
res = train_toy(data, cfg)
for f in res.folds:
    print(f"fold {f.fold}: R@1 {f.initial_metrics['i2t_r1']:.3f} -> {f.metrics['i2t_r1']:.3f}, "
          f"top-1 {f.metrics['top1']:.3f}, region R@1 {f.metrics['region_r1']:.3f}")

# %% [markdown]
# The per-step breakdown shows each component falling. Weights enter only the total.

# %%
for step in (0, 50, 149):
    print(step, {k: round(v, 4) for k, v in res.trace[step].to_record().items()})

# %% [markdown]
# ## Ablation grid
#
# Same data, seed and step count for every cell; only the fine-grained and
# transport switches change. Region R@1 measures how well pooled regions
# retrieve their own stimulus.

# %%
rows = ablation_grid(data, cfg)
print(f"{'fg':>5} {'ot':>5} {'R@1':>7} {'top1':>7} {'region':>7}")
for r in rows:
    print(f"{r['fg']!s:>5} {r['ot']!s:>5} {r['r1_i2t']:7.3f} {r['top1']:7.3f} {r['region_r1']:7.3f}")
