# %% [markdown]
# # Structured captions, quality filtering and metrics

# %%
import numpy as np

from affectkit.captions import EMOTIONS, filter_bottom_quantile, parse_caption, split_views, validate_taxonomy
from affectkit.evalkit import kfold_splits, recall_at_k, top_k_accuracy

text = ('An old man sits alone on a park bench. Rain streaks the window behind him. '
        'A faded photo rests on his knee. His umbrella lies closed at his side. '
        'Overall, the scene evokes sadness.')
rec = parse_caption(text, image_id="img001", context="facial")
print(rec.emotion, "|", rec.stimuli[1])
full, summary = split_views(rec)
print("summary view:", summary)

# %%
print(validate_taxonomy(EMOTIONS))
print(validate_taxonomy([e for e in EMOTIONS if e != "grief"]).missing)

# %% [markdown]
# The filter drops floor(q * n) lowest-scoring items and keeps input order.

# %%
scores = [(f"img{k:03d}", s) for k, s in enumerate([0.9, 0.1, 0.5, 0.3, 0.8, 0.7, 0.2])]
print(filter_bottom_quantile(scores, 0.2))

# %%
S = np.array([[0.9, 0.1, 0.3], [0.2, 0.4, 0.5], [0.1, 0.6, 0.7]])
print("R@1", recall_at_k(S, 1), "R@2", recall_at_k(S, 2))
print("top-1", top_k_accuracy(S, [0, 2, 2], 1))
print([te.tolist() for _, te in kfold_splits(11, 5, seed=0)])
