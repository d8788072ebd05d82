# %% [markdown]
# # Attention weights and embedding neighbours
#
# Attention is a softmax over image locations, so the weights are positive
# and sum to one.  The context vector stays inside the box spanned by the
# locations.

# %%
import numpy as np

from hstory.attention import AttentionParams, attend
from hstory.dataio import make_toy_corpus
from hstory.metrics import nearest_neighbors

rng = np.random.default_rng(0)
params = AttentionParams.init(rng, dim=6, attn_dim=3)
h = rng.normal(size=6)
locations = rng.normal(size=(5, 6))

alpha, z = attend(h, locations, params)
print("alpha", np.round(alpha.data, 4), "sum", alpha.data.sum())
print("inside hull:", bool(np.all(z.data >= locations.min(0)) and np.all(z.data <= locations.max(0))))

# %%
# shuffling the locations shuffles alpha and leaves z unchanged, bit for bit
perm = rng.permutation(5)
alpha_p, z_p = attend(h, locations[perm], params)
print(np.array_equal(alpha_p.data, alpha.data[perm]), np.array_equal(z_p.data, z.data))

# %% [markdown]
# Toy word vectors cluster by topic, so the nearest neighbours of a word
# are mostly words of the same topic.

# %%
toy = make_toy_corpus(seed=1, stories=4, vocab_size=30, topics=4)
query = toy.word_table.tokens[5]
for token, score in nearest_neighbors(query, toy.word_table, k=5, exclude_query=True):
    print(f"{token:>10s}  {score:.3f}")
