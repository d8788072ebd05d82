# %% [markdown]
# # Toy storytelling end to end
#
# Build a small synthetic corpus in memory, fit the decoder for a few dozen
# epochs, then decode every story and score it.  Runs in a few seconds.

# %%
import numpy as np

from hstory import TrainConfig, bleu, cider, evaluate_teacher_forced, generate_corpus, train
from hstory.dataio import make_toy_corpus

# %%
toy = make_toy_corpus(seed=3, stories=12, vocab_size=30, topics=4, n_images=3,
                      locations=4, raw_dim=8, dim=24, max_len=8)
records = toy.records(max_len=8)
print(len(records), "stories;", records[0].features.shape, "features per story")
print("first story:", [" ".join(s) for s in toy.sentences[0]])

# %%
cfg = TrainConfig(epochs=60, batch_size=4, dropout_p=0.0, learning_rate=3e-3, seed=3,
                  L=8, N=3, D=24, M=4, D_raw=8, vocab_size=30)
result = train(records, cfg, toy.word_table, toy.sentence_table)
for row in result.log[::10] + result.log[-1:]:
    print(f"epoch {row.epoch:3d}  loss {row.mean_loss:.4f}  acc {row.token_accuracy:.3f}")

# %%
loss, acc = evaluate_teacher_forced(records, result.params)
print(f"teacher-forced loss {loss:.4f}, accuracy {acc:.3f}")

# %% [markdown]
# Greedy decoding (beam 1) and beam 3 side by side for the first story.

# %%
for beam in (1, 3):
    story = generate_corpus(records[:1], result.params, beam=beam, max_len=8)[0]
    print(f"beam {beam}: logprob {story.logprob:.3f}")
    for sent in story.sentences:
        print("   ", " ".join(sent.tokens))

# %%
stories = generate_corpus(records, result.params, beam=3, max_len=8)
cands = [sum((s.tokens for s in g.sentences), []) for g in stories]
refs = [[sum(sents, [])] for sents in toy.sentences]
print(f"BLEU {bleu(cands, refs):.2f}  CIDEr {cider(cands, refs):.3f}")
