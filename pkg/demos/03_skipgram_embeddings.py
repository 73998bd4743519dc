"""Skip-gram with negative sampling recovers planted co-occurrence.

Two topic blocks never share a sentence; after training, words are
closer to their own block than to the other one.

Run with: python demos/03_skipgram_embeddings.py
"""

import numpy as np

from notemort.embed import build_vocab, train_skipgram

rng = np.random.default_rng(0)
cardio = ["pressor", "afterload", "inotrope", "diuresis", "preload", "ejection"]
renal = ["dialysis", "creatinine", "oliguria", "filtration", "azotemia", "urea"]

sentences = []
for _ in range(300):
    pool = cardio if rng.random() < 0.5 else renal
    sentences.append([pool[i] for i in rng.integers(0, len(pool), size=8)])

vocab = build_vocab(sentences, min_count=1)
encoded = [vocab.encode_known(s) for s in sentences]
result = train_skipgram(encoded, vocab, dim=16, window=3, epochs=15, seed=1)
print("per-epoch loss:", " ".join(f"{l:.3f}" for l in result.epoch_losses[::3]))

vectors = result.embeddings.vectors


def cosine(a, b):
    u, v = vectors[vocab.token_to_id[a]], vectors[vocab.token_to_id[b]]
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


print(f"\n{'':12s} within-block   across-block")
for word in ("pressor", "dialysis"):
    own = cardio if word in cardio else renal
    other = renal if word in cardio else cardio
    within = np.mean([cosine(word, w) for w in own if w != word])
    across = np.mean([cosine(word, w) for w in other])
    print(f"{word:12s} {within:12.3f} {across:14.3f}")
