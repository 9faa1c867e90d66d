"""
Caption and proposal metrics by hand
====================================
"""

from dvcap import metrics

# clipping stops a repeated word from being counted twice
print("BLEU-1 'a a a' vs 'a b':", metrics.bleu("a a a", ["a b"], 1))

# METEOR-lite penalises fragmented alignments
print("METEOR self match:", round(metrics.meteor_lite("a man runs", ["a man runs"]), 5))
print("METEOR swapped:", metrics.meteor_lite("b a", ["a b"]))

# CIDEr-D needs document frequencies, so it is built on a corpus
corpus = {"k1": ["a man runs fast"], "k2": ["the dog sleeps quietly"]}
score, per_key = metrics.cider_d({"k1": "a man runs fast", "k2": "the dog sleeps quietly"}, corpus)
print("CIDEr-D on a two-key corpus:", score)

# average recall over tIoU 0.5..0.95
gt = {"v": [(0.0, 0.1), (0.2, 0.3)]}
pred = {"v": [(0.0, 0.1), (0.2, 0.25)]}
print("AR at 2 proposals:", metrics.recall_at(pred, gt, 2).mean())

curve = metrics.ar_an_curve(pred, gt, range(1, 6))
print(curve.to_csv())
