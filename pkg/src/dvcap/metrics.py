"""Caption metrics (BLEU, METEOR-lite, CIDEr-D), dense-captioning mAP and AR-AN.

Sentences may be given as raw strings or token lists.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from .anchors import tiou_matrix
from .vocab import tokenize

DENSE_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
AR_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
_TIOU_EPS = 1e-9  # tIoU is a float ratio; thresholds are compared inclusively


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU --------------------------------------------------------------------
def bleu(candidate, references, n: int = 4) -> float:
    """Sentence BLEU@n with clipped precisions and brevity penalty, no smoothing."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    if not references:
        raise ValueError("at least one reference is required")
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not cand:
        return 0.0
    log_p = 0.0
    for m in range(1, n + 1):
        counts = ngrams(cand, m)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in ngrams(r, m).items():
                max_ref[g] = max(max_ref[g], c)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total)
    c = len(cand)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / n)


# -- METEOR-lite ---------------------------------------------------------------
def align(cand: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) of the exact-unigram alignment with most matches, then fewest chunks."""
    cand, ref = tuple(cand), tuple(ref)
    positions = [tuple(j for j, w in enumerate(ref) if w == c) for c in cand]

    @lru_cache(maxsize=None)
    def best(i: int, prev: int, used: int) -> tuple[int, int]:
        if i == len(cand):
            return (0, 0)
        m, ch = best(i + 1, -1, used)
        result = (m, ch)
        for j in positions[i]:
            if used >> j & 1:
                continue
            m2, ch2 = best(i + 1, j, used | (1 << j))
            ch2 += 0 if prev >= 0 and j == prev + 1 else 1
            if (m2 + 1, -ch2) > (result[0], -result[1]):
                result = (m2 + 1, ch2)
        return result

    return best(0, -1, 0)


def meteor_lite(candidate, references) -> float:
    if not references:
        raise ValueError("at least one reference is required")
    cand = tokenize(candidate)
    best_score = 0.0
    for ref in references:
        ref = tokenize(ref)
        if not cand or not ref:
            continue
        m, chunks = align(cand, ref)
        if m == 0:
            continue
        p, r = m / len(cand), m / len(ref)
        f = 10 * p * r / (r + 9 * p)
        penalty = 0.5 * (chunks / m) ** 3
        best_score = max(best_score, f * (1 - penalty))
    return best_score


# -- CIDEr-D -----------------------------------------------------------------
class CiderD:
    """CIDEr-D with document frequencies from a reference corpus.

    ``corpus`` maps a key (one captioned segment) to its reference sentences.
    """

    def __init__(self, corpus: Mapping[object, Sequence], n: int = 4, sigma: float = 6.0):
        self.n = n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in corpus.values():
            seen = set()
            for r in refs:
                toks = tokenize(r)
                for k in range(1, n + 1):
                    seen.update(ngrams(toks, k))
            self.df.update(seen)
        self.log_n = math.log(float(max(len(corpus), 1)))

    def _vec(self, tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: c * (self.log_n - math.log(max(1.0, self.df[g]))) for g, c in ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def score(self, candidate, references) -> float:
        cand = tokenize(candidate)
        vc, nc = self._vec(cand)
        total = 0.0
        for ref in references:
            ref = tokenize(ref)
            vr, nr = self._vec(ref)
            delta = len(cand) - len(ref)
            sims = []
            for k in range(self.n):
                val = sum(min(x, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, x in vc[k].items())
                if nc[k] != 0 and nr[k] != 0:
                    val /= nc[k] * nr[k]
                else:
                    val = 0.0
                sims.append(val * math.exp(-(delta**2) / (2 * self.sigma**2)))
            total += float(np.mean(sims))
        return 10.0 * total / len(references)


def cider_d(candidates: Mapping[object, object], references: Mapping[object, Sequence]) -> tuple[float, dict]:
    """Corpus CIDEr-D: (mean score, per-key scores)."""
    scorer = CiderD(references)
    per_key = {k: scorer.score(candidates[k], references[k]) for k in references if k in candidates}
    mean = float(np.mean(list(per_key.values()))) if per_key else 0.0
    return mean, per_key


def caption_metric(name: str, corpus: Mapping[object, Sequence] | None = None) -> Callable[[object, Sequence], float]:
    """A ``(candidate, references) -> float`` scorer by name."""
    if name == "meteor_lite":
        return meteor_lite
    if name.startswith("bleu"):
        order = int(name[4:] or 4)
        return lambda c, r: bleu(c, r, order)
    if name == "cider_d":
        return CiderD(corpus or {}).score
    raise ValueError(f"unknown caption metric {name!r}")


# -- dense captioning -----------------------------------------------------
@dataclass
class DenseCaption:
    t_start: float
    t_end: float
    sentence: str
    confidence: float = 1.0


def _rank(preds: Sequence[DenseCaption], top_k: int) -> list[DenseCaption]:
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    return [preds[i] for i in order[:top_k]]


def dense_caption_map(
    predicted: Mapping[str, Sequence[DenseCaption]],
    ground_truth: Mapping[str, Sequence[DenseCaption]],
    metric: Callable[[object, Sequence], float],
    thresholds: Sequence[float] = DENSE_THRESHOLDS,
    top_k: int = 1000,
) -> float:
    """Caption score gated by tIoU, averaged over predictions, videos and thresholds.

    A prediction is scored against the pooled sentences of every ground-truth
    segment whose tIoU with it reaches the threshold, and scores 0 otherwise.
    """
    if not any(predicted.get(v) for v in ground_truth):
        return 0.0
    per_threshold = []
    for tau in thresholds:
        video_scores = []
        for vid, gts in ground_truth.items():
            preds = _rank(predicted.get(vid, []), top_k)
            if not preds or not gts:
                video_scores.append(0.0)
                continue
            overlaps = tiou_matrix(
                [p.t_start for p in preds], [p.t_end for p in preds], [g.t_start for g in gts], [g.t_end for g in gts]
            )
            scores = []
            for i, p in enumerate(preds):
                refs = [gts[j].sentence for j in np.flatnonzero(overlaps[i] >= tau - _TIOU_EPS)]
                scores.append(metric(p.sentence, refs) if refs else 0.0)
            video_scores.append(float(np.mean(scores)))
        per_threshold.append(float(np.mean(video_scores)))
    return float(np.mean(per_threshold))


# -- AR-AN -------------------------------------------------------------------
@dataclass
class ArAnCurve:
    an: np.ndarray
    ar: np.ndarray
    auc: float

    def to_csv(self) -> str:
        lines = ["an,ar"] + [f"{int(a)},{r:.6f}" for a, r in zip(self.an, self.ar)]
        lines.append(f"# auc={self.auc:.6f}")
        return "\n".join(lines) + "\n"


def recall_at(predicted, ground_truth, an: int, thresholds: Sequence[float] = AR_THRESHOLDS) -> np.ndarray:
    """Recall per threshold when keeping the top ``an`` proposals of every video."""
    hits = np.zeros(len(thresholds))
    total = 0
    for vid, gts in ground_truth.items():
        total += len(gts)
        preds = list(predicted.get(vid, []))[:an]
        if not preds or not gts:
            continue
        overlaps = tiou_matrix([p[0] for p in preds], [p[1] for p in preds], [g[0] for g in gts], [g[1] for g in gts])
        best = overlaps.max(axis=0)
        for k, tau in enumerate(thresholds):
            hits[k] += int(np.sum(best >= tau - _TIOU_EPS))
    if total == 0:
        raise ValueError("AR-AN needs at least one ground-truth segment")
    return hits / total


def ar_an_curve(
    predicted: Mapping[str, Sequence[tuple[float, float]]],
    ground_truth: Mapping[str, Sequence[tuple[float, float]]],
    an_grid: Sequence[int] = range(1, 101),
) -> ArAnCurve:
    """Average recall over tIoU 0.5:0.05:0.95 against proposals kept per video.

    ``predicted`` lists (t_start, t_end) per video, already ranked.  AUC is the
    trapezoidal area normalized by the AN range.
    """
    if sum(len(g) for g in ground_truth.values()) == 0:
        raise ValueError("AR-AN needs at least one ground-truth segment")
    an = np.asarray(list(an_grid), dtype=int)
    if len(an) == 0 or np.any(np.diff(an) <= 0) or an[0] < 1:
        raise ValueError("AN grid must be strictly increasing positive integers")
    ar = np.array([recall_at(predicted, ground_truth, int(a)).mean() for a in an])
    if len(an) == 1:
        auc = float(ar[0])
    else:
        auc = float(np.trapezoid(ar, an) / (an[-1] - an[0]))
    return ArAnCurve(an, ar, auc)
