"""Attribute-augmented LSTM captioner with descriptiveness-driven attention.

Input order per sentence: the mapped attribute vector at step 1, the mapped
proposal feature at step 2, then word embeddings starting from ``<bos>``.
Word predictions start after the ``<bos>`` input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .vocab import BOS, EOS, PAD

log = logging.getLogger(__name__)

NEUTRAL_SCORE = 0.5


@dataclass
class CaptionerConfig:
    hidden: int = 1024
    max_len: int = 20
    reward_metric: str = "meteor_lite"
    passthrough_attention: bool = False


def init_params(vocab_size: int, feature_dim: int, attr_dim: int, hidden: int, rng: np.random.Generator) -> dict[str, T.DiffArray]:
    """Glorot weights, zero biases, forget-gate bias 1."""
    h = hidden
    p = {
        "sg.embed": T.glorot((vocab_size, h), vocab_size, h, rng),
        "sg.attr.w": T.glorot((attr_dim, h), attr_dim, h, rng),
        "sg.attr.b": T.zeros((h,)),
        "sg.feat.w": T.glorot((feature_dim, h), feature_dim, h, rng),
        "sg.feat.b": T.zeros((h,)),
        "sg.lstm.W_x": T.glorot((h, 4 * h), h, 4 * h, rng),
        "sg.lstm.W_h": T.glorot((h, 4 * h), h, 4 * h, rng),
        "sg.lstm.b": T.zeros((4 * h,)),
        "sg.out.w": T.glorot((h, vocab_size), h, vocab_size, rng),
        "sg.out.b": T.zeros((vocab_size,)),
    }
    p["sg.lstm.b"].data[h : 2 * h] = 1.0
    for name, arr in p.items():
        arr.name = name
    return p


def _lstm(params):
    return {"W_x": params["sg.lstm.W_x"], "W_h": params["sg.lstm.W_h"], "b": params["sg.lstm.b"]}


def _mask(vocab_size: int, dtype) -> np.ndarray:
    # pad and bos are never emitted
    m = np.zeros(vocab_size, dtype=dtype)
    m[[PAD, BOS]] = -1e9
    return m


def _prime(attributes, feature, params):
    """Run the attribute and feature steps; returns the LSTM state."""
    h_dim = params["sg.lstm.W_h"].shape[0]
    dtype = params["sg.lstm.W_h"].data.dtype
    h = T.DiffArray(np.zeros(h_dim, dtype=dtype))
    c = T.DiffArray(np.zeros(h_dim, dtype=dtype))
    lstm = _lstm(params)
    a_in = T.fully_connected(T.as_diff(np.asarray(attributes, dtype=dtype)), params["sg.attr.w"], params["sg.attr.b"])
    h, c = T.lstm_step(a_in, h, c, lstm)
    feature = feature if isinstance(feature, T.DiffArray) else T.DiffArray(np.asarray(feature, dtype=dtype))
    f_in = T.fully_connected(feature, params["sg.feat.w"], params["sg.feat.b"])
    return T.lstm_step(f_in, h, c, lstm)


def _word_logits(word: int, h, c, params):
    h, c = T.lstm_step(params["sg.embed"][word], h, c, _lstm(params))
    logits = T.fully_connected(h, params["sg.out.w"], params["sg.out.b"])
    return logits, h, c


def caption_xe_loss(attributes, feature, sentence: Sequence[int], params) -> T.DiffArray:
    """Teacher-forced cross-entropy summed over words; ``sentence`` ends with eos."""
    vocab_size = params["sg.out.b"].shape[0]
    sentence = list(sentence)
    if not sentence or sentence[-1] != EOS:
        raise ValueError("sentence must end with the eos token")
    bad = [w for w in sentence if not 0 <= w < vocab_size]
    if bad:
        raise IndexError(f"token ids {bad} outside vocabulary of size {vocab_size}")
    mask = _mask(vocab_size, params["sg.out.b"].data.dtype)
    h, c = _prime(attributes, feature, params)
    prev = BOS
    total = None
    for target in sentence:
        logits, h, c = _word_logits(prev, h, c, params)
        loss = T.softmax_xent(logits + mask, target)
        total = loss if total is None else total + loss
        prev = target
    return total


def greedy_decode(attributes, feature, params, max_len: int) -> list[int]:
    """Argmax decoding; returns word ids without the terminating eos."""
    if max_len <= 0:
        return []
    vocab_size = params["sg.out.b"].shape[0]
    mask = _mask(vocab_size, params["sg.out.b"].data.dtype)
    out: list[int] = []
    with T.no_grad():
        h, c = _prime(attributes, feature, params)
        prev = BOS
        for _ in range(max_len):
            logits, h, c = _word_logits(prev, h, c, params)
            word = int(np.argmax(logits.data + mask))
            if word == EOS:
                break
            out.append(word)
            prev = word
    return out


def sample_decode(attributes, feature, params, max_len: int, rng: np.random.Generator) -> tuple[list[int], list[T.DiffArray]]:
    """Multinomial sampling; returns word ids and the per-step log-probabilities.

    The log-probability list includes the step that emitted eos, when reached.
    """
    if max_len <= 0:
        return [], []
    vocab_size = params["sg.out.b"].shape[0]
    mask = _mask(vocab_size, params["sg.out.b"].data.dtype)
    h, c = _prime(attributes, feature, params)
    prev = BOS
    words: list[int] = []
    logps: list[T.DiffArray] = []
    for _ in range(max_len):
        logits, h, c = _word_logits(prev, h, c, params)
        logp = T.log_softmax(logits + mask)
        probs = np.exp(logp.data.astype(np.float64))
        word = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
        word = min(word, vocab_size - 1)
        logps.append(logp[word])
        if word == EOS:
            break
        words.append(word)
        prev = word
    return words, logps


def scst_loss(logps: Sequence[T.DiffArray], r_sample: float, r_greedy: float) -> T.DiffArray:
    """Self-critical surrogate whose gradient is -(r_s - r_g) * grad log p(sample)."""
    advantage = float(r_sample) - float(r_greedy)
    if not logps:
        return T.DiffArray(0.0)
    total = logps[0] if len(logps) == 1 else T.stack(logps).sum()
    return total * (-advantage)


# -- attention over clips ---------------------------------------------------
def clip_scores(t_start: np.ndarray, t_end: np.ndarray, p_des: np.ndarray, t_f: int) -> np.ndarray:
    """Mean p_des of the proposals that contain each clip center, 0.5 when none does."""
    centers = (np.arange(t_f) + 0.5) / t_f
    inside = (np.asarray(t_start)[None, :] <= centers[:, None]) & (centers[:, None] <= np.asarray(t_end)[None, :])
    counts = inside.sum(axis=1)
    sums = inside.astype(float) @ np.asarray(p_des, float)
    scores = np.full(t_f, NEUTRAL_SCORE)
    covered = counts > 0
    scores[covered] = sums[covered] / counts[covered]
    if not covered.all():
        log.debug("%d clips covered by no proposal; using neutral score", int((~covered).sum()))
    return scores


def clip_descriptiveness(predictions, clip_index: int, t_f: int) -> float:
    center = (clip_index + 0.5) / t_f
    vals = [p.p_des for p in predictions if p.segment.t_start <= center <= p.segment.t_end]
    if not vals:
        log.warning("clip %d is covered by no proposal; using neutral score", clip_index)
        return NEUTRAL_SCORE
    return float(np.mean(vals))


def attention_pool(clip_features, scores) -> T.DiffArray:
    """Weighted mean of clip features with weights proportional to ``scores``.

    ``scores`` given as a numpy array are constants; a DiffArray lets the
    gradient reach them.
    """
    feats = T.as_diff(clip_features)
    if isinstance(scores, T.DiffArray):
        total = float(scores.data.sum())
        if total <= 0:
            log.warning("attention scores sum to zero; using uniform weights")
            return feats.mean(axis=0)
        weights = scores / scores.sum()
        return (weights.reshape(-1, 1) * feats).sum(axis=0)
    scores = np.asarray(scores, dtype=float)
    if np.any(scores < 0):
        raise ValueError("attention scores must be non-negative")
    if scores.sum() <= 0:
        log.warning("attention scores sum to zero; using uniform weights")
        weights = np.full(len(scores), 1.0 / len(scores))
    else:
        weights = scores / scores.sum()
    return T.matmul(weights.astype(feats.data.dtype), feats)


def segment_clips(t_start: float, t_end: float, t_f: int) -> np.ndarray:
    """Indices of clips whose centers fall in the segment (nearest clip if none)."""
    centers = (np.arange(t_f) + 0.5) / t_f
    idx = np.flatnonzero((centers >= t_start) & (centers <= t_end))
    if len(idx) == 0:
        mid = 0.5 * (t_start + t_end)
        idx = np.array([int(np.clip(np.floor(mid * t_f), 0, t_f - 1))])
    return idx


def proposal_feature(features: np.ndarray, t_start: float, t_end: float, scores: np.ndarray | None = None) -> T.DiffArray:
    """Attention-pooled feature of a segment; uniform mean when ``scores`` is None."""
    idx = segment_clips(t_start, t_end, features.shape[0])
    w = np.ones(len(idx)) if scores is None else np.asarray(scores)[idx]
    return attention_pool(features[idx], w)
