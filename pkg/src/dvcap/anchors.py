"""Temporal anchors: default boxes, offset decoding, tIoU and label assignment.

All times are normalized to [0, 1] per video.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (1.0, 1.25, 1.5)


@dataclass(frozen=True)
class Anchor:
    center: float
    width: float
    layer: int
    cell: int
    ratio: float


@dataclass(frozen=True)
class TemporalSegment:
    t_start: float
    t_end: float

    @property
    def center(self) -> float:
        return 0.5 * (self.t_start + self.t_end)

    @property
    def width(self) -> float:
        return self.t_end - self.t_start


@dataclass
class LabelAssignment:
    positive: np.ndarray  # bool, one per proposal
    matched: np.ndarray  # int, matched GT index (-1 when there is no ground truth)
    matched_tiou: np.ndarray  # float

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def build_anchor_grid(length: int, ratios: Sequence[float] = DEFAULT_RATIOS, layer: int = 0) -> list[Anchor]:
    """Anchors of one feature map, cell-major then ratio order."""
    if length < 1:
        raise ValueError(f"feature map length must be >= 1, got {length}")
    if len(ratios) == 0:
        raise ValueError("ratio set must be non-empty")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {list(ratios)}")
    return [
        Anchor(center=(t + 0.5) / length, width=r / length, layer=layer, cell=t, ratio=float(r))
        for t in range(length)
        for r in ratios
    ]


def anchor_arrays(lengths: Sequence[int], ratios: Sequence[float] = DEFAULT_RATIOS) -> tuple[np.ndarray, np.ndarray, list[Anchor]]:
    """Concatenated (centers, widths, anchors) over several feature maps."""
    anchors: list[Anchor] = []
    for j, n in enumerate(lengths):
        anchors.extend(build_anchor_grid(n, ratios, layer=j))
    centers = np.array([a.center for a in anchors])
    widths = np.array([a.width for a in anchors])
    return centers, widths, anchors


def count_anchors(lengths: Sequence[int], num_ratios: int) -> int:
    return int(sum(lengths)) * num_ratios


def decode(anchor: Anchor, dc: float, dw: float, alpha1: float = 0.1, alpha2: float = 0.1) -> tuple[float, float, TemporalSegment]:
    """Refine an anchor by (dc, dw); the returned segment is clamped to [0, 1]."""
    if alpha1 <= 0 or alpha2 <= 0:
        raise ValueError("alpha1 and alpha2 must be positive")
    phi_c = anchor.center + alpha1 * anchor.width * dc
    phi_w = anchor.width * float(np.exp(alpha2 * dw))
    start = min(max(phi_c - 0.5 * phi_w, 0.0), 1.0)
    end = min(max(phi_c + 0.5 * phi_w, 0.0), 1.0)
    return phi_c, phi_w, TemporalSegment(start, end)


def encode(anchor: Anchor, phi_c: float, phi_w: float, alpha1: float = 0.1, alpha2: float = 0.1) -> tuple[float, float]:
    """Inverse of :func:`decode` for unclamped refinements."""
    return (phi_c - anchor.center) / (alpha1 * anchor.width), float(np.log(phi_w / anchor.width)) / alpha2


def decode_diff(centers: np.ndarray, widths: np.ndarray, dc: T.DiffArray, dw: T.DiffArray, alpha1: float, alpha2: float):
    """Differentiable batch decode.

    Returns ``(phi_c, phi_w, t_start, t_end)`` where the boundaries are
    clamped to [0, 1].
    """
    phi_c = dc * (alpha1 * widths) + centers
    phi_w = T.exp(dw * alpha2) * widths
    half = phi_w * 0.5
    t_start = T.clip(phi_c - half, 0.0, 1.0)
    t_end = T.clip(phi_c + half, 0.0, 1.0)
    return phi_c, phi_w, t_start, t_end


def tiou(a: TemporalSegment, b: TemporalSegment) -> float:
    inter = max(0.0, min(a.t_end, b.t_end) - max(a.t_start, b.t_start))
    union = max(a.t_end, b.t_end) - min(a.t_start, b.t_start)
    if union <= 0:
        return 0.0
    return inter / union


def tiou_matrix(starts: np.ndarray, ends: np.ndarray, gt_starts: np.ndarray, gt_ends: np.ndarray) -> np.ndarray:
    """Pairwise tIoU, shape (num proposals, num ground truth)."""
    s, e = np.asarray(starts, float)[:, None], np.asarray(ends, float)[:, None]
    gs, ge = np.asarray(gt_starts, float)[None, :], np.asarray(gt_ends, float)[None, :]
    inter = np.clip(np.minimum(e, ge) - np.maximum(s, gs), 0.0, None)
    union = np.maximum(e, ge) - np.minimum(s, gs)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def assign_labels(
    proposals: Sequence[TemporalSegment],
    ground_truth: Sequence[TemporalSegment],
    threshold: float = 0.7,
) -> LabelAssignment:
    starts = np.array([p.t_start for p in proposals], float)
    ends = np.array([p.t_end for p in proposals], float)
    gs = np.array([g.t_start for g in ground_truth], float)
    ge = np.array([g.t_end for g in ground_truth], float)
    return assign_labels_arrays(starts, ends, gs, ge, threshold)


def assign_labels_arrays(starts, ends, gt_starts, gt_ends, threshold: float = 0.7) -> LabelAssignment:
    """Positive iff the best tIoU against any ground truth exceeds ``threshold``.

    Several proposals may match the same ground truth; ties go to the lowest
    ground-truth index.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    n = len(starts)
    if len(gt_starts) == 0:
        log.warning("no ground truth segments; every proposal is negative")
        return LabelAssignment(np.zeros(n, bool), np.full(n, -1), np.zeros(n))
    overlaps = tiou_matrix(starts, ends, gt_starts, gt_ends)
    matched = overlaps.argmax(axis=1)  # argmax returns the first maximum
    best = overlaps[np.arange(n), matched]
    positive = best > threshold
    covered = set(matched[positive].tolist())
    missed = [g for g in range(len(gt_starts)) if g not in covered]
    if missed:
        log.debug("ground truth %s matched by no proposal above %.2f", missed, threshold)
    return LabelAssignment(positive, matched, best)
