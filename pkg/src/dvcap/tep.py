"""Single-shot temporal event proposal network and its multi-task loss."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .anchors import Anchor, LabelAssignment, TemporalSegment, anchor_arrays, assign_labels_arrays, decode_diff

log = logging.getLogger(__name__)

EVENT, BACKGROUND = 0, 1
HEAD_WIDTH = 5  # event logit, background logit, dc, dw, descriptiveness logit


@dataclass
class TepConfig:
    t_f: int = 1024
    d0: int = 500
    base_filters: tuple[int, int] = (512, 1024)
    anchor_layers: int = 9
    anchor_filters: int = 512
    kernel: int = 3
    ratios: tuple[float, ...] = (1.0, 1.25, 1.5)
    alpha1: float = 0.1
    alpha2: float = 0.1
    alpha: float = 0.5
    beta: float = 10.0
    lambda0: float = 0.2
    pos_threshold: float = 0.7
    tcr_units: str = "normalized"  # or "clips": regress boundaries in clip units
    match_on: str = "decoded"  # or "default": match on undecoded anchors
    select_threshold: float = 0.0
    select_topk: int = 1000
    hard_negative_ratio: float = 3.0  # 0 disables mining
    hard_negative_cap: int = 128

    def validate(self) -> None:
        if self.anchor_layers < 1:
            raise ValueError("at least one anchor layer is required")
        need = 2 ** (self.anchor_layers + 1)
        if self.t_f < need:
            raise ValueError(f"t_f={self.t_f} too short for {self.anchor_layers} anchor layers (needs >= {need})")
        if not self.ratios:
            raise ValueError("ratio set must be non-empty")
        for name in ("alpha", "beta", "lambda0", "hard_negative_ratio"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("alpha1 and alpha2 must be positive")
        if self.tcr_units not in ("normalized", "clips"):
            raise ValueError(f"tcr_units must be 'normalized' or 'clips', got {self.tcr_units!r}")
        if self.match_on not in ("decoded", "default"):
            raise ValueError(f"match_on must be 'decoded' or 'default', got {self.match_on!r}")

    def feature_lengths(self) -> list[int]:
        """Temporal length of every anchor layer output."""
        n = T.conv1d_output_length(self.t_f, self.kernel, 1, 1)
        n = T.conv1d_output_length(n, self.kernel, 2, 1)
        lengths = []
        for _ in range(self.anchor_layers):
            n = T.conv1d_output_length(n, self.kernel, 2, 1)
            lengths.append(n)
        return lengths

    def num_proposals(self) -> int:
        return sum(self.feature_lengths()) * len(self.ratios)


@dataclass
class ProposalPrediction:
    segment: TemporalSegment
    phi_c: float
    phi_w: float
    p_cls: tuple[float, float]  # raw event / background logits
    p_event: float
    p_des: float
    anchor: Anchor
    index: int
    confidence: float | None = None

    @property
    def p_bk(self) -> float:
        return 1.0 - self.p_event


def init_params(config: TepConfig, rng: np.random.Generator) -> dict[str, T.DiffArray]:
    config.validate()
    k = config.kernel
    params: dict[str, T.DiffArray] = {}

    def conv(name, c_in, c_out):
        params[f"{name}.w"] = T.glorot((k, c_in, c_out), k * c_in, k * c_out, rng, name=f"{name}.w")
        params[f"{name}.b"] = T.zeros((c_out,), name=f"{name}.b")

    c1, c2 = config.base_filters
    conv("tep.conv1", config.d0, c1)
    conv("tep.conv2", c1, c2)
    c_in = c2
    out = len(config.ratios) * HEAD_WIDTH
    for j in range(config.anchor_layers):
        conv(f"tep.anchor{j}", c_in, config.anchor_filters)
        c_in = config.anchor_filters
        params[f"tep.pred{j}.w"] = T.glorot((c_in, out), c_in, out, rng, name=f"tep.pred{j}.w")
        params[f"tep.pred{j}.b"] = T.zeros((out,), name=f"tep.pred{j}.b")
    return params


def parameter_count(params: dict[str, T.DiffArray]) -> int:
    return sum(p.size for p in params.values())


@dataclass
class TepOutput:
    """Graph-level output for all N_p anchors, in anchor order."""

    logits: T.DiffArray
    dc: T.DiffArray
    dw: T.DiffArray
    des_logit: T.DiffArray
    p_des: T.DiffArray
    phi_c: T.DiffArray
    phi_w: T.DiffArray
    t_start: T.DiffArray
    t_end: T.DiffArray
    anchors: list[Anchor] = field(repr=False)

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def p_event(self) -> np.ndarray:
        return T.softmax(self.logits.data.astype(np.float64), axis=1)[:, EVENT]

    def predictions(self) -> list[ProposalPrediction]:
        p_event = self.p_event
        out = []
        for i, a in enumerate(self.anchors):
            out.append(
                ProposalPrediction(
                    segment=TemporalSegment(float(self.t_start.data[i]), float(self.t_end.data[i])),
                    phi_c=float(self.phi_c.data[i]),
                    phi_w=float(self.phi_w.data[i]),
                    p_cls=(float(self.logits.data[i, 0]), float(self.logits.data[i, 1])),
                    p_event=float(p_event[i]),
                    p_des=float(self.p_des.data[i]),
                    anchor=a,
                    index=i,
                )
            )
        return out


def forward(features, config: TepConfig, params: dict[str, T.DiffArray]) -> TepOutput:
    features = T.as_diff(features)
    if features.shape != (config.t_f, config.d0):
        raise ValueError(f"features shape {features.shape} != configured ({config.t_f}, {config.d0})")
    h = T.relu(T.conv1d(features, params["tep.conv1.w"], params["tep.conv1.b"], 1, 1))
    h = T.relu(T.conv1d(h, params["tep.conv2.w"], params["tep.conv2.b"], 2, 1))
    heads = []
    lengths = []
    for j in range(config.anchor_layers):
        h = T.relu(T.conv1d(h, params[f"tep.anchor{j}.w"], params[f"tep.anchor{j}.b"], 2, 1))
        pred = T.fully_connected(h, params[f"tep.pred{j}.w"], params[f"tep.pred{j}.b"])
        heads.append(pred.reshape(h.shape[0] * len(config.ratios), HEAD_WIDTH))
        lengths.append(h.shape[0])
    raw = heads[0] if len(heads) == 1 else T.concat(heads, axis=0)
    centers, widths, anchors = anchor_arrays(lengths, config.ratios)
    centers = centers.astype(raw.data.dtype)
    widths = widths.astype(raw.data.dtype)

    logits = raw[:, 0:2]
    dc, dw, des_logit = raw[:, 2], raw[:, 3], raw[:, 4]
    phi_c, phi_w, t_start, t_end = decode_diff(centers, widths, dc, dw, config.alpha1, config.alpha2)
    return TepOutput(
        logits=logits,
        dc=dc,
        dw=dw,
        des_logit=des_logit,
        p_des=T.sigmoid(des_logit),
        phi_c=phi_c,
        phi_w=phi_w,
        t_start=t_start,
        t_end=t_end,
        anchors=anchors,
    )


def tep_forward(features, config: TepConfig, params: dict[str, T.DiffArray]) -> list[ProposalPrediction]:
    with T.no_grad():
        return forward(features, config, params).predictions()


def assign(output: TepOutput, gt_starts, gt_ends, config: TepConfig) -> LabelAssignment:
    if config.match_on == "default":
        starts = np.array([a.center - a.width / 2 for a in output.anchors]).clip(0, 1)
        ends = np.array([a.center + a.width / 2 for a in output.anchors]).clip(0, 1)
    else:
        starts, ends = output.t_start.data, output.t_end.data
    return assign_labels_arrays(starts, ends, np.asarray(gt_starts), np.asarray(gt_ends), config.pos_threshold)


# -- losses -----------------------------------------------------------------
def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


def smooth_l1_diff(x: T.DiffArray) -> T.DiffArray:
    quad = (x * x) * 0.5
    lin = T.absolute(x) - 0.5
    return T.where(np.abs(x.data) < 1, quad, lin)


def tcr_loss(
    t_start: T.DiffArray, t_end: T.DiffArray, assignment: LabelAssignment, gt_starts, gt_ends, scale: float = 1.0
) -> T.DiffArray:
    """Smooth-L1 on (center, width) of positive proposals vs their matches.

    Centers and widths are taken from the clamped segment boundaries and
    multiplied by ``scale`` (1 for normalized time, T_f for clip units).
    """
    pos = np.flatnonzero(assignment.positive)
    if len(pos) == 0:
        log.warning("no positive proposals; temporal regression loss is 0")
        return T.DiffArray(0.0) * 0.0
    gs = np.asarray(gt_starts, dtype=float)[assignment.matched[pos]]
    ge = np.asarray(gt_ends, dtype=float)[assignment.matched[pos]]
    s, e = t_start[pos], t_end[pos]
    center = (s + e) * 0.5
    width = e - s
    dtype = s.data.dtype
    dc = (center - ((gs + ge) * 0.5).astype(dtype)) * scale
    dw = (width - (ge - gs).astype(dtype)) * scale
    return (smooth_l1_diff(dc).sum() + smooth_l1_diff(dw).sum()) * (1.0 / len(pos))


def select_training_anchors(per_anchor_loss: np.ndarray, assignment: LabelAssignment, ratio: float, cap: int) -> np.ndarray:
    """Indices used by the classification loss: positives plus mined negatives."""
    n = len(per_anchor_loss)
    if ratio <= 0:
        return np.arange(n)
    pos = np.flatnonzero(assignment.positive)
    neg = np.flatnonzero(~assignment.positive)
    keep = int(ratio * len(pos)) if len(pos) else cap
    keep = min(keep, len(neg))
    order = np.argsort(-per_anchor_loss[neg], kind="stable")
    return np.sort(np.concatenate([pos, neg[order[:keep]]]))


def event_loss(logits: T.DiffArray, assignment: LabelAssignment, hard_negative_ratio: float = 0.0, cap: int = 128) -> T.DiffArray:
    labels = np.where(assignment.positive, EVENT, BACKGROUND)
    per_anchor = T.softmax_xent_rows(logits, labels)
    idx = select_training_anchors(per_anchor.data, assignment, hard_negative_ratio, cap)
    return per_anchor[idx].mean()


def descriptiveness_loss(p_des: T.DiffArray, rewards) -> T.DiffArray:
    rewards = np.asarray(rewards, dtype=float)
    if rewards.shape != p_des.shape:
        raise ValueError(f"rewards shape {rewards.shape} != p_des shape {p_des.shape}")
    if np.any(rewards < 0) or np.any(rewards > 1):
        raise ValueError("rewards must lie in [0, 1]")
    diff = p_des - rewards.astype(p_des.data.dtype)
    return (diff * diff).mean()


def tep_loss(
    output: TepOutput,
    gt_starts,
    gt_ends,
    rewards,
    config: TepConfig,
    assignment: LabelAssignment | None = None,
) -> tuple[T.DiffArray, dict[str, float]]:
    """Weighted sum event + alpha*tcr + beta*des, with a float breakdown."""
    if assignment is None:
        assignment = assign(output, gt_starts, gt_ends, config)
    if rewards is None:
        rewards = np.zeros(len(output))
    l_event = event_loss(output.logits, assignment, config.hard_negative_ratio, config.hard_negative_cap)
    scale = float(config.t_f) if config.tcr_units == "clips" else 1.0
    l_tcr = tcr_loss(output.t_start, output.t_end, assignment, gt_starts, gt_ends, scale)
    l_des = descriptiveness_loss(output.p_des, rewards)
    total = l_event + l_tcr * config.alpha + l_des * config.beta
    parts = {
        "event": float(l_event.data),
        "tcr": float(l_tcr.data),
        "des": float(l_des.data),
        # recombined in float64 so the breakdown adds up exactly
        "tep": float(l_event.data) + config.alpha * float(l_tcr.data) + config.beta * float(l_des.data),
        "num_pos": assignment.num_positive,
    }
    return total, parts


# -- proposal ranking ----------------------------------------------------------
def fuse_scores(p_event, p_des, lambda0: float) -> np.ndarray:
    return np.asarray(p_event, float) + lambda0 * np.asarray(p_des, float)


def rank_indices(conf: np.ndarray, threshold: float, top_k: int) -> np.ndarray:
    order = np.argsort(-conf, kind="stable")
    order = order[conf[order] > threshold]
    return order[:top_k]


def fuse_and_select(
    predictions: Sequence[ProposalPrediction],
    lambda0: float = 0.2,
    threshold: float = 0.0,
    top_k: int = 1000,
) -> list[ProposalPrediction]:
    """Rank by p_event + lambda0 * p_des, keep scores above ``threshold``."""
    if lambda0 < 0:
        raise ValueError("lambda0 must be non-negative")
    if not predictions:
        return []
    conf = fuse_scores([p.p_event for p in predictions], [p.p_des for p in predictions], lambda0)
    idx = rank_indices(conf, threshold, top_k)
    return [dataclasses.replace(predictions[i], confidence=float(conf[i])) for i in idx]
