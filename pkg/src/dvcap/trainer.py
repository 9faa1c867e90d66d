"""Training loops: captioner pretraining, joint TEP + SCST steps, evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import captioner as sg
from . import metrics
from . import tensor as T
from . import tep
from .anchors import tiou_matrix
from .config import Config, ValidationError
from .dataio import Checkpoint, Dataset, Video, save_checkpoint
from .vocab import Vocabulary

log = logging.getLogger(__name__)


@dataclass
class Model:
    config: Config
    vocab: Vocabulary
    params: dict[str, T.DiffArray]
    attr_dim: int

    @classmethod
    def init(cls, config: Config, vocab: Vocabulary, attr_dim: int, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        params = tep.init_params(config.tep, rng)
        params.update(sg.init_params(len(vocab), config.tep.d0, attr_dim, config.sg.hidden, rng))
        return cls(config, vocab, params, attr_dim)

    def subset(self, prefix: str) -> dict[str, T.DiffArray]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def to_checkpoint(self, optimizer=None, rng: np.random.Generator | None = None, **metadata) -> Checkpoint:
        meta = {"vocab": self.vocab.tokens[4:], "attr_dim": self.attr_dim, "config": self.config.to_flat()}
        meta.update(metadata)
        return Checkpoint(
            params={k: v.data for k, v in self.params.items()},
            optimizer=optimizer,
            config_hash=self.config.hash(),
            rng_state=None if rng is None else rng.bit_generator.state,
            metadata=meta,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: Config) -> "Model":
        vocab = Vocabulary(ckpt.metadata["vocab"])
        model = cls.init(config, vocab, int(ckpt.metadata["attr_dim"]), seed=0)
        missing = set(model.params) - set(ckpt.params)
        if missing:
            raise ValidationError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
        for k, p in model.params.items():
            if ckpt.params[k].shape != p.shape:
                raise ValidationError(f"checkpoint parameter {k} has shape {ckpt.params[k].shape}, model expects {p.shape}")
            p.data = ckpt.params[k].astype(p.data.dtype).copy()
        return model


@dataclass
class TrainLog:
    step: int
    video: str
    event: float = 0.0
    tcr: float = 0.0
    des: float = 0.0
    tep: float = 0.0
    sg: float = 0.0
    total: float = 0.0
    mean_reward: float = 0.0
    num_pos: int = 0
    num_selected: int = 0
    lambda1: float = 1.0
    lambda2: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def _optimizer(config: Config, lr: float | None = None) -> T.OptimizerState:
    tc = config.train
    return T.OptimizerState(lr=tc.lr if lr is None else lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)


def _apply(params: dict[str, T.DiffArray], opt: T.OptimizerState, clip_norm: float) -> float:
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
    norm = T.clip_grad_norm(grads, clip_norm)
    T.adam_update(params, grads, opt)
    for p in params.values():
        p.zero_grad()
    return norm


def reward_fn(dataset: Dataset, metric_name: str) -> Callable[[list[str], list[str]], float]:
    """Sentence reward in [0, 1]; CIDEr-D is rescaled from [0, 10]."""
    if metric_name == "cider_d":
        corpus = {(v.id, i): [a.sentence] for v in dataset.videos for i, a in enumerate(v.annotations)}
        scorer = metrics.CiderD(corpus)
        return lambda c, r: min(1.0, scorer.score(c, r) / 10.0)
    return metrics.caption_metric(metric_name)


# -- captioner pretraining ---------------------------------------------------
def pretrain_sg(dataset: Dataset, config: Config, model: Model | None = None, log_path: str | Path | None = None) -> tuple[Model, list[float]]:
    """Cross-entropy training on ground-truth (segment, sentence) pairs with mean pooling."""
    pairs = [(v, a) for v in dataset.videos for a in v.annotations]
    if not pairs:
        raise ValidationError("pretrain_sg needs at least one annotated segment")
    seed = config.train.seed
    if model is None:
        model = Model.init(config, dataset.vocab, len(dataset.videos[0].attributes), seed)
    params = model.subset("sg.")
    opt = _optimizer(config, config.train.sg_lr)
    rng = np.random.default_rng(seed + 1)
    encoded = [(v, model.vocab.encode(a.sentence), sg.proposal_feature(v.features, a.t_start, a.t_end).data) for v, a in pairs]
    losses = []
    fh = open(log_path, "w") if log_path else None
    try:
        step = 0
        for epoch in range(config.train.pretrain_epochs):
            epoch_loss = 0.0
            for i in rng.permutation(len(encoded)):
                video, ids, feat = encoded[i]
                loss = sg.caption_xe_loss(video.attributes, feat, ids, params)
                loss.backward()
                _apply(params, opt, config.train.clip_norm)
                epoch_loss += float(loss.data)
                step += 1
            losses.append(epoch_loss / len(encoded))
            if fh:
                fh.write(json.dumps({"epoch": epoch, "step": step, "xe": losses[-1]}) + "\n")
            log.info("pretrain epoch %d xe %.4f", epoch, losses[-1])
    finally:
        if fh:
            fh.close()
    return model, losses


def overfit_pair(attributes, feature, sentence, params, steps: int, lr: float, clip_norm: float = 5.0) -> list[float]:
    """Repeated XE steps on one pair; returns the loss before every step."""
    opt = T.OptimizerState(lr=lr)
    losses = []
    for _ in range(steps):
        loss = sg.caption_xe_loss(attributes, feature, sentence, params)
        losses.append(float(loss.data))
        loss.backward()
        _apply(params, opt, clip_norm)
    return losses


def greedy_text(model: Model, attributes, feature) -> list[str]:
    ids = sg.greedy_decode(attributes, feature, model.subset("sg."), model.config.sg.max_len)
    return model.vocab.decode(ids)


def reconstruction_rate(dataset: Dataset, model: Model) -> float:
    """Fraction of training sentences reproduced exactly from mean-pooled GT features."""
    hits = total = 0
    for v in dataset.videos:
        for a in v.annotations:
            feat = sg.proposal_feature(v.features, a.t_start, a.t_end)
            hits += greedy_text(model, v.attributes, feat) == model.vocab.decode(model.vocab.encode(a.sentence))
            total += 1
    return hits / max(total, 1)


# -- joint training ------------------------------------------------------------
class _DecodeCache:
    """Greedy decodes keyed by the clip set of a proposal, valid for one video and step."""

    def __init__(self, model: Model, video: Video, scores: np.ndarray):
        self.model, self.video, self.scores = model, video, scores
        self.cache: dict[tuple, list[str]] = {}

    def feature(self, t_start: float, t_end: float) -> T.DiffArray:
        return sg.proposal_feature(self.video.features, t_start, t_end, self.scores)

    def greedy(self, t_start: float, t_end: float) -> list[str]:
        key = tuple(sg.segment_clips(t_start, t_end, self.video.features.shape[0]))
        if key not in self.cache:
            self.cache[key] = greedy_text(self.model, self.video.attributes, self.feature(t_start, t_end))
        return self.cache[key]


def compute_rewards(output: tep.TepOutput, assignment, video: Video, model: Model, reward) -> np.ndarray:
    """Reward of every positive proposal's greedy caption against its matched sentence; 0 for negatives."""
    rewards = np.zeros(len(output))
    scores = sg.clip_scores(output.t_start.data, output.t_end.data, output.p_des.data, video.features.shape[0])
    cache = _DecodeCache(model, video, scores)
    with T.no_grad():
        for i in np.flatnonzero(assignment.positive):
            ref = video.annotations[assignment.matched[i]].sentence
            words = cache.greedy(float(output.t_start.data[i]), float(output.t_end.data[i]))
            rewards[i] = float(np.clip(reward(words, [ref]), 0.0, 1.0))
    return rewards


def _passthrough_scores(output: tep.TepOutput, t_f: int) -> T.DiffArray:
    centers = (np.arange(t_f) + 0.5) / t_f
    inside = (output.t_start.data[None, :] <= centers[:, None]) & (centers[:, None] <= output.t_end.data[None, :])
    counts = inside.sum(axis=1, keepdims=True)
    dtype = output.p_des.data.dtype
    weights = np.where(counts > 0, inside / np.maximum(counts, 1), 0.0).astype(dtype)
    fallback = np.where(counts[:, 0] > 0, 0.0, sg.NEUTRAL_SCORE).astype(dtype)
    return T.matmul(weights, output.p_des) + fallback


def joint_train_step(
    step: int,
    video: Video,
    model: Model,
    opt: T.OptimizerState,
    reward,
    rng: np.random.Generator,
    lambda1: float | None = None,
    lambda2: float | None = None,
) -> TrainLog:
    cfg = model.config
    l1 = cfg.train.lambda1 if lambda1 is None else lambda1
    l2 = cfg.train.lambda2 if lambda2 is None else lambda2
    tep_params = model.subset("tep.")
    sg_params = model.subset("sg.")
    t_f = video.features.shape[0]

    out = tep.forward(video.features, cfg.tep, tep_params)
    gs, ge = video.gt_starts, video.gt_ends
    assignment = tep.assign(out, gs, ge, cfg.tep)
    rewards = compute_rewards(out, assignment, video, model, reward)
    l_tep, parts = tep.tep_loss(out, gs, ge, rewards, cfg.tep, assignment)

    conf = tep.fuse_scores(out.p_event, out.p_des.data, cfg.tep.lambda0)
    selected = tep.rank_indices(conf, cfg.tep.select_threshold, cfg.train.joint_topk)
    scores = sg.clip_scores(out.t_start.data, out.t_end.data, out.p_des.data, t_f)
    pass_scores = _passthrough_scores(out, t_f) if cfg.sg.passthrough_attention else None
    overlaps = tiou_matrix(out.t_start.data[selected], out.t_end.data[selected], gs, ge) if len(selected) else np.zeros((0, len(gs)))

    sg_terms = []
    for row, i in enumerate(selected):
        if overlaps[row].max() <= 0:
            continue
        ref = video.annotations[int(overlaps[row].argmax())].sentence
        s, e = float(out.t_start.data[i]), float(out.t_end.data[i])
        idx = sg.segment_clips(s, e, t_f)
        if pass_scores is not None:
            feat = sg.attention_pool(video.features[idx], pass_scores[idx])
        else:
            feat = sg.attention_pool(video.features[idx], scores[idx])
        greedy_ids = sg.greedy_decode(video.attributes, feat.data, sg_params, cfg.sg.max_len)
        sample_ids, logps = sg.sample_decode(video.attributes, feat, sg_params, cfg.sg.max_len, rng)
        r_g = reward(model.vocab.decode(greedy_ids), [ref])
        r_s = reward(model.vocab.decode(sample_ids), [ref])
        sg_terms.append(sg.scst_loss(logps, r_s, r_g))
    if sg_terms:
        l_sg = (T.stack(sg_terms).sum() if len(sg_terms) > 1 else sg_terms[0]) * (1.0 / len(sg_terms))
    else:
        log.debug("step %d: no selected proposal overlaps ground truth; L_SG = 0", step)
        l_sg = T.DiffArray(0.0)

    total = l_tep * l1 + l_sg * l2
    total.backward()
    _apply(model.params, opt, cfg.train.clip_norm)

    pos = assignment.positive
    return TrainLog(
        step=step,
        video=video.id,
        event=parts["event"],
        tcr=parts["tcr"],
        des=parts["des"],
        tep=parts["tep"],
        sg=float(l_sg.data),
        total=l1 * parts["tep"] + l2 * float(l_sg.data),
        mean_reward=float(rewards[pos].mean()) if pos.any() else 0.0,
        num_pos=int(pos.sum()),
        num_selected=len(sg_terms),
        lambda1=l1,
        lambda2=l2,
    )


def train(
    dataset: Dataset,
    model: Model,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    on_epoch_end: Callable[[int, Model], None] | None = None,
) -> tuple[Model, list[TrainLog], T.OptimizerState, np.random.Generator]:
    """Joint training, one video per step; warm-up epochs use lambda2 = 0."""
    cfg = model.config
    rng = np.random.default_rng(cfg.train.seed + 2)
    opt = _optimizer(cfg)
    reward = reward_fn(dataset, cfg.sg.reward_metric)
    logs: list[TrainLog] = []
    fh = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.train.tep_warmup_epochs + cfg.train.epochs):
            warm = epoch < cfg.train.tep_warmup_epochs
            for i in rng.permutation(len(dataset.videos)):
                entry = joint_train_step(step, dataset.videos[i], model, opt, reward, rng, lambda2=0.0 if warm else None)
                logs.append(entry)
                if fh:
                    fh.write(entry.to_json() + "\n")
                step += 1
                every = cfg.train.checkpoint_every
                if checkpoint_dir and every and step % every == 0:
                    save_checkpoint(Path(checkpoint_dir) / f"step_{step:06d}.dvck", model.to_checkpoint(opt, rng, stage="train", step=step))
            if on_epoch_end:
                on_epoch_end(epoch, model)
    finally:
        if fh:
            fh.close()
    return model, logs, opt, rng


def mean_training_reward(dataset: Dataset, model: Model) -> float:
    """Mean reward of greedy captions for every GT segment under descriptiveness attention."""
    reward = reward_fn(dataset, model.config.sg.reward_metric)
    vals = []
    with T.no_grad():
        for v in dataset.videos:
            out = tep.forward(v.features, model.config.tep, model.subset("tep."))
            scores = sg.clip_scores(out.t_start.data, out.t_end.data, out.p_des.data, v.features.shape[0])
            for a in v.annotations:
                feat = sg.proposal_feature(v.features, a.t_start, a.t_end, scores)
                vals.append(reward(greedy_text(model, v.attributes, feat), [a.sentence]))
    return float(np.mean(vals))


# -- inference & evaluation ----------------------------------------------------
def propose(video: Video, model: Model, top_k: int | None = None) -> list[tep.ProposalPrediction]:
    cfg = model.config.tep
    preds = tep.tep_forward(video.features, cfg, model.subset("tep."))
    return tep.fuse_and_select(preds, cfg.lambda0, cfg.select_threshold, cfg.select_topk if top_k is None else top_k)


def caption(video: Video, model: Model, proposals: list[tep.ProposalPrediction]) -> list[metrics.DenseCaption]:
    with T.no_grad():
        out = tep.forward(video.features, model.config.tep, model.subset("tep."))
    scores = sg.clip_scores(out.t_start.data, out.t_end.data, out.p_des.data, video.features.shape[0])
    cache = _DecodeCache(model, video, scores)
    return [
        metrics.DenseCaption(p.segment.t_start, p.segment.t_end, " ".join(cache.greedy(p.segment.t_start, p.segment.t_end)), p.confidence)
        for p in proposals
    ]


def ground_truth(dataset: Dataset) -> dict[str, list[metrics.DenseCaption]]:
    return {v.id: [metrics.DenseCaption(a.t_start, a.t_end, a.sentence) for a in v.annotations] for v in dataset.videos}


def evaluate_predictions(
    dataset: Dataset,
    predicted: dict[str, list[metrics.DenseCaption]],
    config: Config,
    metric_names=None,
    an_grid=None,
) -> dict:
    gt = ground_truth(dataset)
    names = config.eval.metrics if metric_names is None else metric_names
    corpus = {(v.id, i): [a.sentence] for v in dataset.videos for i, a in enumerate(v.annotations)}
    dense = {}
    for name in names:
        fn = metrics.caption_metric(name, corpus)
        dense[name] = metrics.dense_caption_map(predicted, gt, fn, top_k=config.eval.top_k)
    grid = range(1, config.eval.an_max + 1) if an_grid is None else an_grid
    ranked = {vid: [(p.t_start, p.t_end) for p in metrics._rank(ps, len(ps))] for vid, ps in predicted.items()}
    curve = metrics.ar_an_curve(ranked, {vid: [(g.t_start, g.t_end) for g in gs] for vid, gs in gt.items()}, grid)
    return {"dense_map": dense, "ar_an_auc": curve.auc, "curve": curve}


def proposal_curve(dataset: Dataset, model: Model, an_grid) -> metrics.ArAnCurve:
    ranked = {v.id: [(p.segment.t_start, p.segment.t_end) for p in propose(v, model)] for v in dataset.videos}
    gt = {v.id: list(zip(v.gt_starts, v.gt_ends)) for v in dataset.videos}
    return metrics.ar_an_curve(ranked, gt, an_grid)


def evaluate(dataset: Dataset, model: Model, metric_names=None, an_grid=None) -> dict:
    """Propose, caption and score every video."""
    predicted = {}
    for v in dataset.videos:
        predicted[v.id] = caption(v, model, propose(v, model, model.config.eval.top_k))
    report = evaluate_predictions(dataset, predicted, model.config, metric_names, an_grid)
    report["predictions"] = predicted
    return report
