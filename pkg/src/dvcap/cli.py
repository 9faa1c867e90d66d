"""Command-line entry point.

Exit codes: 0 success, 2 validation error (bad flags, config, data, or a
missing prerequisite), 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import metrics, trainer
from .config import Config, ValidationError, load_config
from .dataio import (
    CAPTIONS_SCHEMA,
    PROPOSALS_SCHEMA,
    gen_synthetic,
    load_checkpoint,
    load_dataset,
    read_predictions,
    read_vocab,
    save_checkpoint,
    write_json,
)

log = logging.getLogger("dvcap")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with dotted config keys")
    common.add_argument("--seed", type=int, help="overrides synth.seed / train.seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--checkpoint", help="model checkpoint (DVCK)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dvcap", description="Dense video captioning on clip features.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-synth", parents=[common], help="write a seeded synthetic corpus")
    for name, text in (
        ("pretrain-sg", "cross-entropy pretraining of the captioner"),
        ("train", "joint proposal + captioning training (needs a pretrain-sg checkpoint)"),
        ("propose", "write ranked proposals JSON"),
        ("caption", "write dense-caption JSON"),
    ):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--data", required=True, help="dataset manifest.json")
    for name, text in (("eval-dense", "dense-captioning mAP per metric"), ("eval-proposals", "AR-AN curve CSV and AUC")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--data", required=True, help="dataset manifest.json")
        sp.add_argument("--predictions", help="predictions JSON (otherwise run the checkpoint)")
        sp.add_argument("--oracle", action="store_true", help="score the ground truth as predictions")
        if name == "eval-proposals":
            sp.add_argument("--an-max", type=int, help="largest AN on the grid (default eval.an_max)")
    return p


def _config(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.synth.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _dataset(args, cfg: Config, vocab=None):
    if vocab is None and cfg.vocab_path:
        vocab = read_vocab(cfg.vocab_path)
    return load_dataset(args.data, vocab)


def _model(args, cfg: Config, stage_hint: str) -> trainer.Model:
    if not args.checkpoint:
        raise ValidationError(f"{stage_hint} requires --checkpoint")
    ckpt = load_checkpoint(args.checkpoint, cfg.hash())
    return trainer.Model.from_checkpoint(ckpt, cfg)


def _predictions(args, cfg: Config, ds) -> dict[str, list[metrics.DenseCaption]]:
    if args.oracle:
        return trainer.ground_truth(ds)
    if args.predictions:
        raw = read_predictions(args.predictions)
        return {
            vid: [
                metrics.DenseCaption(float(p["t_start"]), float(p["t_end"]), str(p.get("sentence", "")), float(p.get("confidence", 0.0)))
                for p in items
            ]
            for vid, items in raw.items()
        }
    model = _model(args, cfg, "evaluation without --predictions")
    return trainer.evaluate(ds, model, metric_names=())["predictions"]


def run(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "gen-synth":
        path = gen_synthetic(cfg.synth, out)
        print(f"wrote {path}")
        return 0

    if args.command == "pretrain-sg":
        ds = _dataset(args, cfg)
        model, losses = trainer.pretrain_sg(ds, cfg, log_path=out / "pretrain_log.jsonl")
        save_checkpoint(out / "sg.dvck", model.to_checkpoint(stage="pretrain-sg"))
        print(f"final xe {losses[-1] if losses else float('nan'):.4f}; wrote {out / 'sg.dvck'}")
        return 0

    if args.command == "train":
        if not args.checkpoint:
            raise ValidationError("train requires a pretrained SG checkpoint: run pretrain-sg first and pass --checkpoint")
        ckpt = load_checkpoint(args.checkpoint, cfg.hash())
        if ckpt.metadata.get("stage") not in ("pretrain-sg", "train"):
            raise ValidationError("train requires a checkpoint produced by pretrain-sg")
        model = trainer.Model.from_checkpoint(ckpt, cfg)
        ds = _dataset(args, cfg, model.vocab)
        model, logs, opt, rng = trainer.train(ds, model, out / "train_log.jsonl", out)
        save_checkpoint(out / "model.dvck", model.to_checkpoint(opt, rng, stage="train", step=len(logs)))
        print(f"{len(logs)} steps; wrote {out / 'model.dvck'}")
        return 0

    if args.command in ("propose", "caption"):
        model = _model(args, cfg, args.command)
        ds = _dataset(args, cfg, model.vocab)
        videos = {}
        for v in ds.videos:
            props = trainer.propose(v, model)
            if args.command == "propose":
                videos[v.id] = [
                    {"t_start": p.segment.t_start, "t_end": p.segment.t_end, "confidence": p.confidence, "p_event": p.p_event, "p_des": p.p_des}
                    for p in props
                ]
            else:
                videos[v.id] = [
                    {"t_start": c.t_start, "t_end": c.t_end, "sentence": c.sentence, "confidence": c.confidence}
                    for c in trainer.caption(v, model, props)
                ]
        name, schema = ("proposals.json", PROPOSALS_SCHEMA) if args.command == "propose" else ("captions.json", CAPTIONS_SCHEMA)
        write_json(out / name, {"videos": videos}, schema)
        print(f"wrote {out / name}")
        return 0

    if args.command == "eval-dense":
        ds = _dataset(args, cfg)
        preds = _predictions(args, cfg, ds)
        report = trainer.evaluate_predictions(ds, preds, cfg)
        for name, value in report["dense_map"].items():
            print(f"{name}\t{value:.4f}")
        (out / "dense_eval.json").write_text(json.dumps(report["dense_map"], indent=1, sort_keys=True) + "\n")
        return 0

    if args.command == "eval-proposals":
        ds = _dataset(args, cfg)
        preds = _predictions(args, cfg, ds)
        an_max = args.an_max or cfg.eval.an_max
        report = trainer.evaluate_predictions(ds, preds, cfg, metric_names=(), an_grid=range(1, an_max + 1))
        curve = report["curve"]
        (out / "ar_an.csv").write_text(curve.to_csv())
        print(f"AUC {curve.auc:.4f}")
        return 0

    raise ValidationError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - surfaced as exit code 1
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
