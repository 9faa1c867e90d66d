import json

import numpy as np
import pytest

from dvcap import trainer
from dvcap.dataio import load_checkpoint, load_dataset, save_checkpoint


@pytest.fixture
def pretrained(tiny_corpus, tiny_cfg):
    ds = load_dataset(tiny_corpus)
    model, losses = trainer.pretrain_sg(ds, tiny_cfg)
    return ds, model, losses


def test_pretrain_touches_only_captioner(tiny_corpus, tiny_cfg):
    ds = load_dataset(tiny_corpus)
    fresh = trainer.Model.init(tiny_cfg, ds.vocab, len(ds.videos[0].attributes), tiny_cfg.train.seed)
    model, losses = trainer.pretrain_sg(ds, tiny_cfg)
    assert losses[-1] < losses[0]
    for k, p in model.params.items():
        same = np.array_equal(p.data, fresh.params[k].data)
        assert same == k.startswith("tep."), k


def test_joint_step_with_zero_lambda2_leaves_captioner_bitwise(pretrained):
    ds, model, _ = pretrained
    before = {k: v.data.copy() for k, v in model.subset("sg.").items()}
    tep_before = {k: v.data.copy() for k, v in model.subset("tep.").items()}
    opt = trainer._optimizer(model.config)
    reward = trainer.reward_fn(ds, model.config.sg.reward_metric)
    rng = np.random.default_rng(0)
    for step, v in enumerate(ds.videos):
        trainer.joint_train_step(step, v, model, opt, reward, rng, lambda2=0.0)
    for k, arr in before.items():
        assert model.params[k].data.tobytes() == arr.tobytes(), k
    assert any(not np.array_equal(model.params[k].data, a) for k, a in tep_before.items())


def test_train_log_total_recombines(pretrained):
    ds, model, _ = pretrained
    _, logs, _, _ = trainer.train(ds, model)
    cfg = model.config
    assert len(logs) == len(ds.videos) * cfg.train.epochs
    for e in logs:
        tep_total = e.event + cfg.tep.alpha * e.tcr + cfg.tep.beta * e.des
        assert e.tep == pytest.approx(tep_total, abs=1e-6)
        assert e.total == pytest.approx(e.lambda1 * tep_total + e.lambda2 * e.sg, abs=1e-6)
        assert 0 <= e.des <= 1
        json.loads(e.to_json())


def test_warmup_epochs_disable_captioner_loss(pretrained):
    ds, model, _ = pretrained
    model.config.train.tep_warmup_epochs = 1
    _, logs, _, _ = trainer.train(ds, model)
    n = len(ds.videos)
    assert all(e.lambda2 == 0 for e in logs[:n])
    assert all(e.lambda2 == model.config.train.lambda2 for e in logs[n:])


def test_model_checkpoint_round_trip(pretrained, tmp_path):
    ds, model, _ = pretrained
    save_checkpoint(tmp_path / "m.dvck", model.to_checkpoint(stage="pretrain-sg"))
    back = trainer.Model.from_checkpoint(load_checkpoint(tmp_path / "m.dvck"), model.config)
    assert back.vocab == model.vocab
    for k, p in model.params.items():
        assert back.params[k].data.tobytes() == p.data.tobytes()


def test_rewards_in_unit_interval(pretrained):
    ds, model, _ = pretrained
    from dvcap import tep

    v = ds.videos[0]
    out = tep.forward(v.features, model.config.tep, model.subset("tep."))
    a = tep.assign(out, v.gt_starts, v.gt_ends, model.config.tep)
    a.positive[:] = True
    a.matched[:] = 0
    r = trainer.compute_rewards(out, a, v, model, trainer.reward_fn(ds, "cider_d"))
    assert np.all((r >= 0) & (r <= 1))


def test_evaluate_oracle_predictions(tiny_corpus, tiny_cfg):
    ds = load_dataset(tiny_corpus)
    report = trainer.evaluate_predictions(ds, trainer.ground_truth(ds), tiny_cfg, ("bleu1", "meteor_lite"), range(2, 10))
    assert report["dense_map"]["bleu1"] == pytest.approx(1.0)
    assert report["ar_an_auc"] == pytest.approx(1.0)


def test_evaluate_end_to_end(pretrained):
    ds, model, _ = pretrained
    report = trainer.evaluate(ds, model, ("bleu1",), range(1, 5))
    assert set(report["predictions"]) == {v.id for v in ds.videos}
    assert 0 <= report["ar_an_auc"] <= 1
