import json
import subprocess
import sys

import numpy as np
import pytest

from dvcap import cli, trainer
from dvcap.config import SynthConfig
from dvcap.dataio import CAPTIONS_SCHEMA, PROPOSALS_SCHEMA, gen_synthetic, load_dataset


@pytest.fixture
def tiny_config_file(tmp_path, tiny_cfg):
    p = tmp_path / "tiny.json"
    flat = tiny_cfg.to_flat()
    p.write_text(json.dumps({k: v for k, v in flat.items() if k.split(".")[0] in ("tep", "sg", "train", "synth")}))
    return p


def test_usage_errors_exit_2(capsys):
    assert cli.main(["bogus"]) == 2
    assert cli.main(["propose", "--no-such-flag"]) == 2
    assert "usage" in capsys.readouterr().err


def test_gen_synth_then_oracle_proposals(tmp_path, capsys):
    out = tmp_path / "d"
    assert cli.main(["gen-synth", "--seed", "7", "--out", str(out)]) == 0
    assert cli.main(["eval-proposals", "--data", str(out / "manifest.json"), "--oracle", "--out", str(out), "--an-max", "20"]) == 0
    text = capsys.readouterr().out
    auc = float(text.strip().splitlines()[-1].split()[1])
    csv = (out / "ar_an.csv").read_text().splitlines()
    assert csv[0] == "an,ar" and csv[-1].startswith("# auc=")
    # every GT is recovered once AN reaches the per-video event count
    assert all(float(line.split(",")[1]) == 1.0 for line in csv[5:-1])
    assert 0.9 < auc <= 1.0


def test_train_without_checkpoint_exits_2(tmp_path, tiny_corpus, tiny_config_file, capsys):
    code = cli.main(["train", "--config", str(tiny_config_file), "--data", str(tiny_corpus), "--out", str(tmp_path)])
    assert code == 2
    assert "pretrain-sg" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, tiny_corpus, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"train.nope": 1}')
    assert cli.main(["pretrain-sg", "--config", str(cfg), "--data", str(tiny_corpus), "--out", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_dataset_exits_2(tmp_path):
    assert cli.main(["eval-dense", "--data", str(tmp_path / "none.json"), "--oracle"]) == 2


def test_runtime_failure_exits_1(tmp_path, tiny_corpus, tiny_config_file, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("simulated")

    monkeypatch.setattr(trainer, "pretrain_sg", boom)
    assert cli.main(["pretrain-sg", "--config", str(tiny_config_file), "--data", str(tiny_corpus), "--out", str(tmp_path)]) == 1


def test_full_pipeline(tmp_path, tiny_corpus, tiny_config_file, capsys):
    import jsonschema

    base = ["--config", str(tiny_config_file), "--data", str(tiny_corpus), "--out", str(tmp_path)]
    assert cli.main(["pretrain-sg", *base]) == 0
    assert cli.main(["train", *base, "--checkpoint", str(tmp_path / "sg.dvck")]) == 0
    assert (tmp_path / "train_log.jsonl").read_text().count("\n") == 3
    model = ["--checkpoint", str(tmp_path / "model.dvck")]
    assert cli.main(["propose", *base, *model]) == 0
    assert cli.main(["caption", *base, *model]) == 0
    jsonschema.validate(json.loads((tmp_path / "proposals.json").read_text()), PROPOSALS_SCHEMA)
    captions = json.loads((tmp_path / "captions.json").read_text())
    jsonschema.validate(captions, CAPTIONS_SCHEMA)
    confs = [c["confidence"] for c in next(iter(captions["videos"].values()))]
    assert confs == sorted(confs, reverse=True)
    assert cli.main(["eval-dense", *base, "--predictions", str(tmp_path / "captions.json")]) == 0
    assert cli.main(["eval-proposals", *base, "--predictions", str(tmp_path / "captions.json")]) == 0
    assert cli.main(["eval-dense", *base, *model]) == 0
    assert set(json.loads((tmp_path / "dense_eval.json").read_text())) == {"bleu1", "bleu2", "bleu3", "bleu4", "meteor_lite", "cider_d"}
    assert "AUC" in capsys.readouterr().out


def test_train_rejects_trained_stage_mismatch(tmp_path, tiny_corpus, tiny_cfg, tiny_config_file):
    from dvcap.dataio import save_checkpoint

    ds = load_dataset(tiny_corpus)
    m = trainer.Model.init(tiny_cfg, ds.vocab, 16, 0)
    save_checkpoint(tmp_path / "x.dvck", m.to_checkpoint(stage="other"))
    base = ["--config", str(tiny_config_file), "--data", str(tiny_corpus), "--out", str(tmp_path)]
    assert cli.main(["train", *base, "--checkpoint", str(tmp_path / "x.dvck")]) == 2


def test_noise_free_events_equal_prototypes(tmp_path):
    synth = SynthConfig(num_videos=2, t_f=32, d0=4, prototypes=3, min_events=1, max_events=2, min_width=4, max_width=8, noise=0.0)
    ds = load_dataset(gen_synthetic(synth, tmp_path))
    rows = {}
    for v in ds.videos:
        for a in v.annotations:
            clips = v.features[round(a.t_start * 32) : round(a.t_end * 32)]
            assert np.all(clips == clips[0])
            rows.setdefault(a.sentence, clips[0])
            np.testing.assert_array_equal(rows[a.sentence], clips[0])


def test_console_module_help():
    res = subprocess.run([sys.executable, "-m", "dvcap.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "eval-proposals" in res.stdout
