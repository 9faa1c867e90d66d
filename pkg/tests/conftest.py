import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import pytest  # noqa: E402

from dvcap import tensor as T  # noqa: E402


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


def tiny_config():
    """A config small enough for multi-step training inside unit tests."""
    from dvcap.config import Config, apply_overrides

    cfg = Config.desk()
    apply_overrides(
        cfg,
        {
            "tep": {"t_f": 32, "d0": 6, "base_filters": [8, 8], "anchor_layers": 3, "anchor_filters": 8},
            "sg": {"hidden": 8, "max_len": 8},
            "synth": {"num_videos": 3, "t_f": 32, "d0": 6, "prototypes": 4, "min_events": 1, "max_events": 2, "min_width": 4, "max_width": 12},
            "train": {"epochs": 1, "pretrain_epochs": 2},
        },
    )
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from dvcap.dataio import gen_synthetic

    cfg = tiny_config()
    return gen_synthetic(cfg.synth, tmp_path_factory.mktemp("tiny"))


@pytest.fixture
def tiny_cfg():
    return tiny_config()
