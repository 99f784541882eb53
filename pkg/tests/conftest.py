import numpy as np
import pytest

from crossdecode.cohort import generate_cohort
from crossdecode.config import from_dict
from crossdecode.training import finetune, pretrain

TINY = {
    "cohort": {"n_subjects": 3, "voxels_min": 48, "voxels_max": 64, "latent_dim": 6, "n_train": 200, "n_test": 40,
               "n_categories": 8, "gamma": 1.0, "noise_sigma": 0.5, "n_tokens": 4, "token_dim": 12, "text_dim": 10,
               "session_size": 100, "lowlevel_grid": [4, 4, 2], "fingerprint_hidden": 16},
    "model": {"d0": 24, "hidden": 32, "lowlevel_channels": 6, "refiner_hidden": 8, "prior_hidden": 16},
    "adapters": {"rank": 2, "lora_min_width": 8},
    "train": {"epochs": 3, "pretrain_epochs": 2, "batch_size": 10, "pretrain_batch_size": 20,
              "projector_epochs": 2, "lr": 1e-3, "pretrain_lr": 1e-3},
    "eval": {"pool_size": 40, "pool_repeats": 2},
}


def tiny_config(**over):
    cfg = from_dict(TINY)
    return cfg.replace(**over) if over else cfg


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_cohort(tiny_cfg):
    return generate_cohort(tiny_cfg.cohort, tiny_cfg.seed)


@pytest.fixture(scope="session")
def tiny_shared(tiny_cohort, tiny_cfg):
    shared, history = pretrain(tiny_cohort, tiny_cfg)
    return shared, history


@pytest.fixture(scope="session")
def tiny_adapted(tiny_shared, tiny_cohort, tiny_cfg):
    return finetune(tiny_shared[0], tiny_cohort, tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.VERDICTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
