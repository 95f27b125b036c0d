import logging
import os

import numpy as np
import pytest
import torch
from click.testing import CliRunner
from dotenv import load_dotenv

from app.helpers.enums import Modality
from app.schemas.sche_model import ModelConfig
from app.schemas.sche_synth import ModalityShape, SynthConfig
from app.services.srv_model import ModelService
from tests.faker import fake

load_dotenv(verbose=True)

torch.set_default_dtype(torch.float64)


def pytest_addoption(parser):
    parser.addoption('--run-slow',
                     action='store_true',
                     help='Run acceptance-scale training tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow') or os.getenv('MORPHEUS_RUN_SLOW'):
        return
    skip_slow = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def app_logs_reach_caplog():
    """logging.ini stops the app logger from propagating to the root handler caplog uses"""
    app_logger = logging.getLogger("app")
    propagate = app_logger.propagate
    app_logger.propagate = True
    yield
    app_logger.propagate = propagate


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def tiny_cohort():
    return fake.cohort(size=8)


@pytest.fixture()
def tiny_config():
    """d=8, two heads, two prototypes: small enough for finite differences"""
    return ModelConfig(
        d=8, heads=2, mlp_dim=8, dropout=0.0, num_prototypes=2, patch_sample=4, patch_dim=6,
    )


@pytest.fixture()
def tiny_model(tiny_config, tiny_cohort):
    return ModelService.build_model(tiny_config, tiny_cohort.groupings, seed=0)


@pytest.fixture()
def small_synth_config():
    return SynthConfig(
        num_patients=24,
        latent_dim=3,
        patches_min=3,
        patches_max=6,
        patch_dim=6,
        chromosomes=2,
        rna=ModalityShape(num_features=12, num_groups=3),
        dnam=ModalityShape(num_features=10, num_groups=2),
        cnv=ModalityShape(num_features=8, num_groups=2),
        seed=7,
    )


@pytest.fixture()
def omics_modalities():
    return list(Modality.omics())


@pytest.fixture()
def runner():
    return CliRunner()
