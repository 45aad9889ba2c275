"""Shared fixtures: a tiny trunk and a tiny synthetic corpus."""

import numpy as np
import pytest

from sinc_speaker.data import synth_corpus
from sinc_speaker.model import ModelConfig, init_model

TINY_RATE = 8000
TINY_CHUNK_MS = 16.0  # 128 samples at 8 kHz
TINY_TRAIN_TARGET = (2.0, 2.5)
TINY_TEST_TARGET = (1.0, 2.0)

TINY_CONFIG_TEXT = """\
# tiny trunk for tests
data.sample_rate = 8000
data.chunk_ms = 16
data.train_min_s = 2
data.train_max_s = 2.5
data.test_min_s = 1
data.test_max_s = 2

sinc.filters = 4
sinc.kernel_len = 17
sinc.pool = 2

model.conv_filters = 4
model.conv_kernels = 5
model.conv_pools = 2
model.fc_layers = 16
model.embedding_dim = 8

loss.s = 16
train.batch_size = 8
train.epochs = 2
train.batches_per_epoch = 3
train.learning_rate = 0.001
eval.enroll_chunks = 10
gradcheck.seeds = 1
"""


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        sample_rate=TINY_RATE,
        chunk_len=128,
        sinc_filters=4,
        sinc_kernel_len=17,
        sinc_pool=2,
        conv_layers=[(4, 5, 2)],
        fc_layers=[16],
        embedding_dim=8,
    )


@pytest.fixture
def model_config():
    return tiny_model_config()


@pytest.fixture
def weights(model_config):
    return init_model(model_config, 3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """3 speakers x 4 utterances of 1 s at 8 kHz: 2 train and 2 test each."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = synth_corpus(
        root,
        n_speakers=3,
        utterances_per_speaker=4,
        seconds_per_utterance=1.0,
        sample_rate=TINY_RATE,
        seed=7,
        chunk_ms=TINY_CHUNK_MS,
        train_target_s=TINY_TRAIN_TARGET,
        test_target_s=TINY_TEST_TARGET,
    )
    return root, manifest


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG_TEXT)
    return path
