import os

# single-threaded BLAS keeps float reductions in a fixed order
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from mmsim.data import SynthConfig, collate, generate_corpus  # noqa: E402
from mmsim.encoder import Encoder, EncoderConfig  # noqa: E402


def tiny_synth(**kw) -> SynthConfig:
    base = dict(
        n_videos=12, n_pairs=20, n_topics=4, vocab_size=40, frame_dim=8, n_tags=10,
        title_len_range=(2, 5), frame_count_range=(1, 4), seed=1,
    )
    base.update(kw)
    return SynthConfig(**base)


def tiny_encoder_config(**kw) -> EncoderConfig:
    base = dict(
        n_layers=2, hidden_dim=16, n_heads=2, ffn_dim=32, vocab_size=40, frame_dim=8,
        max_frames=4, max_title_len=5, dropout_rate=0.0,
    )
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(tiny_synth())


@pytest.fixture
def tiny_encoder():
    return Encoder(tiny_encoder_config(init_std=0.3), np.random.default_rng(0))


@pytest.fixture
def tiny_batch(tiny_corpus):
    return collate(tiny_corpus.samples[:3], 5, 4)


def pytest_configure(config):
    config._criteria = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config._criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config._criteria, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
