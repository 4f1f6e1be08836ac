import numpy as np
import pytest

from fedprint.fl import RoundConfig, personalize_all, train_global
from fedprint.nn import TrainConfig, mlp_specs
from fedprint.synth import GenConfig, PartitionSizes, make_partitions

ACCEPTANCE_LINES = []

# a whole pipeline in about two seconds
TINY_CONFIG = """\
gen.n_classes = 4
gen.feature_dim = 6
gen.latent_dim = 4
gen.embedding_dim = 6
gen.min_frames = 10
gen.max_frames = 16
corpus.train_g = 8
corpus.part1 = 8
corpus.part2 = 8
corpus.indicator = 2
corpus.train_frames_per_speaker = 100
corpus.adaptation_frames = 100
corpus.indicator_utterances = 3
model.hidden_layers = 3
model.hidden_width = 12
model.contexts = -1,0,1|0|0
global_train.epochs = 2
finetune.epochs = 1
attack.h = 1,2,3
attack.a2_h = 2
extractor.frame_widths = 8
extractor.frame_contexts = 0
extractor.segment_widths = 6
extractor.epochs = 2
trials.n_nontarget = 40
"""


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_GEN = GenConfig(n_classes=4, feature_dim=6, latent_dim=4, embedding_dim=6,
                      class_scale=0.5, min_frames=12, max_frames=20, seed=11)
SMALL_SIZES = PartitionSizes(train_g=12, part1=10, part2=10, indicator=3,
                             train_frames_per_speaker=150, adaptation_frames=300,
                             two_set_fraction=0.8, indicator_utterances=4)


@pytest.fixture(scope="session")
def small_bench():
    """A seconds-scale corpus, global model and both client registries."""
    parts = make_partitions(SMALL_GEN, SMALL_SIZES)
    specs = mlp_specs(SMALL_GEN.input_dim, [24] * 3, SMALL_GEN.n_classes,
                      contexts=[(-1, 0, 1), (0,), (0,)])
    g = train_global(parts["TrainG"], specs, TrainConfig(0.05, 4, 8, 3))
    rc = RoundConfig(TrainConfig(0.05, 3, 4, 5))
    return {
        "parts": parts,
        "global": g,
        "part1": personalize_all(g, parts["Part1"], rc, threads=1),
        "part2": personalize_all(g, parts["Part2"], rc, threads=1),
        "indicator": parts["Indicator"].utterances,
    }


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY_CONFIG)
    return path
