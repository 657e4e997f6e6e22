import numpy as np
import pytest

from mmdistill.data import VOCAB, generate_dataset
from mmdistill.model import MultimodalModel, student_config, teacher_config
from mmdistill.training import TrainConfig


def tiny_student(**kw):
    base = dict(image_size=8, patch_size=4, encoder_dim=8, encoder_heads=2, embed_dim=8,
                llm_layers=1, llm_heads=2, vocab_size=len(VOCAB), max_seq_len=24)
    return student_config(**{**base, **kw})


def tiny_teacher(**kw):
    base = dict(image_size=8, patch_size=4, encoder_dim=8, encoder_heads=2, embed_dim=16,
                llm_layers=1, llm_heads=2, vocab_size=len(VOCAB), max_seq_len=24)
    return teacher_config(**{**base, **kw})


TINY_TRAIN = TrainConfig(learning_rate=3e-3, batch_size=8, pretrain_epochs=1, finetune_epochs=1)

# a config small enough that every CLI command finishes in about a second
TINY_INI = """\
[data]
pretrain_size = 40
finetune_size = 40
eval_size = 20
grid_size = 2
n_colors = 4
image_size = 16

[model]
encoder_dim = 24
encoder_heads = 2

[teacher]
embed_dim = 32
llm_layers = 1
pretrain_epochs = 1
finetune_epochs = 1

[student]
embed_dim = 16
llm_layers = 1
pretrain_epochs = 1
finetune_epochs = 1
"""


@pytest.fixture(scope="session")
def tiny_data():
    return generate_dataset({"pretrain": 16, "finetune": 16, "eval": 8}, grid_size=2, n_colors=3,
                            seed=0, image_size=8)


@pytest.fixture
def rng():
    return np.random.default_rng(20241018)


@pytest.fixture
def tiny_pair():
    teacher = MultimodalModel.create(tiny_teacher(), seed=1)
    student = MultimodalModel.create(tiny_student(), seed=2, visual_encoder=teacher.visual_encoder)
    return teacher, student


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
