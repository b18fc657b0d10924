import pytest
import torch

from topicsg.core import Box, RelationalCaption, SceneObject, SceneRecord, tokenize
from topicsg.features import ModelConfig
from topicsg.synth import GenConfig

torch.set_num_threads(1)

TINY = dict(d_v=6, d_l=5, d_h=4, d_a=3, d_e=3, d_u=4, d_s=3, d_sem=2, d_tr=8, heads=2, enc_layers=1, dec_layers=2)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture(scope="session")
def vocab():
    return GenConfig().vocab.vocabulary()


def two_object_scene(vocab, with_flags=True):
    objs = (
        SceneObject(0, Box(40, 50, 30, 40), vocab.index("man"), (vocab.index("red"),)),
        SceneObject(1, Box(90, 60, 50, 30), vocab.index("dog")),
    )
    rels = (
        RelationalCaption(0, 1, tuple(tokenize("red man holding dog", vocab))),
        RelationalCaption(1, 0, tuple(tokenize("dog near red man", vocab))),
    )
    return SceneRecord("two", objs, rels, tuple(tokenize("a man holding a dog", vocab)), (True, False))


@pytest.fixture
def two_scene(vocab):
    return two_object_scene(vocab)


def pytest_terminal_summary(terminalreporter):
    import helpers

    if helpers.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(helpers.ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
