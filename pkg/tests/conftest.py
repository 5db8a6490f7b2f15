import numpy as np
import pytest

from surgvla.datasets import make_synthetic_corpus
from surgvla.encoding import EncoderConfig, PatchEncoder, ProjectionConfig, ProjectionMap
from surgvla.training import build_toy_state


@pytest.fixture(scope="session")
def toy_corpus():
    return make_synthetic_corpus(seed=7, sizes={"videos": 4, "frames": 6})


@pytest.fixture()
def toy_state(toy_corpus):
    texts = [c.caption for c in toy_corpus.captions]
    texts += [q for r in toy_corpus.vqa_records for q in (r.question, r.answer)]
    return build_toy_state(seed=0, corpus_texts=texts)


@pytest.fixture()
def encoder():
    return PatchEncoder(EncoderConfig(seed=3))


@pytest.fixture()
def projection():
    return ProjectionMap(ProjectionConfig(in_dim=32, out_dim=64, seed=4))


@pytest.fixture()
def rng():
    return np.random.default_rng(11)
