import os

import pytest

from adl.session import load_context

CORPUS = os.path.join(os.path.dirname(__file__), os.pardir, "corpus")


def corpus_path(name: str) -> str:
    return os.path.join(CORPUS, name)


def corpus_source(name: str) -> str:
    with open(corpus_path(name)) as fh:
        return fh.read()


@pytest.fixture(scope="session")
def corpus_names():
    return sorted(n for n in os.listdir(CORPUS) if n.endswith(".adl"))


def make_context(name: str, width: int = 3):
    return load_context(corpus_source(name), width)
