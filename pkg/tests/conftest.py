from __future__ import annotations

from pathlib import Path

import pytest

from icl_re.corpus import Corpus, build_corpus, load_instances

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture()
def tiny_corpus() -> Corpus:
    """Six hand-checked instances: five train, one test, two type pairs."""
    instances = load_instances(DATA_DIR / "tiny_train.jsonl", split="train")
    instances += load_instances(DATA_DIR / "tiny_test.jsonl", split="test")
    return build_corpus(instances)
