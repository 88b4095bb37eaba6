import numpy as np
import pytest

from src.core.config import settings
from src.core.encoder import EncoderConfig, EncoderModel
from src.training.synthetic import SyntheticTask, generate_synthetic


@pytest.fixture
def tiny_config():
    return EncoderConfig(vocab_size=64, d_model=16, n_layers=4, n_heads=4, d_ff=32, max_seq_len=40)


@pytest.fixture
def tiny_model(tiny_config):
    return EncoderModel.init(tiny_config, seed=0)


@pytest.fixture
def tiny_task():
    return SyntheticTask(
        vocab_size=64,
        n_docs=40,
        n_train_queries=16,
        n_eval_queries=8,
        query_len=6,
        doc_len=12,
        n_keywords=16,
        keywords_per_doc=2,
        n_negatives=3,
        seed=0,
    )


@pytest.fixture
def tiny_dataset(tiny_task):
    return generate_synthetic(tiny_task)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "RUNS_PATH", str(tmp_path / "runs"))
    monkeypatch.setattr(settings, "MODEL_PATH", str(tmp_path / "models"))
    monkeypatch.setattr(settings, "THREADS", 1)
    monkeypatch.setattr(settings, "TENSORBOARD_ENABLED", False)
    return settings
