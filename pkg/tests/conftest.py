import pytest
import torch

from whatamithinking.numlesa import (
    CorpusSpec,
    ModelConfig,
    TrainConfig,
    build_model,
    build_vocab,
    generate_corpus,
    generate_unannotated,
    load_class_labels,
    load_terms,
)


@pytest.fixture(scope="session")
def spec() -> CorpusSpec:
    return CorpusSpec(n_notes=120, n_unannotated=40, seed=7)


@pytest.fixture(scope="session")
def corpus(spec):
    return generate_corpus(spec)


@pytest.fixture(scope="session")
def unannotated(spec):
    return generate_unannotated(spec)


@pytest.fixture(scope="session")
def vocab(corpus, unannotated):
    keywords = [keyword for label in load_class_labels() for keyword in label.keywords]
    return build_vocab([*corpus, *unannotated, *keywords, *load_terms()])


@pytest.fixture
def model_config(vocab) -> ModelConfig:
    return ModelConfig(
        d_model=8,
        n_layers=2,
        n_heads=2,
        d_ff=16,
        max_length=96,
        vocab_size=len(vocab),
    )


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(
        mode="lesa_xval",
        lr=5e-3,
        max_epochs=2,
        patience=2,
        batch_size=8,
        seeds=(0, 1),
    )


@pytest.fixture
def lesa_xval_model(model_config, vocab):
    return build_model(model_config.with_mode("lesa_xval"), vocab, seed=0)


@pytest.fixture(autouse=True)
def _float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
