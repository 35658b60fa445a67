"""Shared fixtures. Expensive artifacts (the 500-record corpus, RVQ codebooks,
and the 2000-step smoke checkpoint) are built once per session and cached on
disk under tests/_cache so repeated runs stay fast. Delete the cache directory
to force a rebuild; every artifact is a pure function of fixed seeds."""

import os

import numpy as np
import pytest
import torch

from dimo.corpus import CorpusConfig, build_vocab, generate_corpus
from dimo.model import ModelConfig, TrainConfig, build_model, load_checkpoint, save_checkpoint, train_supervised
from dimo.pipeline import prepare_samples
from dimo.rvq import EmaConfig, frame_stack, load_codebooks, save_codebooks, train_codebooks

CACHE = os.path.join(os.path.dirname(__file__), "_cache")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


@pytest.fixture(scope="session")
def corpus(vocab):
    return generate_corpus(0, 500, CorpusConfig(), vocab)


@pytest.fixture(scope="session")
def train_records(corpus):
    return [r for r in corpus if r.split == "train"]


@pytest.fixture(scope="session")
def test_records(corpus):
    return [r for r in corpus if r.split == "test"]


@pytest.fixture(scope="session")
def codebooks(train_records):
    os.makedirs(CACHE, exist_ok=True)
    path = os.path.join(CACHE, "codebooks.bin")
    if os.path.exists(path):
        return load_codebooks(path)
    vectors = np.concatenate([frame_stack(r.clip, 4) for r in train_records])
    books = train_codebooks(vectors, 4, 64, 4, EmaConfig(seed=0))
    save_codebooks(books, path)
    return books


def smoke_model_config(vocab):
    return ModelConfig(text_vocab=len(vocab), levels=4, codebook=64, seed=0)


def smoke_train_config():
    # rebalanced task mix: with only 2000 steps the captioning branch needs
    # far more than its full-scale 10% share to learn motion conditioning
    return TrainConfig(steps=2000, seed=0, t2m=0.4, m2m=0.1, m2t=0.5)


@pytest.fixture(scope="session")
def smoke_model(vocab, train_records, codebooks):
    """2000-step trained checkpoint plus its loss curve."""
    os.makedirs(CACHE, exist_ok=True)
    ckpt = os.path.join(CACHE, "smoke.ckpt")
    loss_path = os.path.join(CACHE, "smoke_losses.txt")
    if os.path.exists(ckpt) and os.path.exists(loss_path):
        model, _ = load_checkpoint(ckpt)
        losses = [float(x) for x in open(loss_path)]
    else:
        model = build_model(smoke_model_config(vocab))
        samples = prepare_samples(train_records, codebooks, model.config.max_motion)
        losses = train_supervised(model, samples, smoke_train_config())
        save_checkpoint(model, ckpt)
        with open(loss_path, "w") as f:
            f.writelines(f"{v!r}\n" for v in losses)
    model.eval()
    return model, losses


@pytest.fixture(scope="session")
def tiny_model():
    """Small untrained model for shape/gradient/decode mechanics tests."""
    cfg = ModelConfig(d_model=16, layers=1, heads=2, ffn_mult=2, max_text=6,
                      max_motion=8, text_vocab=12, levels=2, codebook=8, seed=0)
    return build_model(cfg)
