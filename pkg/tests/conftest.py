import numpy as np
import pytest

from qlab.data import load_corpus, split
from qlab.model import ModelConfig


WORDS = [
    "the ", "quant ", "model ", "error ", "rate ", "decay ", "weight ", "loss ",
    "train ", "scale ", "bits ", "grid ", "norm ", "step ", "data ", "sharp ",
]


def make_corpus_bytes(n_words: int = 60000, seed: int = 0) -> bytes:
    rng = np.random.Generator(np.random.PCG64(seed))
    probs = rng.dirichlet(np.ones(len(WORDS)) * 0.6)
    return "".join(rng.choice(WORDS, size=n_words, p=probs)).encode()


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.bin"
    path.write_bytes(make_corpus_bytes())
    return str(path)


@pytest.fixture(scope="session")
def corpus_splits(corpus_path):
    stream = load_corpus(corpus_path)
    return split(stream, 0.1, 0.05, seed=0)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        vocab=256, d_model=32, n_layers=2, n_heads=2, d_ff=64,
        seq_len=32, init_seed=1, init_std=0.05,
    )
    base.update(kw)
    return ModelConfig(**base)


def micro_train_config(corpus: str, **overrides) -> dict:
    from qlab.config import resolve

    text = f"""
data.path = {corpus}
data.seq_len = 32
data.val_fraction = 0.1
data.calib_fraction = 0.05
model.d_model = 32
model.n_layers = 2
model.n_heads = 2
model.d_ff = 64
model.init_std = 0.05
optim.peak_lr = 3e-3
schedule.kind = wsd
schedule.total_steps = 60
schedule.warmup_frac = 0.1
schedule.decay_frac = 0.2
train.batch_size = 4
train.ckpt_interval = 10
train.eval_interval = 20
train.log_interval = 10
eval.batches = 3
eval.batch_size = 4
quant.calib_samples = 8
quant.group_size = 32
"""
    cfg = resolve(text, is_path=False)
    cfg.update(overrides)
    return cfg
