import numpy as np
import pytest

from sclm.model import DecoderConfig, EncoderConfig, ModalityConfig, ModelConfig, init_params
from sclm.textdata import BOS, EOD, EOP, PAD, PackedSequence


def micro_config(dec_layers=1, enc_layers=1, d_dec=16, d_enc=8, n=32, span_cap=16,
                 connector="linear", vector=False, dropout=0.0, deepnorm=False, init_std=0.02):
    mods = {"text": ModalityConfig(EncoderConfig(enc_layers, d_enc, 2, span_cap, dropout), connector)}
    if vector:
        mods["vec"] = ModalityConfig(EncoderConfig(enc_layers, d_enc, 2, span_cap, dropout, d_feat=5),
                                     connector)
    return ModelConfig(DecoderConfig(dec_layers, d_dec, 2, n, 0.0), mods, deepnorm=deepnorm,
                       init_std=init_std)


def random_sequence(rng, n, docs=None, pad=None):
    """BOS, then ``docs`` documents of random bytes each closed by EOD, then PAD."""
    pad = int(rng.integers(0, n // 4)) if pad is None else pad
    used = n - pad
    docs = docs or int(rng.integers(1, 4))
    cuts = np.sort(rng.choice(np.arange(2, used), size=min(docs - 1, used - 3), replace=False))
    bounds = [1, *cuts.tolist(), used]
    ids = np.full(n, PAD, dtype=np.int64)
    ids[0] = BOS
    spans = []
    for j, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        ids[a:b] = rng.integers(0, 256, size=b - a)
        ids[b - 1] = EOD
        if b - a > 2:
            ids[a + (b - a) // 2] = EOP
        spans.append((0 if j == 0 else a, b))
    if pad:
        spans.append((used, n))
    return PackedSequence(ids, spans)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_params():
    return init_params(micro_config(), seed=0)
