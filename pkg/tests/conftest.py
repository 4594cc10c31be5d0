from types import SimpleNamespace

import numpy as np
import pytest

from hdst import corpus as cp
from hdst.decoder import make_slot_queries
from hdst.params import ModelConfig, build_params


@pytest.fixture
def tiny_world():
    """Factory for a small synthetic corpus plus a freshly initialized model."""

    def make(
        mode="plain",
        encoder_init="zero",
        hidden=6,
        layers=1,
        seed=0,
        dtype=np.float64,
        n_dialogues=4,
        n_turns=(2, 3),
        n_slots=2,
        vocab_size=60,
        distractor=0.3,
        dropout=0.0,
        max_decode_len=6,
    ):
        synth = cp.SynthConfig(
            n_dialogues=n_dialogues,
            n_turns_min=n_turns[0],
            n_turns_max=n_turns[1],
            n_slots=n_slots,
            vocab_size=vocab_size,
            distractor_rate=distractor,
        )
        corpus = cp.generate_synthetic(synth, seed=seed)
        vocab = cp.build_vocab(corpus)
        cfg = ModelConfig(
            mode=mode,
            encoder_init=encoder_init,
            hidden_dim=hidden,
            embed_dim=hidden,
            n_layers=layers,
            max_decode_len=max_decode_len,
            dropout=dropout,
        )
        rng = np.random.default_rng(seed + 1)
        mp = build_params(cfg, vocab.size, rng, dtype=dtype)
        queries = make_slot_queries(corpus.slots, vocab)
        nums = [cp.numericalize(d, vocab) for d in corpus.dialogues]
        return SimpleNamespace(
            corpus=corpus, vocab=vocab, cfg=cfg, mp=mp, queries=queries, rng=rng, nums=nums
        )

    return make
