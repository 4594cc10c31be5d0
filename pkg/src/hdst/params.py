"""Model configuration and the full parameter bundle.

Widths: embeddings are (vocab, e); each encoder direction produces width-h
states, so encoded rows are width 2h. Output projection ties to the input
embedding matrix, which forces the decoder hidden width to equal e.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .nn import LSTMParams, init_lstm, lstm_params
from .optim import ParamStore, uniform_init

__all__ = ["ModelConfig", "ModelParams", "build_params", "params_from_store", "ConfigError"]

COPY_MODES = ("plain", "freeze", "cover", "flat")
ENCODER_STRATEGIES = ("zero", "last")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults follow the full-scale setup."""

    mode: str = "cover"
    encoder_init: str = "last"
    hidden_dim: int = 400
    embed_dim: int = 400
    n_layers: int = 2
    max_decode_len: int = 10
    dropout: float = 0.5

    def validate(self) -> None:
        if self.mode not in COPY_MODES:
            raise ConfigError(f"mode must be one of {COPY_MODES}, got {self.mode!r}")
        if self.encoder_init not in ENCODER_STRATEGIES:
            raise ConfigError(f"encoder_init must be one of {ENCODER_STRATEGIES}, got {self.encoder_init!r}")
        if self.max_decode_len < 1:
            raise ConfigError("max_decode_len must be >= 1")
        if self.hidden_dim != self.embed_dim:
            raise ConfigError(
                "hidden_dim must equal embed_dim: the output projection reuses the embedding matrix"
            )
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def eval_mode(self) -> "ModelConfig":
        return replace(self, dropout=0.0)


@dataclass
class ModelParams:
    """Named views into one ParamStore for every trainable piece."""

    store: ParamStore
    embed: Tensor
    enc_layers: list[tuple[LSTMParams, LSTMParams]]  # (forward, backward) per layer
    dec_layers: list[LSTMParams]
    w_pool: Tensor  # (2h, h) projection of the pooled encoder summary
    w_word: Tensor  # (h, 2h) bilinear word-attention map
    w_turn: Tensor  # (h, 2h) bilinear turn-attention map
    w_cover: Tensor  # (1, 1) coverage weight
    w_gen: Tensor  # (h + e + 2h, 1) generate-vs-copy gate
    b_gen: Tensor  # (1, 1)
    w_gate: Tensor  # (2h, 3) slot gate over (ptr, none, dontcare)
    b_gate: Tensor  # (1, 3)


def build_params(
    cfg: ModelConfig,
    vocab_size: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> ModelParams:
    cfg.validate()
    store = ParamStore(dtype=dtype)
    h, e = cfg.hidden_dim, cfg.embed_dim
    embed = store.add("embed", uniform_init(rng, (vocab_size, e), fan_in=e, dtype=dtype))
    enc_layers = []
    for layer in range(cfg.n_layers):
        in_dim = e if layer == 0 else 2 * h
        fwd = init_lstm(store, f"enc.l{layer}.fwd", in_dim, h, rng)
        bwd = init_lstm(store, f"enc.l{layer}.bwd", in_dim, h, rng)
        enc_layers.append((fwd, bwd))
    dec_layers = []
    for layer in range(cfg.n_layers):
        in_dim = e if layer == 0 else h
        dec_layers.append(init_lstm(store, f"dec.l{layer}", in_dim, h, rng))
    w_pool = store.add("w_pool", uniform_init(rng, (2 * h, h), dtype=dtype))
    w_word = store.add("w_word", uniform_init(rng, (h, 2 * h), dtype=dtype))
    w_turn = store.add("w_turn", uniform_init(rng, (h, 2 * h), dtype=dtype))
    w_cover = store.add("w_cover", rng.uniform(-0.1, 0.1, size=(1, 1)).astype(dtype))
    w_gen = store.add("w_gen", uniform_init(rng, (h + e + 2 * h, 1), dtype=dtype))
    b_gen = store.add("b_gen", np.zeros((1, 1), dtype=dtype))
    w_gate = store.add("w_gate", uniform_init(rng, (2 * h, 3), dtype=dtype))
    b_gate = store.add("b_gate", np.zeros((1, 3), dtype=dtype))
    return ModelParams(
        store=store,
        embed=embed,
        enc_layers=enc_layers,
        dec_layers=dec_layers,
        w_pool=w_pool,
        w_word=w_word,
        w_turn=w_turn,
        w_cover=w_cover,
        w_gen=w_gen,
        b_gen=b_gen,
        w_gate=w_gate,
        b_gate=b_gate,
    )


def params_from_store(store: ParamStore, cfg: ModelConfig) -> ModelParams:
    """Rebuild the typed views over an existing (e.g. loaded) store."""
    enc_layers = [
        (lstm_params(store, f"enc.l{layer}.fwd"), lstm_params(store, f"enc.l{layer}.bwd"))
        for layer in range(cfg.n_layers)
    ]
    dec_layers = [lstm_params(store, f"dec.l{layer}") for layer in range(cfg.n_layers)]
    return ModelParams(
        store=store,
        embed=store["embed"],
        enc_layers=enc_layers,
        dec_layers=dec_layers,
        w_pool=store["w_pool"],
        w_word=store["w_word"],
        w_turn=store["w_turn"],
        w_cover=store["w_cover"],
        w_gen=store["w_gen"],
        b_gen=store["b_gen"],
        w_gate=store["w_gate"],
        b_gate=store["b_gate"],
    )


def load_embedding_file(path, vocab_tokens: Sequence[str], embed: Tensor) -> int:
    """Overwrite embedding rows from a whitespace text file: token v1 .. vE.

    Returns how many rows were replaced; unknown tokens are skipped.
    """
    index = {t: i for i, t in enumerate(vocab_tokens)}
    dim = embed.shape[1]
    hits = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                continue
            i = index.get(parts[0])
            if i is None:
                continue
            embed.data[i] = np.asarray([float(x) for x in parts[1:]], dtype=embed.dtype)
            hits += 1
    return hits
