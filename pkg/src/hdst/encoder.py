"""Per-turn bidirectional encoding and decoder-state initialization.

Two strategies connect turns: ``zero`` encodes every turn from fresh
states, ``last`` seeds each turn's forward pass with the previous turn's
final forward states (per layer). The backward direction always restarts
inside each turn so no information flows from later turns to earlier
ones, which keeps every prefix of the dialogue encoding stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import NumericalizedDialogue
from .nn import lstm_sequence
from .params import ModelConfig, ModelParams

__all__ = [
    "EncodedDialogue",
    "FlatEncoding",
    "encode_turn",
    "encode_dialogue",
    "encode_flat",
    "pooled_summary",
    "init_decoder_state",
]

ChainState = list[tuple[Tensor, Tensor]]  # per-layer (h, c) of the forward direction


@dataclass
class EncodedDialogue:
    """Top-layer hidden rows (n_j, 2h) per turn, with masks and final states."""

    turn_hidden: list[Tensor]
    turn_masks: list[np.ndarray]
    last_forward: list[Tensor]  # final top-layer forward state per turn (1, h)
    last_backward: list[Tensor]  # final top-layer backward state per turn (1, h)
    num: NumericalizedDialogue

    @property
    def n_turns(self) -> int:
        return len(self.turn_hidden)


@dataclass
class FlatEncoding:
    """One sequence over the concatenated real turns (no sentry)."""

    hidden: Tensor  # (n_positions, 2h)
    mask: np.ndarray
    copy_ids: np.ndarray
    num: NumericalizedDialogue


def _encode_ids(
    ids: np.ndarray,
    chain: ChainState | None,
    mp: ModelParams,
    cfg: ModelConfig,
    train: bool,
    rng: np.random.Generator | None,
) -> tuple[Tensor, ChainState, Tensor]:
    x = ag.embedding_lookup(mp.embed, ids)
    x = ag.dropout(x, cfg.dropout, train, rng)
    new_chain: ChainState = []
    last_bwd = None
    hidden = x
    for layer, (fwd, bwd) in enumerate(mp.enc_layers):
        h0 = c0 = None
        if chain is not None:
            h0, c0 = chain[layer]
        hf, h_last, c_last = lstm_sequence(hidden, fwd, h0=h0, c0=c0)
        hb, hb_last, _ = lstm_sequence(hidden, bwd, reverse=True)
        new_chain.append((h_last, c_last))
        last_bwd = hb_last
        hidden = ag.concat([hf, hb], axis=1)
        if layer < len(mp.enc_layers) - 1:
            hidden = ag.dropout(hidden, cfg.dropout, train, rng)
    hidden = ag.dropout(hidden, cfg.dropout, train, rng)
    return hidden, new_chain, last_bwd


def encode_turn(
    ids: np.ndarray,
    chain: ChainState | None,
    mp: ModelParams,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, ChainState, Tensor]:
    """Encode one turn; returns (rows (n, 2h), forward chain state, last backward)."""
    if len(ids) == 0:
        raise ValueError("cannot encode an empty turn")
    return _encode_ids(np.asarray(ids, dtype=np.int64), chain, mp, cfg, train, rng)


def encode_dialogue(
    num: NumericalizedDialogue,
    mp: ModelParams,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> EncodedDialogue:
    turn_hidden: list[Tensor] = []
    masks: list[np.ndarray] = []
    last_f: list[Tensor] = []
    last_b: list[Tensor] = []
    chain: ChainState | None = None
    for ids in num.turn_ids:
        hidden, new_chain, hb = encode_turn(ids, chain, mp, cfg, train, rng)
        turn_hidden.append(hidden)
        masks.append(np.ones(len(ids), dtype=bool))
        last_f.append(new_chain[-1][0])
        last_b.append(hb)
        chain = new_chain if cfg.encoder_init == "last" else None
    return EncodedDialogue(
        turn_hidden=turn_hidden,
        turn_masks=masks,
        last_forward=last_f,
        last_backward=last_b,
        num=num,
    )


def encode_flat(
    num: NumericalizedDialogue,
    upto: int,
    mp: ModelParams,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> FlatEncoding:
    """Encode real turns 1..upto as one concatenated sequence."""
    if not 1 <= upto < num.n_turns:
        raise ValueError(f"upto={upto} out of range")
    ids = np.concatenate([num.turn_ids[j] for j in range(1, upto + 1)])
    copy_ids = np.concatenate([num.copy_ids[j] for j in range(1, upto + 1)])
    hidden, _, _ = _encode_ids(ids, None, mp, cfg, train, rng)
    return FlatEncoding(hidden=hidden, mask=np.ones(len(ids), dtype=bool), copy_ids=copy_ids, num=num)


def pooled_summary(hidden_blocks: list[Tensor], masks: list[np.ndarray]) -> Tensor:
    """Element-wise max over all unmasked rows of all blocks: (1, 2h)."""
    if not hidden_blocks:
        raise ValueError("nothing to pool")
    rows = ag.concat(hidden_blocks, axis=0) if len(hidden_blocks) > 1 else hidden_blocks[0]
    return ag.max_pool_rows(rows, mask=np.concatenate(masks))


def init_decoder_state(
    hidden_blocks: list[Tensor],
    masks: list[np.ndarray],
    mp: ModelParams,
) -> Tensor:
    """Pooled encoder summary projected to the decoder width: (1, h)."""
    return ag.matmul(pooled_summary(hidden_blocks, masks), mp.w_pool)
