"""Slot-value decoding with hierarchical copy.

Per decoding step the decoder state scores a word-level distribution
inside every turn, aggregates each turn into a dynamic representation,
scores a turn-level distribution over those, and multiplies the two
levels into one copy distribution over every dialogue position. That is
mixed with a vocabulary softmax through a learned generate-vs-copy gate.

Turn-attention variants: ``plain`` rescoring every step, ``freeze``
reusing the step-0 turn weights, ``cover`` feeding back the summed turn
weights of earlier steps through a learned scalar. ``flat`` bypasses the
hierarchy and scores one distribution over the concatenated dialogue.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import EOS_ID, GATE_CLASSES, UNK_ID, NumericalizedDialogue, Vocab, slot_components
from .encoder import EncodedDialogue, encode_flat, init_decoder_state
from .nn import lstm_cell
from .params import ModelConfig, ModelParams

__all__ = [
    "SlotQuery",
    "make_slot_queries",
    "slot_query_embeddings",
    "AttentionTrace",
    "DecodeContext",
    "DecodeOutput",
    "word_attention",
    "turn_representation",
    "turn_attention",
    "renormalize_copy",
    "flat_copy_attention",
    "vocab_dist",
    "gen_gate",
    "final_dist",
    "slot_gate",
    "hier_context",
    "flat_context",
    "decode_slots",
    "decode_slot_value",
]


@dataclass(frozen=True)
class SlotQuery:
    """A slot name with the vocab ids of its component words."""

    slot: str
    component_ids: np.ndarray


def make_slot_queries(slots, vocab: Vocab) -> list[SlotQuery]:
    return [SlotQuery(slot=s, component_ids=vocab.lookup_many(slot_components(s))) for s in slots]


def slot_query_embeddings(queries: list[SlotQuery], embed: Tensor) -> Tensor:
    """Summed component embeddings, one row per slot: (n_slots, e)."""
    rows = [
        ag.tsum(ag.embedding_lookup(embed, q.component_ids), axis=0, keepdims=True)
        for q in queries
    ]
    return ag.concat(rows, axis=0) if len(rows) > 1 else rows[0]


@dataclass
class AttentionTrace:
    """Per-step attention record for one (dialogue prefix, slot) pair."""

    dialogue_id: str
    slot: str
    context_turn: int  # the prefix length this decode saw
    alpha: list[list[np.ndarray]] = field(default_factory=list)  # [step][turn] -> (n_j,)
    beta: list[np.ndarray] = field(default_factory=list)  # [step] -> (n_turns,)
    gamma: list[list[np.ndarray]] = field(default_factory=list)
    p_gen: list[float] = field(default_factory=list)
    coverage: list[np.ndarray] | None = None  # cover mode only
    flat_attn: list[np.ndarray] | None = None  # flat mode only

    @property
    def n_steps(self) -> int:
        return len(self.p_gen)

    def summed_beta(self) -> np.ndarray:
        return np.sum(self.beta, axis=0)


# --- attention ops ----------------------------------------------------------


def word_attention(s: Tensor, w_word: Tensor, hidden: Tensor, mask: np.ndarray) -> Tensor:
    """Within-turn distribution: softmax over positions of s W h_i; (n_slots, n_pos)."""
    scores = ag.matmul(ag.matmul(s, w_word), ag.transpose(hidden))
    return ag.masked_softmax(scores, mask)


def turn_representation(alpha: Tensor, hidden: Tensor) -> Tensor:
    """Attention-weighted sum of a turn's rows: (n_slots, 2h)."""
    return ag.matmul(alpha, hidden)


def _turn_scores(q: Tensor, reps: list[Tensor]) -> Tensor:
    cols = [ag.tsum(ag.mul(q, g), axis=1, keepdims=True) for g in reps]
    return ag.concat(cols, axis=1) if len(cols) > 1 else cols[0]


def turn_attention(
    s: Tensor,
    w_turn: Tensor,
    reps: list[Tensor],
    mode: str,
    step: int,
    frozen: Tensor | None = None,
    coverage: Tensor | None = None,
    w_cover: Tensor | None = None,
) -> Tensor:
    """Distribution over turns: (n_slots, n_turns)."""
    if mode == "freeze" and step > 0:
        if frozen is None:
            raise ValueError("freeze mode at step > 0 requires the stored step-0 weights")
        return frozen
    scores = _turn_scores(ag.matmul(s, w_turn), reps)
    if mode == "cover":
        if coverage is None or w_cover is None:
            raise ValueError("cover mode requires a coverage vector and weight")
        scores = ag.add(scores, ag.mul(coverage, w_cover))
    return ag.softmax(scores)


def renormalize_copy(beta: Tensor, alphas: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
    """Scale each turn's word weights by its turn weight.

    Returns the flat (n_slots, total_positions) distribution plus the
    per-turn pieces; the flat rows sum to one.
    """
    pieces = [ag.mul(ag.slice_cols(beta, j, j + 1), alpha) for j, alpha in enumerate(alphas)]
    flat = ag.concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]
    return flat, pieces


def flat_copy_attention(s: Tensor, w_word: Tensor, hidden: Tensor, mask: np.ndarray) -> Tensor:
    """Single softmax over every position of the flattened dialogue."""
    return word_attention(s, w_word, hidden, mask)


def vocab_dist(s: Tensor, embed: Tensor) -> Tensor:
    """Project the decoder state onto the tied embedding matrix: (n_slots, vocab)."""
    return ag.softmax(ag.matmul(s, ag.transpose(embed)))


def gen_gate(s: Tensor, e: Tensor, context: Tensor, w_gen: Tensor, b_gen: Tensor) -> Tensor:
    """Generate-vs-copy switch in (0, 1): (n_slots, 1)."""
    return ag.sigmoid(ag.add(ag.matmul(ag.concat([s, e, context], axis=1), w_gen), b_gen))


def final_dist(
    p_vocab: Tensor,
    copy_weights: Tensor,
    copy_ids: np.ndarray,
    p_gen: Tensor,
    ext_size: int,
) -> Tensor:
    """Mix generation and copying over the extended vocabulary."""
    vocab_size = p_vocab.shape[1]
    gen_part = ag.mul(p_vocab, p_gen)
    if ext_size:
        pad = ag.constant(np.zeros((p_vocab.shape[0], ext_size), dtype=p_vocab.dtype))
        gen_part = ag.concat([gen_part, pad], axis=1)
    copy_part = ag.scatter_add_cols(
        ag.mul(copy_weights, ag.add(ag.neg(p_gen), 1.0)), copy_ids, vocab_size + ext_size
    )
    return ag.add(gen_part, copy_part)


def slot_gate(context: Tensor, w_gate: Tensor, b_gate: Tensor) -> Tensor:
    """Three-way (ptr, none, dontcare) distribution from the step-0 context."""
    return ag.softmax(ag.add(ag.matmul(context, w_gate), b_gate))


# --- decode driver ----------------------------------------------------------


@dataclass
class DecodeContext:
    """Everything one prefix decode needs, shared across its slots."""

    dialogue_id: str
    mode: str
    upto: int
    init_h: Tensor  # (1, h)
    ext_size: int
    num: NumericalizedDialogue
    # hierarchical view
    turn_hidden: list[Tensor] | None = None
    turn_masks: list[np.ndarray] | None = None
    turn_copy_ids: list[np.ndarray] | None = None
    # flat view
    flat_hidden: Tensor | None = None
    flat_mask: np.ndarray | None = None
    flat_copy_ids: np.ndarray | None = None

    @property
    def n_turns(self) -> int:
        return self.upto + 1


def hier_context(enc: EncodedDialogue, upto: int, mp: ModelParams, mode: str) -> DecodeContext:
    """View of turns 0..upto over a shared dialogue encoding."""
    if not 1 <= upto < enc.n_turns:
        raise ValueError(f"upto={upto} out of range for {enc.n_turns} turns")
    hidden = enc.turn_hidden[: upto + 1]
    masks = enc.turn_masks[: upto + 1]
    return DecodeContext(
        dialogue_id=enc.num.dialogue.id,
        mode=mode,
        upto=upto,
        init_h=init_decoder_state(hidden, masks, mp),
        ext_size=len(enc.num.ext_tokens),
        num=enc.num,
        turn_hidden=hidden,
        turn_masks=masks,
        turn_copy_ids=list(enc.num.copy_ids[: upto + 1]),
    )


def flat_context(
    num: NumericalizedDialogue,
    upto: int,
    mp: ModelParams,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> DecodeContext:
    flat = encode_flat(num, upto, mp, cfg, train=train, rng=rng)
    return DecodeContext(
        dialogue_id=num.dialogue.id,
        mode="flat",
        upto=upto,
        init_h=init_decoder_state([flat.hidden], [flat.mask], mp),
        ext_size=len(num.ext_tokens),
        num=num,
        flat_hidden=flat.hidden,
        flat_mask=flat.mask,
        flat_copy_ids=flat.copy_ids,
    )


@dataclass
class DecodeOutput:
    step_dists: list[Tensor]  # per step (n_slots, vocab+ext)
    step_betas: list[Tensor]  # per step (n_slots, n_turns); empty in flat mode
    gate_probs: Tensor  # (n_slots, 3)
    tokens: list[list[str]]  # greedy decode per slot (teacher runs: argmax per step)
    gates: list[str]  # argmax gate class per slot
    n_steps: np.ndarray  # per slot, EOS step included
    traces: list[AttentionTrace] | None
    ext_size: int


def _zeros(shape, like: Tensor) -> Tensor:
    return ag.constant(np.zeros(shape, dtype=like.dtype))


def decode_slots(
    ctx: DecodeContext,
    queries: list[SlotQuery],
    slot_emb: Tensor,
    mp: ModelParams,
    cfg: ModelConfig,
    teacher_ids: np.ndarray | None = None,
    teacher_force_prob: float = 1.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
    record_traces: bool = True,
) -> DecodeOutput:
    """Decode every slot against one dialogue prefix in lockstep.

    Slots are mutually independent: each row of every intermediate tensor
    belongs to one slot. ``teacher_ids`` (n_slots, K) holds gold targets in
    the extended-vocab id space, EOS included; without it decoding is
    greedy with ties broken toward the lowest id. With teacher forcing
    below 1.0, each step flips one coin to feed the model's own argmax
    instead of the gold token.
    """
    n_slots = len(queries)
    vocab_size = ctx.num.vocab_size
    hidden_dim = mp.w_pool.shape[1]
    x = ag.dropout(slot_emb, cfg.dropout, train, rng)

    h_layers = [ag.add(_zeros((n_slots, hidden_dim), mp.embed), ctx.init_h) for _ in mp.dec_layers]
    c_layers = [_zeros((n_slots, hidden_dim), mp.embed) for _ in mp.dec_layers]

    if ctx.mode == "flat":
        copy_ids = ctx.flat_copy_ids
    else:
        copy_ids = np.concatenate(ctx.turn_copy_ids)

    frozen_beta: Tensor | None = None
    coverage = _zeros((n_slots, ctx.n_turns), mp.embed) if ctx.mode == "cover" else None

    max_steps = teacher_ids.shape[1] if teacher_ids is not None else cfg.max_decode_len
    done = np.zeros(n_slots, dtype=bool)
    n_steps = np.zeros(n_slots, dtype=np.int64)
    tokens: list[list[str]] = [[] for _ in range(n_slots)]

    traces = None
    if record_traces:
        traces = [
            AttentionTrace(
                dialogue_id=ctx.dialogue_id,
                slot=q.slot,
                context_turn=ctx.upto,
                coverage=[] if ctx.mode == "cover" else None,
                flat_attn=[] if ctx.mode == "flat" else None,
            )
            for q in queries
        ]

    step_dists: list[Tensor] = []
    step_betas: list[Tensor] = []
    gate_probs: Tensor | None = None

    for k in range(max_steps):
        inp = x
        for layer, p in enumerate(mp.dec_layers):
            h_layers[layer], c_layers[layer] = lstm_cell(inp, h_layers[layer], c_layers[layer], p)
            inp = h_layers[layer]
            if layer < len(mp.dec_layers) - 1:
                inp = ag.dropout(inp, cfg.dropout, train, rng)
        s = ag.dropout(h_layers[-1], cfg.dropout, train, rng)

        cov_in = coverage
        if ctx.mode == "flat":
            attn = flat_copy_attention(s, mp.w_word, ctx.flat_hidden, ctx.flat_mask)
            context = ag.matmul(attn, ctx.flat_hidden)
            copy_weights = attn
            beta = None
            alphas = None
            gamma_pieces = None
        else:
            alphas = [
                word_attention(s, mp.w_word, hid, mask)
                for hid, mask in zip(ctx.turn_hidden, ctx.turn_masks)
            ]
            reps = [turn_representation(a, hid) for a, hid in zip(alphas, ctx.turn_hidden)]
            beta = turn_attention(
                s, mp.w_turn, reps, ctx.mode, k,
                frozen=frozen_beta, coverage=cov_in, w_cover=mp.w_cover,
            )
            if ctx.mode == "freeze" and k == 0:
                frozen_beta = beta
            if ctx.mode == "cover":
                coverage = ag.add(cov_in, beta)
            copy_weights, gamma_pieces = renormalize_copy(beta, alphas)
            context = None
            for j, g in enumerate(reps):
                piece = ag.mul(ag.slice_cols(beta, j, j + 1), g)
                context = piece if context is None else ag.add(context, piece)
            step_betas.append(beta)

        p_vocab = vocab_dist(s, mp.embed)
        p_gen = gen_gate(s, x, context, mp.w_gen, mp.b_gen)
        dist = final_dist(p_vocab, copy_weights, copy_ids, p_gen, ctx.ext_size)
        step_dists.append(dist)
        if k == 0:
            gate_probs = slot_gate(context, mp.w_gate, mp.b_gate)

        picked = dist.data.argmax(axis=1)
        if traces is not None:
            for si in range(n_slots):
                if done[si]:
                    continue
                tr = traces[si]
                tr.p_gen.append(float(p_gen.data[si, 0]))
                if ctx.mode == "flat":
                    tr.flat_attn.append(copy_weights.data[si].copy())
                else:
                    tr.alpha.append([a.data[si].copy() for a in alphas])
                    tr.beta.append(beta.data[si].copy())
                    tr.gamma.append([g.data[si].copy() for g in gamma_pieces])
                    if ctx.mode == "cover":
                        tr.coverage.append(cov_in.data[si].copy())

        if teacher_ids is not None:
            for si in range(n_slots):
                n_steps[si] = k + 1
                tokens[si].append(ctx.num.token_for(int(picked[si])))
            if k + 1 >= max_steps:
                break
            next_ids = teacher_ids[:, k]
            if teacher_force_prob < 1.0 and rng is not None and rng.random() >= teacher_force_prob:
                next_ids = picked
            input_ids = np.where(next_ids < vocab_size, next_ids, UNK_ID).astype(np.int64)
        else:
            for si in range(n_slots):
                if done[si]:
                    continue
                n_steps[si] = k + 1
                pick = int(picked[si])
                if pick == EOS_ID:
                    done[si] = True
                else:
                    tokens[si].append(ctx.num.token_for(pick))
            if done.all() or k + 1 >= max_steps:
                break
            input_ids = np.where(picked < vocab_size, picked, UNK_ID).astype(np.int64)
            input_ids[done] = EOS_ID

        x = ag.embedding_lookup(mp.embed, input_ids)
        x = ag.dropout(x, cfg.dropout, train, rng)

    gate_idx = gate_probs.data.argmax(axis=1)
    gates = [GATE_CLASSES[i] for i in gate_idx]
    return DecodeOutput(
        step_dists=step_dists,
        step_betas=step_betas,
        gate_probs=gate_probs,
        tokens=tokens,
        gates=gates,
        n_steps=n_steps,
        traces=traces,
        ext_size=ctx.ext_size,
    )


def decode_slot_value(
    ctx: DecodeContext,
    query: SlotQuery,
    mp: ModelParams,
    cfg: ModelConfig,
    teacher_tokens=None,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Decode a single slot; returns (tokens, gate class, trace, step dists).

    ``teacher_tokens`` is a gold token sequence (EOS appended here); token
    probabilities come back as plain arrays over the extended vocabulary.
    """
    slot_emb = slot_query_embeddings([query], mp.embed)
    teacher_ids = None
    if teacher_tokens is not None:
        ids = [ctx.num.target_id(t) for t in teacher_tokens]
        ids = [i if i is not None else UNK_ID for i in ids]
        teacher_ids = np.array([ids + [EOS_ID]], dtype=np.int64)
    out = decode_slots(
        ctx, [query], slot_emb, mp, cfg,
        teacher_ids=teacher_ids, train=train, rng=rng, record_traces=True,
    )
    dists = [d.data[0].copy() for d in out.step_dists]
    return out.tokens[0], out.gates[0], out.traces[0], dists
