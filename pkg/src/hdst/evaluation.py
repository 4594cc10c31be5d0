"""Joint and focus accuracy, corpus prediction, and report assembly.

Evaluation is per turn: for every real turn t the model decodes all slots
from the dialogue prefix 0..t, the gate overrides `none`/`dontcare`, and
the turn counts as jointly correct only if every slot's value string
matches gold. Focus accuracy checks, per (prefix, slot), whether the
step-summed turn attention peaks strictly at the labeled turn.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import CheckpointError, load_checkpoint
from .corpus import (
    Corpus,
    NONE_TOKEN,
    DONTCARE_TOKEN,
    Vocab,
    detokenize,
    information_turn_table,
    numericalize,
)
from .decoder import (
    AttentionTrace,
    SlotQuery,
    decode_slots,
    flat_context,
    hier_context,
    make_slot_queries,
    slot_query_embeddings,
)
from .encoder import encode_dialogue
from .params import ModelConfig, ModelParams, params_from_store

__all__ = [
    "PredictionRecord",
    "Tracker",
    "joint_accuracy",
    "per_slot_accuracy",
    "focus_accuracy",
    "build_info_turn_index",
    "predict_corpus",
    "report_from",
    "evaluate_tracker",
    "tracker_from_checkpoint",
    "dump_attention",
]


@dataclass(frozen=True)
class PredictionRecord:
    """Predicted vs gold state after one turn; every slot is present."""

    dialogue_id: str
    turn: int
    predicted: dict[str, str]
    gold: dict[str, str]


@dataclass
class Tracker:
    """A loaded model: parameters plus everything needed to decode."""

    mp: ModelParams
    cfg: ModelConfig
    vocab: Vocab
    slots: tuple[str, ...]
    queries: list[SlotQuery]


def joint_accuracy(records: list[PredictionRecord]) -> float:
    if not records:
        raise ValueError("joint_accuracy needs at least one record")
    correct = sum(1 for r in records if r.predicted == r.gold)
    return correct / len(records)


def per_slot_accuracy(records: list[PredictionRecord], slots) -> dict[str, float]:
    out = {}
    for slot in slots:
        hits = sum(1 for r in records if r.predicted.get(slot) == r.gold.get(slot))
        out[slot] = hits / len(records) if records else 0.0
    return out


def build_info_turn_index(corpus: Corpus) -> dict[tuple[str, int, str], int]:
    """(dialogue id, prefix turn, slot) -> labeled turn as of that prefix."""
    index: dict[tuple[str, int, str], int] = {}
    for d in corpus.dialogues:
        table = information_turn_table(d.states, corpus.slots)
        for t in range(1, d.n_real_turns + 1):
            for slot in corpus.slots:
                index[(d.id, t, slot)] = table[t - 1][slot]
    return index


def focus_accuracy(
    traces: list[AttentionTrace],
    info_turns: dict[tuple[str, int, str], int],
    only_mentioned: bool = False,
) -> float:
    """Fraction of traces whose summed turn attention peaks strictly at the label.

    Ties count as incorrect. Traces without turn-level attention (flat
    mode) are skipped; with nothing left the result is NaN.
    """
    hits = 0
    total = 0
    for tr in traces:
        if not tr.beta:
            continue
        label = info_turns[(tr.dialogue_id, tr.context_turn, tr.slot)]
        if only_mentioned and label == 0:
            continue
        summed = tr.summed_beta()
        best = summed.max()
        winners = np.flatnonzero(summed == best)
        total += 1
        if len(winners) == 1 and winners[0] == label:
            hits += 1
    return hits / total if total else float("nan")


def _predict_value(gate: str, tokens: list[str]) -> str:
    if gate == "none":
        return NONE_TOKEN
    if gate == "dontcare":
        return DONTCARE_TOKEN
    value = detokenize(tokens)
    return value if value else NONE_TOKEN


def predict_corpus(
    tracker: "Tracker | str | Path",
    corpus: Corpus,
    cutoff: str = "per_turn",
) -> tuple[list[PredictionRecord], list[AttentionTrace]]:
    """Greedy-decode every dialogue prefix (or only the final one)."""
    if isinstance(tracker, (str, Path)):
        tracker = tracker_from_checkpoint(tracker)
    if tuple(corpus.slots) != tuple(tracker.slots):
        raise CheckpointError(
            f"slot inventory mismatch: corpus has {list(corpus.slots)}, checkpoint has {list(tracker.slots)}"
        )
    if cutoff not in ("per_turn", "final"):
        raise ValueError(f"cutoff must be 'per_turn' or 'final', got {cutoff!r}")
    records: list[PredictionRecord] = []
    traces: list[AttentionTrace] = []
    mp, cfg = tracker.mp, tracker.cfg
    with ag.no_grad():
        slot_emb = slot_query_embeddings(tracker.queries, mp.embed)
        for d in corpus.dialogues:
            num = numericalize(d, tracker.vocab)
            enc = None
            if cfg.mode != "flat":
                enc = encode_dialogue(num, mp, cfg)
            turns = range(1, d.n_real_turns + 1) if cutoff == "per_turn" else [d.n_real_turns]
            for t in turns:
                if cfg.mode == "flat":
                    ctx = flat_context(num, t, mp, cfg)
                else:
                    ctx = hier_context(enc, t, mp, cfg.mode)
                out = decode_slots(ctx, tracker.queries, slot_emb, mp, cfg)
                predicted = {
                    q.slot: _predict_value(out.gates[si], out.tokens[si])
                    for si, q in enumerate(tracker.queries)
                }
                gold = {slot: detokenize(d.gold_value(t, slot).value) for slot in tracker.slots}
                records.append(
                    PredictionRecord(dialogue_id=d.id, turn=t, predicted=predicted, gold=gold)
                )
                traces.extend(out.traces)
    return records, traces


def report_from(
    records: list[PredictionRecord],
    traces: list[AttentionTrace],
    info_index: dict[tuple[str, int, str], int],
    slots,
) -> dict:
    focus = focus_accuracy(traces, info_index)
    focus_mentioned = focus_accuracy(traces, info_index, only_mentioned=True)
    return {
        "joint_acc": joint_accuracy(records),
        "focus_acc": None if np.isnan(focus) else focus,
        "focus_acc_mentioned": None if np.isnan(focus_mentioned) else focus_mentioned,
        "n_turns": len(records),
        "n_slots": len(slots),
        "per_slot_acc": per_slot_accuracy(records, slots),
    }


def evaluate_tracker(tracker: Tracker, corpus: Corpus) -> dict:
    records, traces = predict_corpus(tracker, corpus)
    report = report_from(records, traces, build_info_turn_index(corpus), tracker.slots)
    if report["focus_acc"] is None:
        report["focus_acc"] = float("nan")
    return report


def tracker_from_checkpoint(path: str | Path) -> Tracker:
    store, meta = load_checkpoint(path)
    try:
        cfg = ModelConfig(**meta["model"]).eval_mode()
        vocab = Vocab(meta["vocab"])  # constructor keeps reserved tokens in front
        slots = tuple(meta["slots"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: incomplete metadata ({e})") from e
    if list(vocab.tokens) != list(meta["vocab"]):
        raise CheckpointError(f"{path}: vocabulary does not round-trip; file is corrupt")
    mp = params_from_store(store, cfg)
    if mp.embed.shape[0] != vocab.size:
        raise CheckpointError(
            f"{path}: embedding rows {mp.embed.shape[0]} != vocabulary size {vocab.size}"
        )
    return Tracker(mp=mp, cfg=cfg, vocab=vocab, slots=slots, queries=make_slot_queries(slots, vocab))


def dump_attention(tracker: Tracker, corpus: Corpus, path: str | Path) -> int:
    """Write line-delimited JSON attention records over final prefixes.

    One record per (dialogue, slot, step); hierarchical runs carry the
    turn weights and the per-turn word/copy weights, flat runs a single
    position distribution.
    """
    _, traces = predict_corpus(tracker, corpus, cutoff="final")
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for tr in traces:
            for k in range(tr.n_steps):
                rec: dict = {
                    "dialogue_id": tr.dialogue_id,
                    "slot": tr.slot,
                    "step": k,
                    "p_gen": tr.p_gen[k],
                }
                if tr.flat_attn is not None:
                    rec["attn"] = [round(float(x), 6) for x in tr.flat_attn[k]]
                else:
                    rec["beta"] = [round(float(x), 6) for x in tr.beta[k]]
                    rec["alpha"] = [[round(float(x), 6) for x in a] for a in tr.alpha[k]]
                    rec["gamma"] = [[round(float(x), 6) for x in g] for g in tr.gamma[k]]
                f.write(json.dumps(rec) + "\n")
                n += 1
    return n
