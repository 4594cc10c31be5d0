"""Dialogue corpus model: tokenization, loading, turn labeling, vocabulary,
and synthetic corpus generation.

A dialogue is a list of (machine, user) utterance pairs plus the full
slot-value state after every real turn. Turn 0 is always a sentry turn
containing only the word ``none``; it stands in as the labeled turn for
slots that are never mentioned. The labeled "information turn" of a slot
is the last turn at which its value changed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "CorpusError",
    "PAD_TOKEN",
    "UNK_TOKEN",
    "SOS_TOKEN",
    "EOS_TOKEN",
    "NONE_TOKEN",
    "DONTCARE_TOKEN",
    "GATE_CLASSES",
    "tokenize",
    "detokenize",
    "Turn",
    "SlotValue",
    "Dialogue",
    "Corpus",
    "pad_sentry",
    "information_turn_table",
    "label_information_turns",
    "load_slot_inventory",
    "load_corpus",
    "Vocab",
    "build_vocab",
    "slot_components",
    "NumericalizedDialogue",
    "numericalize",
    "SynthConfig",
    "generate_synthetic",
    "corpus_to_json",
    "write_corpus",
]


class CorpusError(ValueError):
    """Malformed corpus file or inconsistent dialogue data."""


PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
SOS_TOKEN = "<sos>"
EOS_TOKEN = "<eos>"
NONE_TOKEN = "none"
DONTCARE_TOKEN = "dontcare"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, SOS_TOKEN, EOS_TOKEN, NONE_TOKEN, DONTCARE_TOKEN)

# reserved ids are fixed by Vocab construction order
PAD_ID, UNK_ID, SOS_ID, EOS_ID, NONE_ID, DONTCARE_ID = range(6)

GATE_CLASSES = ("ptr", "none", "dontcare")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase and split on whitespace, with punctuation as its own token."""
    return tuple(_TOKEN_RE.findall(text.lower()))


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class Turn:
    """One machine+user exchange. Index 0 is the sentry turn."""

    machine_tokens: tuple[str, ...]
    user_tokens: tuple[str, ...]
    index: int

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.machine_tokens + self.user_tokens


SENTRY_TURN = Turn(machine_tokens=(NONE_TOKEN,), user_tokens=(NONE_TOKEN,), index=0)


@dataclass(frozen=True)
class SlotValue:
    """A slot (domain-slot concatenation) with its value tokens and gate class."""

    slot: str
    value: tuple[str, ...]
    gate: str

    @classmethod
    def from_tokens(cls, slot: str, value: tuple[str, ...]) -> "SlotValue":
        if value == (NONE_TOKEN,):
            gate = "none"
        elif value == (DONTCARE_TOKEN,):
            gate = "dontcare"
        else:
            gate = "ptr"
        return cls(slot=slot, value=value, gate=gate)


NONE_VALUE = (NONE_TOKEN,)


@dataclass(frozen=True)
class Dialogue:
    """Sentry-padded dialogue with per-turn full states and turn labels.

    ``states[t-1]`` is the full state after real turn ``t`` (slots absent
    from the mapping hold the value ``none``). ``info_turns`` maps every
    inventory slot to the last turn where its value changed, or 0 (the
    sentry) if it was never set.
    """

    id: str
    turns: tuple[Turn, ...]
    states: tuple[Mapping[str, SlotValue], ...]
    info_turns: Mapping[str, int]

    @property
    def n_real_turns(self) -> int:
        return len(self.turns) - 1

    def state_after(self, t: int) -> Mapping[str, SlotValue]:
        if not 1 <= t <= self.n_real_turns:
            raise IndexError(f"turn {t} out of range for dialogue {self.id}")
        return self.states[t - 1]

    def gold_value(self, t: int, slot: str) -> SlotValue:
        sv = self.state_after(t).get(slot)
        return sv if sv is not None else SlotValue.from_tokens(slot, NONE_VALUE)


@dataclass(frozen=True)
class Corpus:
    dialogues: tuple[Dialogue, ...]
    slots: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.dialogues)


def pad_sentry(turns: Sequence[Turn]) -> tuple[Turn, ...]:
    """Ensure turn 0 is the sentry; idempotent, reindexes the rest."""
    if not turns:
        raise CorpusError("cannot sentry-pad a dialogue with no turns")
    body = list(turns)
    if body[0].machine_tokens == (NONE_TOKEN,) and body[0].user_tokens == (NONE_TOKEN,) and body[0].index == 0:
        body = body[1:]
    out = [SENTRY_TURN]
    for i, turn in enumerate(body, start=1):
        out.append(Turn(machine_tokens=turn.machine_tokens, user_tokens=turn.user_tokens, index=i))
    return tuple(out)


def information_turn_table(
    states: Sequence[Mapping[str, SlotValue]],
    slots: Iterable[str],
) -> list[dict[str, int]]:
    """Per-prefix labeled turns: entry t-1 answers "as of turn t".

    A slot's labeled turn is the last turn at which its value differed
    from the previous turn's (the state before turn 1 is empty). Slots
    never set map to turn 0, the sentry.
    """
    slots = list(slots)
    current = {s: 0 for s in slots}
    prev_vals: dict[str, tuple[str, ...]] = {s: NONE_VALUE for s in slots}
    table: list[dict[str, int]] = []
    for t, state in enumerate(states, start=1):
        for s in slots:
            sv = state.get(s)
            val = sv.value if sv is not None else NONE_VALUE
            if val != prev_vals[s]:
                current[s] = t
                prev_vals[s] = val
        table.append(dict(current))
    return table


def label_information_turns(
    states: Sequence[Mapping[str, SlotValue]],
    slots: Iterable[str],
) -> dict[str, int]:
    slots = list(slots)
    if not states:
        return {s: 0 for s in slots}
    return information_turn_table(states, slots)[-1]


def load_slot_inventory(path: str | Path) -> tuple[str, ...]:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, list) or not all(isinstance(s, str) for s in data):
        raise CorpusError(f"{path}: slot inventory must be a JSON array of strings")
    return tuple(data)


def _parse_turns(raw_turns, dialogue_id: str) -> list[Turn]:
    turns: list[Turn] = []
    for i, raw in enumerate(raw_turns, start=1):
        if not isinstance(raw, dict) or "machine" not in raw or "user" not in raw:
            raise CorpusError(f"dialogue {dialogue_id!r}: turn {i} needs 'machine' and 'user' strings")
        machine = tokenize(str(raw["machine"]))
        user = tokenize(str(raw["user"]))
        # empty utterances are padded with `none` so every token list is non-empty
        turns.append(Turn(machine_tokens=machine or (NONE_TOKEN,), user_tokens=user or (NONE_TOKEN,), index=i))
    return turns


def _parse_states(raw_states, slots: tuple[str, ...], dialogue_id: str) -> tuple[dict[str, SlotValue], ...]:
    inventory = set(slots)
    states: list[dict[str, SlotValue]] = []
    for t, raw_state in enumerate(raw_states, start=1):
        if not isinstance(raw_state, list):
            raise CorpusError(f"dialogue {dialogue_id!r}: state after turn {t} must be an array")
        state: dict[str, SlotValue] = {}
        for entry in raw_state:
            if not isinstance(entry, dict) or "slot" not in entry or "value" not in entry:
                raise CorpusError(f"dialogue {dialogue_id!r}: state entries need 'slot' and 'value'")
            slot = str(entry["slot"])
            if slot not in inventory:
                raise CorpusError(f"dialogue {dialogue_id!r}: unknown slot {slot!r}")
            value = tokenize(str(entry["value"]))
            if not value:
                value = NONE_VALUE
            state[slot] = SlotValue.from_tokens(slot, value)
        states.append(state)
    return tuple(states)


def load_corpus(path: str | Path, slots: Sequence[str]) -> Corpus:
    """Load a JSON corpus file against a slot inventory.

    Expected schema: an array of ``{"id", "turns": [{"machine", "user"}],
    "states": [[{"slot", "value"}]]}`` where ``states[t]`` is the full
    state after real turn ``t+1``.
    """
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise CorpusError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(data, list):
        raise CorpusError(f"{path}: top level must be a JSON array of dialogues")
    slots = tuple(slots)
    dialogues: list[Dialogue] = []
    for i, raw in enumerate(data):
        if not isinstance(raw, dict):
            raise CorpusError(f"{path}: dialogue #{i} is not an object")
        did = str(raw.get("id", f"#{i}"))
        raw_turns = raw.get("turns")
        raw_states = raw.get("states")
        if not isinstance(raw_turns, list) or not raw_turns:
            raise CorpusError(f"dialogue {did!r}: 'turns' must be a non-empty array")
        if not isinstance(raw_states, list):
            raise CorpusError(f"dialogue {did!r}: 'states' must be an array")
        if len(raw_states) != len(raw_turns):
            raise CorpusError(
                f"dialogue {did!r}: {len(raw_states)} states for {len(raw_turns)} turns"
            )
        turns = pad_sentry(_parse_turns(raw_turns, did))
        states = _parse_states(raw_states, slots, did)
        info = label_information_turns(states, slots)
        dialogues.append(Dialogue(id=did, turns=turns, states=states, info_turns=info))
    return Corpus(dialogues=tuple(dialogues), slots=slots)


def slot_components(slot: str) -> list[str]:
    """Component words of a slot name, e.g. 'hotel-book day' -> hotel, book, day."""
    domain, _, rest = slot.partition("-")
    parts = [domain] + rest.split() if rest else [domain]
    return [p for p in parts if p]


class Vocab:
    """Token <-> dense id bijection with reserved ids and UNK fallback."""

    def __init__(self, tokens: Sequence[str]):
        seen = set()
        ordered: list[str] = []
        for tok in RESERVED_TOKENS:
            ordered.append(tok)
            seen.add(tok)
        for tok in tokens:
            if tok not in seen:
                ordered.append(tok)
                seen.add(tok)
        self.tokens: tuple[str, ...] = tuple(ordered)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(ordered)}
        self.pad_id = self._ids[PAD_TOKEN]
        self.unk_id = self._ids[UNK_TOKEN]
        self.sos_id = self._ids[SOS_TOKEN]
        self.eos_id = self._ids[EOS_TOKEN]
        self.none_id = self._ids[NONE_TOKEN]
        self.dontcare_id = self._ids[DONTCARE_TOKEN]

    @property
    def size(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def lookup_many(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.lookup(t) for t in tokens], dtype=np.int64)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __len__(self) -> int:
        return len(self.tokens)


def build_vocab(corpus: Corpus, min_count: int = 1) -> Vocab:
    """Vocabulary over utterance tokens with frequency >= min_count.

    Slot-name component words and all value tokens seen in states are
    always included, as are the reserved tokens. Everything else falls
    back to UNK at lookup time.
    """
    counts: dict[str, int] = {}
    for d in corpus.dialogues:
        for turn in d.turns:
            for tok in turn.tokens:
                counts[tok] = counts.get(tok, 0) + 1
    frequent = [t for t, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])) if c >= min_count]
    forced: list[str] = []
    for slot in corpus.slots:
        forced.extend(slot_components(slot))
    for d in corpus.dialogues:
        for state in d.states:
            for sv in state.values():
                forced.extend(sv.value)
    extra = sorted(set(forced) - set(frequent) - set(RESERVED_TOKENS))
    return Vocab(frequent + extra)


@dataclass(frozen=True)
class NumericalizedDialogue:
    """Per-turn id views of a dialogue, ready for encoding and copying.

    ``copy_ids`` extend the vocabulary with dialogue-local ids for tokens
    the vocab maps to UNK, so the copy path can still emit them.
    """

    dialogue: Dialogue
    vocab: "Vocab"
    turn_tokens: tuple[tuple[str, ...], ...]
    turn_ids: tuple[np.ndarray, ...]
    copy_ids: tuple[np.ndarray, ...]
    ext_tokens: tuple[str, ...]

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    @property
    def n_turns(self) -> int:
        return len(self.turn_tokens)

    def __post_init__(self):
        ext = {t: self.vocab.size + i for i, t in enumerate(self.ext_tokens)}
        object.__setattr__(self, "_ext_ids", ext)

    def oov_id(self, token: str) -> int | None:
        """Dialogue-local id of a token copyable from this dialogue, else None."""
        return self._ext_ids.get(token)

    def target_id(self, token: str) -> int | None:
        """Extended-vocab id a gold token should be scored at, else None."""
        if token in self.vocab:
            return self.vocab.lookup(token)
        return self.oov_id(token)

    def token_for(self, ext_id: int) -> str:
        if ext_id < self.vocab.size:
            return self.vocab.token(ext_id)
        return self.ext_tokens[ext_id - self.vocab.size]


def numericalize(dialogue: Dialogue, vocab: Vocab) -> NumericalizedDialogue:
    turn_tokens = tuple(t.tokens for t in dialogue.turns)
    turn_ids = tuple(vocab.lookup_many(toks) for toks in turn_tokens)
    ext_tokens: list[str] = []
    ext_map: dict[str, int] = {}
    copy_ids = []
    for toks in turn_tokens:
        ids = np.empty(len(toks), dtype=np.int64)
        for i, tok in enumerate(toks):
            if tok in vocab:
                ids[i] = vocab.lookup(tok)
            else:
                if tok not in ext_map:
                    ext_map[tok] = vocab.size + len(ext_tokens)
                    ext_tokens.append(tok)
                ids[i] = ext_map[tok]
        copy_ids.append(ids)
    return NumericalizedDialogue(
        dialogue=dialogue,
        vocab=vocab,
        turn_tokens=turn_tokens,
        turn_ids=turn_ids,
        copy_ids=tuple(copy_ids),
        ext_tokens=tuple(ext_tokens),
    )


# --- synthetic corpora -----------------------------------------------------

_DOMAINS = ("alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "tau")
_NUM_KINDS = ("count", "stay", "people", "size", "week")
_WORD_KINDS = ("area", "name", "food", "day", "dest")

# chance that a slot is mentioned at all in a given dialogue
_ACTIVE_RATE = 0.75


@dataclass(frozen=True)
class SynthConfig:
    n_dialogues: int
    n_turns_min: int
    n_turns_max: int
    n_slots: int
    vocab_size: int
    distractor_rate: float

    def validate(self) -> None:
        if min(self.n_dialogues, self.n_turns_min, self.n_turns_max, self.n_slots, self.vocab_size) <= 0:
            raise CorpusError("synthetic config values must be positive")
        if self.n_turns_min > self.n_turns_max:
            raise CorpusError("n_turns_min must be <= n_turns_max")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise CorpusError("distractor_rate must be in [0, 1]")


def _synth_slot_names(n_slots: int) -> list[str]:
    names = []
    for i in range(n_slots):
        dom = _DOMAINS[i % len(_DOMAINS)]
        kind = _NUM_KINDS[(i // 2) % len(_NUM_KINDS)] if i % 2 == 0 else _WORD_KINDS[(i // 2) % len(_WORD_KINDS)]
        names.append(f"{dom}-{kind}{i}")
    return names


def _synth_pools(cfg: SynthConfig) -> tuple[list[str], list[str], list[str]]:
    """(fillers, numeric values, word values) carved out of the vocab budget."""
    slot_words = 2 * cfg.n_slots
    budget = cfg.vocab_size - len(RESERVED_TOKENS) - slot_words
    pool_size = max(4, budget // 4)
    n_fillers = budget - 2 * pool_size
    per_pool_demand = (cfg.n_slots + 1) // 2
    if n_fillers < 4 or pool_size < per_pool_demand:
        raise CorpusError(
            f"vocab_size={cfg.vocab_size} too small for {cfg.n_slots} slots with distinct values"
        )
    fillers = [f"w{i}" for i in range(n_fillers)]
    nums = [str(i + 1) for i in range(pool_size)]
    words = [f"v{i}" for i in range(pool_size)]
    return fillers, nums, words


def generate_synthetic(cfg: SynthConfig, seed: int) -> Corpus:
    """Deterministic synthetic corpus of slot-filling dialogues.

    At each active slot's labeled turn the machine utterance asks with the
    slot's name words and the user answers with the bare value token, so
    nothing local to the value says which slot (or turn) it belongs to.
    Other turns may carry bare distractor tokens from the same value pool,
    keeping same-type values confusable across turns and slots.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    slot_names = _synth_slot_names(cfg.n_slots)
    fillers, nums, words = _synth_pools(cfg)
    pool_type = {s: i % 2 for i, s in enumerate(slot_names)}
    slot_pool = {s: (nums if pool_type[s] == 0 else words) for s in slot_names}

    dialogues: list[Dialogue] = []
    for di in range(cfg.n_dialogues):
        n_turns = int(rng.integers(cfg.n_turns_min, cfg.n_turns_max + 1))
        active = [s for s in slot_names if rng.random() < _ACTIVE_RATE]
        used: set[str] = set()
        # a turn answers at most one slot per value pool so the bare answer
        # token stays unambiguous inside its own turn; the confusion the
        # task keeps is across turns
        asked: dict[int, set[int]] = {0: set(), 1: set()}
        plan: dict[str, tuple[int, str]] = {}
        for s in active:
            options = [v for v in slot_pool[s] if v not in used]
            if not options:
                raise CorpusError("value pool exhausted; raise vocab_size")
            value = options[int(rng.integers(len(options)))]
            used.add(value)
            t = int(rng.integers(1, n_turns + 1))
            taken = asked[pool_type[s]]
            if t in taken and len(taken) < n_turns:
                while t in taken:
                    t = t % n_turns + 1
            taken.add(t)
            plan[s] = (t, value)

        turn_user: list[list[str]] = []
        turn_machine: list[list[str]] = []
        for t in range(1, n_turns + 1):
            machine = [fillers[int(rng.integers(len(fillers)))] for _ in range(int(rng.integers(2, 5)))]
            user = [fillers[int(rng.integers(len(fillers)))] for _ in range(int(rng.integers(3, 7)))]
            for s in active:
                info_turn, value = plan[s]
                if info_turn == t:
                    ask = slot_components(s)
                    pos = int(rng.integers(len(machine) + 1))
                    machine[pos:pos] = ask
                    user.insert(int(rng.integers(len(user) + 1)), value)
                elif t not in asked[pool_type[s]] and rng.random() < cfg.distractor_rate:
                    decoys = [v for v in slot_pool[s] if v not in used]
                    if decoys:
                        pos = int(rng.integers(len(user) + 1))
                        user.insert(pos, decoys[int(rng.integers(len(decoys)))])
            turn_machine.append(machine)
            turn_user.append(user)

        turns = pad_sentry(
            [
                Turn(machine_tokens=tuple(m), user_tokens=tuple(u), index=t + 1)
                for t, (m, u) in enumerate(zip(turn_machine, turn_user))
            ]
        )
        states: list[dict[str, SlotValue]] = []
        for t in range(1, n_turns + 1):
            state = {
                s: SlotValue.from_tokens(s, (v,))
                for s, (info_turn, v) in plan.items()
                if info_turn <= t
            }
            states.append(state)
        info = {s: plan[s][0] if s in plan else 0 for s in slot_names}
        dialogues.append(
            Dialogue(id=f"syn{di:04d}", turns=turns, states=tuple(states), info_turns=info)
        )
    return Corpus(dialogues=tuple(dialogues), slots=tuple(slot_names))


def corpus_to_json(corpus: Corpus) -> list[dict]:
    out = []
    for d in corpus.dialogues:
        real_turns = [t for t in d.turns if t.index > 0]
        out.append(
            {
                "id": d.id,
                "turns": [
                    {"machine": detokenize(t.machine_tokens), "user": detokenize(t.user_tokens)}
                    for t in real_turns
                ],
                "states": [
                    [{"slot": s, "value": detokenize(sv.value)} for s, sv in sorted(state.items())]
                    for state in d.states
                ],
            }
        )
    return out


def write_corpus(corpus: Corpus, corpus_path: str | Path, slots_path: str | Path | None = None) -> None:
    with open(corpus_path, "w", encoding="utf-8") as f:
        json.dump(corpus_to_json(corpus), f, indent=1, sort_keys=True)
        f.write("\n")
    if slots_path is not None:
        with open(slots_path, "w", encoding="utf-8") as f:
            json.dump(list(corpus.slots), f, indent=1)
            f.write("\n")
