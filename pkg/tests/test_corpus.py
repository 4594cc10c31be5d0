import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdst import corpus as cp

SAMPLE_DIR = Path(__file__).resolve().parent.parent / "data" / "sample"


@pytest.fixture(scope="module")
def sample():
    slots = cp.load_slot_inventory(SAMPLE_DIR / "slots.json")
    return cp.load_corpus(SAMPLE_DIR / "corpus.json", slots)


def sv(slot, value):
    return cp.SlotValue.from_tokens(slot, cp.tokenize(value))


def test_tokenize_lowercases_and_splits_punctuation():
    assert cp.tokenize("The East side, please!") == ("the", "east", "side", ",", "please", "!")


def test_tokenize_detokenize_roundtrip_modulo_whitespace():
    for text in ["east", "holy trinity church", "2 nights, tuesday", "LONDON  liverpool street"]:
        tokens = cp.tokenize(text)
        rebuilt = cp.detokenize(tokens)
        assert rebuilt.replace(" ", "") == text.lower().replace(" ", "")
        assert cp.tokenize(rebuilt) == tokens


def test_sample_dialogue_states_and_labels(sample):
    d = sample.dialogues[0]
    # value east enters the state after turn 3
    assert d.states[2]["hotel-area"].value == ("east",)
    assert d.info_turns["hotel-area"] == 3
    assert d.info_turns["hotel-book day"] == 4
    assert d.info_turns["hotel-book people"] == 5
    assert d.info_turns["hotel-parking"] == 0  # never mentioned -> sentry


def test_sentry_padding(sample):
    d = sample.dialogues[0]
    assert len(d.turns) == 6
    assert d.turns[0] == cp.SENTRY_TURN
    assert d.turns[0].tokens == ("none", "none")
    assert [t.index for t in d.turns] == list(range(6))


def test_pad_sentry_idempotent_and_one_turn():
    one = [cp.Turn(("hi",), ("hello",), 1)]
    padded = cp.pad_sentry(one)
    assert len(padded) == 2
    assert cp.pad_sentry(padded) == padded


def test_empty_utterance_padded_with_none(sample):
    d = sample.dialogues[0]
    assert d.turns[1].machine_tokens == ("none",)
    assert d.turns[1].user_tokens[0] == "i"


def test_label_last_change_wins(sample):
    # hotel-area goes centre (turn 1) -> east (turn 2)
    d = sample.dialogues[1]
    assert d.info_turns["hotel-area"] == 2
    assert d.info_turns["hotel-book stay"] == 2
    assert d.info_turns["hotel-parking"] == 0


def test_label_information_turns_by_hand():
    slots = ["a-x", "a-y"]
    states = [
        {"a-x": sv("a-x", "centre")},
        {"a-x": sv("a-x", "centre")},
        {"a-x": sv("a-x", "east"), "a-y": sv("a-y", "2")},
    ]
    labels = cp.label_information_turns(states, slots)
    assert labels == {"a-x": 3, "a-y": 3}
    table = cp.information_turn_table(states, slots)
    assert table[0] == {"a-x": 1, "a-y": 0}
    assert table[1] == {"a-x": 1, "a-y": 0}


def test_label_deleted_slot_points_at_deletion_turn():
    slots = ["a-x"]
    states = [{"a-x": sv("a-x", "east")}, {}]
    assert cp.label_information_turns(states, slots) == {"a-x": 2}


def test_single_turn_single_slot_labels_turn_one(tmp_path):
    corpus_file = tmp_path / "c.json"
    corpus_file.write_text(
        json.dumps([{"id": "d1", "turns": [{"machine": "hi", "user": "east please"}],
                     "states": [[{"slot": "hotel-area", "value": "east"}]]}])
    )
    corpus = cp.load_corpus(corpus_file, ["hotel-area"])
    assert corpus.dialogues[0].info_turns["hotel-area"] == 1


def test_load_empty_corpus(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("[]")
    corpus = cp.load_corpus(p, ["hotel-area"])
    assert len(corpus) == 0


def test_load_rejects_unknown_slot(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(
        json.dumps([{"id": "d9", "turns": [{"machine": "", "user": "hi"}],
                     "states": [[{"slot": "hotel-wifi", "value": "yes"}]]}])
    )
    with pytest.raises(cp.CorpusError, match="hotel-wifi"):
        cp.load_corpus(p, ["hotel-area"])


def test_load_reports_dialogue_id_on_schema_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps([{"id": "d42", "turns": [{"machine": "x"}], "states": [[]]}]))
    with pytest.raises(cp.CorpusError, match="d42"):
        cp.load_corpus(p, ["hotel-area"])


def test_load_rejects_state_turn_mismatch(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps([{"id": "d7", "turns": [{"machine": "", "user": "hi"}], "states": []}]))
    with pytest.raises(cp.CorpusError, match="d7"):
        cp.load_corpus(p, ["hotel-area"])


class TestVocab:
    def test_reserved_tokens_first_and_dense(self, sample):
        vocab = cp.build_vocab(sample, min_count=1)
        assert vocab.tokens[:6] == cp.RESERVED_TOKENS
        assert [vocab.lookup(t) for t in vocab.tokens] == list(range(vocab.size))

    def test_bijection(self, sample):
        vocab = cp.build_vocab(sample, min_count=1)
        assert len(set(vocab.tokens)) == vocab.size
        for i, tok in enumerate(vocab.tokens):
            assert vocab.token(vocab.lookup(tok)) == tok
            assert vocab.lookup(vocab.token(i)) == i

    def test_min_count_threshold_falls_back_to_unk(self, sample):
        vocab = cp.build_vocab(sample, min_count=2)
        # "quiet" occurs once in the sample and is not a value or slot word
        assert "quiet" not in vocab
        assert vocab.lookup("quiet") == vocab.unk_id

    def test_value_and_slot_tokens_always_kept(self, sample):
        vocab = cp.build_vocab(sample, min_count=50)
        for tok in ("east", "tuesday", "hotel", "area", "parking", "2", "3"):
            assert tok in vocab

    def test_lookup_total(self, sample):
        vocab = cp.build_vocab(sample)
        assert vocab.lookup("zzz-never-seen") == vocab.unk_id

    def test_empty_token_stream_reserved_only(self):
        vocab = cp.Vocab([])
        assert vocab.size == 6

    def test_mention_count_vocab(self):
        # 10-token corpus, distinct tokens + reserved
        corpus = cp.Corpus(
            dialogues=(
                cp.Dialogue(
                    id="d",
                    turns=cp.pad_sentry([cp.Turn(("a", "b", "c", "a"), ("d", "e", "a", "b", "f", "g"), 1)]),
                    states=({},),
                    info_turns={"x-y": 0},
                ),
            ),
            slots=("x-y",),
        )
        vocab = cp.build_vocab(corpus, min_count=1)
        # 7 distinct utterance tokens + x + y slot words + 6 reserved
        assert vocab.size == 6 + 7 + 2


def test_slot_components():
    assert cp.slot_components("hotel-area") == ["hotel", "area"]
    assert cp.slot_components("hotel-book day") == ["hotel", "book", "day"]
    assert cp.slot_components("taxi") == ["taxi"]


class TestNumericalize:
    def test_copy_ids_extend_vocab(self, sample):
        vocab = cp.build_vocab(cp.Corpus(dialogues=sample.dialogues[:1], slots=sample.slots))
        num = cp.numericalize(sample.dialogues[1], vocab)
        assert "4" not in vocab  # only occurs in the second dialogue
        oov = num.oov_id("4")
        assert oov is not None and oov >= vocab.size
        assert num.token_for(oov) == "4"
        assert num.target_id("4") == oov
        assert num.target_id("east") == vocab.lookup("east")

    def test_in_vocab_tokens_keep_their_ids(self, sample):
        vocab = cp.build_vocab(sample)
        num = cp.numericalize(sample.dialogues[0], vocab)
        for ids, copies, toks in zip(num.turn_ids, num.copy_ids, num.turn_tokens):
            for i, tok in enumerate(toks):
                if tok in vocab:
                    assert copies[i] == ids[i] == vocab.lookup(tok)


class TestSynthetic:
    CFG = cp.SynthConfig(
        n_dialogues=20, n_turns_min=2, n_turns_max=5, n_slots=4, vocab_size=80, distractor_rate=0.4
    )

    def test_deterministic(self):
        a = cp.generate_synthetic(self.CFG, seed=7)
        b = cp.generate_synthetic(self.CFG, seed=7)
        assert cp.corpus_to_json(a) == cp.corpus_to_json(b)

    def test_different_seed_differs(self):
        a = cp.generate_synthetic(self.CFG, seed=7)
        b = cp.generate_synthetic(self.CFG, seed=8)
        assert cp.corpus_to_json(a) != cp.corpus_to_json(b)

    def test_labels_cross_check_against_labeler(self):
        corpus = cp.generate_synthetic(
            cp.SynthConfig(n_dialogues=100, n_turns_min=2, n_turns_max=6, n_slots=5,
                           vocab_size=120, distractor_rate=0.5),
            seed=13,
        )
        for d in corpus.dialogues:
            assert cp.label_information_turns(d.states, corpus.slots) == dict(d.info_turns)

    def test_value_token_planted_exactly_once(self):
        corpus = cp.generate_synthetic(self.CFG, seed=3)
        for d in corpus.dialogues:
            for slot, t in d.info_turns.items():
                if t == 0:
                    continue
                value = d.states[-1][slot].value[0] if slot in d.states[-1] else None
                if value is None:
                    continue
                hits = sum(turn.tokens.count(value) for turn in d.turns)
                assert hits == 1, f"{value} appears {hits} times in {d.id}"
                assert value in d.turns[t].tokens

    def test_no_distractors_single_slot(self):
        cfg = cp.SynthConfig(n_dialogues=10, n_turns_min=2, n_turns_max=3, n_slots=1,
                             vocab_size=60, distractor_rate=0.0)
        corpus = cp.generate_synthetic(cfg, seed=5)
        pool = set(str(i + 1) for i in range(60))
        for d in corpus.dialogues:
            planted = {sv.value[0] for sv in d.states[-1].values()}
            in_utterances = {t for turn in d.turns for t in turn.tokens if t in pool}
            assert in_utterances == planted

    def test_infeasible_vocab_rejected(self):
        with pytest.raises(cp.CorpusError):
            cp.generate_synthetic(
                cp.SynthConfig(n_dialogues=1, n_turns_min=1, n_turns_max=1, n_slots=10,
                               vocab_size=20, distractor_rate=0.0),
                seed=0,
            )

    def test_roundtrip_through_json(self, tmp_path):
        corpus = cp.generate_synthetic(self.CFG, seed=7)
        cp.write_corpus(corpus, tmp_path / "c.json", tmp_path / "s.json")
        slots = cp.load_slot_inventory(tmp_path / "s.json")
        loaded = cp.load_corpus(tmp_path / "c.json", slots)
        assert slots == corpus.slots
        assert len(loaded) == len(corpus)
        for a, b in zip(loaded.dialogues, corpus.dialogues):
            assert a.turns == b.turns
            assert dict(a.info_turns) == dict(b.info_turns)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.dictionaries(
            st.sampled_from(["s-a", "s-b", "s-c"]),
            st.sampled_from(["east", "west", "2", "none"]),
            max_size=3,
        ),
        min_size=0,
        max_size=6,
    )
)
def test_labeler_properties(raw_states):
    slots = ["s-a", "s-b", "s-c"]
    states = [
        {s: cp.SlotValue.from_tokens(s, (v,)) for s, v in st_map.items()}
        for st_map in raw_states
    ]
    labels = cp.label_information_turns(states, slots)
    assert set(labels) == set(slots)
    for s, t in labels.items():
        assert 0 <= t <= len(states)
        ever_set = any(s in state and state[s].value != (cp.NONE_TOKEN,) for state in states)
        if not ever_set:
            # a slot that never leaves `none` can only be labeled 0
            explicit_none = any(s in state for state in states)
            if not explicit_none:
                assert t == 0
    # labeling a prefix never looks ahead
    table = cp.information_turn_table(states, slots)
    for t in range(1, len(states) + 1):
        assert cp.label_information_turns(states[:t], slots) == table[t - 1]
