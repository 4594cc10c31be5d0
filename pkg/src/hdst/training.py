"""Loss terms, target preparation, the training loop, and config files.

Per (dialogue, turn-prefix) example the loss sums, over the full slot
inventory, a length-normalized token cross-entropy plus ``focus_ratio``
times the focus term (negative log of the softmaxed step-summed turn
attention at the labeled turn), plus a weighted mean gate cross-entropy.
A batch is a set of dialogues; its loss is the mean over their prefix
examples, so each dialogue is encoded once and reused for every prefix.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import save_checkpoint
from .corpus import (
    EOS_ID,
    GATE_CLASSES,
    UNK_ID,
    Corpus,
    NumericalizedDialogue,
    SynthConfig,
    Vocab,
    build_vocab,
    information_turn_table,
    numericalize,
)
from .decoder import (
    AttentionTrace,
    DecodeOutput,
    decode_slots,
    flat_context,
    hier_context,
    make_slot_queries,
    slot_query_embeddings,
)
from .encoder import encode_dialogue
from .optim import adam_step, clip_global_norm
from .params import ConfigError, ModelConfig, build_params

__all__ = [
    "TrainConfig",
    "TrainingError",
    "ce_loss",
    "focus_loss",
    "example_loss",
    "PrefixTargets",
    "prepare_dialogue",
    "train",
    "TrainResult",
    "parse_kv_file",
    "train_config_from",
    "synth_config_from",
]

_LOG_FLOOR = 1e-12  # keeps log finite if a probability underflows


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs; defaults follow the full-scale recipe."""

    focus_ratio: float = 0.1
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    epochs: int = 50
    patience: int = 6
    seed: int = 0
    gate_loss_weight: float = 1.0
    teacher_forcing: float = 1.0
    clip_norm: float = 10.0
    min_count: int = 1
    embedding_file: str = ""  # optional pretrained embeddings, keyed by token
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.focus_ratio < 0:
            raise ConfigError("focus_ratio must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.teacher_forcing <= 1.0:
            raise ConfigError("teacher_forcing must be in [0, 1]")
        self.model.validate()


# --- loss terms --------------------------------------------------------------


def _log_prob(t: Tensor) -> Tensor:
    return ag.log(ag.add(t, _LOG_FLOOR))


def ce_loss(step_dists: Sequence[Tensor], target_ids: np.ndarray) -> Tensor:
    """Single-slot mean negative log-likelihood over the gold steps (EOS included)."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    k = len(target_ids)
    if k < 1:
        raise ValueError("ce_loss needs at least one gold step")
    terms = [
        _log_prob(ag.take_per_row(step_dists[i], target_ids[i : i + 1]))
        for i in range(k)
    ]
    return ag.mul(ag.neg(ag.tsum(ag.concat(terms, axis=1))), 1.0 / k)


def focus_loss(trace: AttentionTrace, info_turn: int) -> float:
    """Negative log of the softmaxed, step-summed turn attention at the label."""
    if trace.n_steps < 1:
        raise ValueError("focus_loss needs at least one decoded step")
    summed = trace.summed_beta()
    z = summed - summed.max()
    probs = np.exp(z) / np.exp(z).sum()
    return float(-np.log(max(probs[info_turn], _LOG_FLOOR)))


def _ce_batched(step_dists: list[Tensor], targets: np.ndarray, step_mask: np.ndarray) -> Tensor:
    """Sum over slots of per-slot mean NLL; returns (n_slots, 1) per-slot terms."""
    cols = [
        ag.mul(_log_prob(ag.take_per_row(step_dists[k], targets[:, k])), step_mask[:, k : k + 1])
        for k in range(targets.shape[1])
    ]
    logp = ag.concat(cols, axis=1) if len(cols) > 1 else cols[0]
    lengths = step_mask.sum(axis=1, keepdims=True)
    return ag.mul(ag.neg(ag.tsum(logp, axis=1, keepdims=True)), 1.0 / lengths)


def _focus_batched(step_betas: list[Tensor], step_mask: np.ndarray, info_turns: np.ndarray) -> Tensor:
    """Per-slot focus terms (n_slots, 1); steps beyond a slot's gold length are masked."""
    summed = None
    for k, beta in enumerate(step_betas):
        piece = ag.mul(beta, step_mask[:, k : k + 1])
        summed = piece if summed is None else ag.add(summed, piece)
    probs = ag.softmax(summed)
    return ag.neg(_log_prob(ag.take_per_row(probs, info_turns)))


def _gate_batched(gate_probs: Tensor, gate_ids: np.ndarray) -> Tensor:
    """Mean gate NLL over slots, as a scalar tensor."""
    picked = _log_prob(ag.take_per_row(gate_probs, gate_ids))
    return ag.mul(ag.neg(ag.tsum(picked)), 1.0 / gate_probs.shape[0])


# --- example preparation ------------------------------------------------------


@dataclass
class PrefixTargets:
    """Gold decoding targets for every slot at one turn prefix."""

    turn: int
    target_ids: np.ndarray  # (n_slots, K) extended-vocab ids, EOS included
    step_mask: np.ndarray  # (n_slots, K) 1.0 on real steps
    gate_ids: np.ndarray  # (n_slots,)
    info_turns: np.ndarray  # (n_slots,) labeled turn as of this prefix
    uncopiable: int  # gold tokens absent from vocab and dialogue


@dataclass
class DialogueExample:
    num: NumericalizedDialogue
    prefixes: list[PrefixTargets]


def prefix_targets(
    num: NumericalizedDialogue,
    turn: int,
    slots: Sequence[str],
    info_table: list[dict[str, int]],
) -> PrefixTargets:
    seqs: list[list[int]] = []
    gates: list[int] = []
    uncopiable = 0
    for slot in slots:
        gold = num.dialogue.gold_value(turn, slot)
        ids = []
        for tok in gold.value:
            tid = num.target_id(tok)
            if tid is None:
                tid = UNK_ID
                uncopiable += 1
            ids.append(tid)
        ids.append(EOS_ID)
        seqs.append(ids)
        gates.append(GATE_CLASSES.index(gold.gate))
    k_max = max(len(s) for s in seqs)
    targets = np.full((len(slots), k_max), EOS_ID, dtype=np.int64)
    mask = np.zeros((len(slots), k_max), dtype=np.float64)
    for i, s in enumerate(seqs):
        targets[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    info = np.array([info_table[turn - 1][slot] for slot in slots], dtype=np.int64)
    return PrefixTargets(
        turn=turn,
        target_ids=targets,
        step_mask=mask,
        gate_ids=np.array(gates, dtype=np.int64),
        info_turns=info,
        uncopiable=uncopiable,
    )


def prepare_dialogue(dialogue, vocab: Vocab, slots: Sequence[str]) -> DialogueExample:
    num = numericalize(dialogue, vocab)
    table = information_turn_table(dialogue.states, slots)
    prefixes = [prefix_targets(num, t, slots, table) for t in range(1, dialogue.n_real_turns + 1)]
    return DialogueExample(num=num, prefixes=prefixes)


def example_loss(
    out: DecodeOutput,
    tg: PrefixTargets,
    focus_ratio: float,
    gate_loss_weight: float,
) -> tuple[Tensor, np.ndarray]:
    """Loss of one prefix example; also returns per-slot CE values for diagnostics."""
    per_slot_ce = _ce_batched(out.step_dists, tg.target_ids, tg.step_mask)
    loss = ag.tsum(per_slot_ce)
    if focus_ratio > 0 and out.step_betas:
        per_slot_focus = _focus_batched(out.step_betas, tg.step_mask, tg.info_turns)
        loss = ag.add(loss, ag.mul(ag.tsum(per_slot_focus), focus_ratio))
    if gate_loss_weight > 0:
        loss = ag.add(loss, ag.mul(_gate_batched(out.gate_probs, tg.gate_ids), gate_loss_weight))
    return loss, per_slot_ce.data[:, 0]


# --- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    store_values: dict[str, np.ndarray]
    model_cfg: ModelConfig
    vocab: Vocab
    slots: tuple[str, ...]
    metrics: list[dict]
    best_epoch: int
    best_dev_joint: float
    uncopiable_targets: int
    w_c_initial: float = 0.0
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None

    def final_store(self):
        """Best parameters as a ParamStore (float32)."""
        from .optim import ParamStore

        store = ParamStore(np.float32)
        for name, values in self.store_values.items():
            store.add(name, values)
        return store

    def tracker(self):
        """Best checkpoint wrapped for prediction."""
        from .evaluation import Tracker
        from .params import params_from_store

        mp = params_from_store(self.final_store(), self.model_cfg)
        return Tracker(
            mp=mp,
            cfg=self.model_cfg.eval_mode(),
            vocab=self.vocab,
            slots=self.slots,
            queries=make_slot_queries(self.slots, self.vocab),
        )


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    dev_corpus: Corpus,
    out_dir: str | Path | None = None,
    quiet: bool = True,
) -> TrainResult:
    """Train on `corpus`, select by dev joint accuracy, stop on patience."""
    from .evaluation import Tracker, evaluate_tracker  # late import; evaluation uses decode paths

    cfg.validate()
    if len(corpus) == 0:
        raise TrainingError("empty training corpus")
    rng = np.random.default_rng(cfg.seed)
    vocab = build_vocab(corpus, cfg.min_count)
    mp = build_params(cfg.model, vocab.size, rng, dtype=np.float32)
    if cfg.embedding_file:
        from .params import load_embedding_file

        load_embedding_file(cfg.embedding_file, vocab.tokens, mp.embed)
    w_c_initial = float(mp.w_cover.data[0, 0])
    queries = make_slot_queries(corpus.slots, vocab)
    examples = [prepare_dialogue(d, vocab, corpus.slots) for d in corpus.dialogues]
    uncopiable = sum(p.uncopiable for ex in examples for p in ex.prefixes)

    metrics: list[dict] = []
    best_values = mp.store.clone_values()
    best_joint = -1.0
    best_epoch = 0
    bad_epochs = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        n_examples = 0
        for bi, batch in enumerate(_batches(order, cfg.batch_size)):
            losses: list[Tensor] = []
            for di in batch:
                ex = examples[int(di)]
                enc = None
                if cfg.model.mode != "flat":
                    enc = encode_dialogue(ex.num, mp, cfg.model, train=True, rng=rng)
                slot_emb = slot_query_embeddings(queries, mp.embed)
                for tg in ex.prefixes:
                    if cfg.model.mode == "flat":
                        ctx = flat_context(ex.num, tg.turn, mp, cfg.model, train=True, rng=rng)
                    else:
                        ctx = hier_context(enc, tg.turn, mp, cfg.model.mode)
                    out = decode_slots(
                        ctx, queries, slot_emb, mp, cfg.model,
                        teacher_ids=tg.target_ids,
                        teacher_force_prob=cfg.teacher_forcing,
                        train=True, rng=rng, record_traces=False,
                    )
                    loss, per_slot = example_loss(out, tg, cfg.focus_ratio, cfg.gate_loss_weight)
                    if not np.isfinite(loss.data):
                        bad = np.flatnonzero(~np.isfinite(per_slot))
                        slot = corpus.slots[int(bad[0])] if len(bad) else "<combined loss terms>"
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, batch {bi}, "
                            f"dialogue {ex.num.dialogue.id!r}, slot {slot!r}"
                        )
                    losses.append(loss)
            total = losses[0]
            for term in losses[1:]:
                total = ag.add(total, term)
            batch_loss = ag.mul(total, 1.0 / len(losses))
            epoch_loss += float(total.data)
            n_examples += len(losses)
            batch_loss.backward()
            clip_global_norm(mp.store, cfg.clip_norm)
            adam_step(mp.store, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

        tracker = Tracker(
            mp=mp, cfg=cfg.model.eval_mode(), vocab=vocab, slots=corpus.slots, queries=queries
        )
        dev = evaluate_tracker(tracker, dev_corpus)
        train_loss = epoch_loss / max(n_examples, 1)
        w_c = float(mp.w_cover.data[0, 0])
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "dev_joint_acc": dev["joint_acc"],
            "dev_focus_acc": dev["focus_acc"],
            "w_c": w_c,
        }
        metrics.append(row)
        if not quiet:
            print(
                f"epoch {epoch:3d}  loss {train_loss:8.4f}  dev joint {dev['joint_acc']:.4f}  "
                f"dev focus {dev['focus_acc']:.4f}  w_c {w_c:+.4f}  ({time.time() - t0:.1f}s)"
            )
        if dev["joint_acc"] > best_joint:
            best_joint = dev["joint_acc"]
            best_epoch = epoch
            best_values = mp.store.clone_values()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    result = TrainResult(
        store_values=best_values,
        model_cfg=cfg.model,
        vocab=vocab,
        slots=corpus.slots,
        metrics=metrics,
        best_epoch=best_epoch,
        best_dev_joint=best_joint,
        uncopiable_targets=uncopiable,
        w_c_initial=w_c_initial,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out_dir / "checkpoint.npz"
        result.metrics_path = out_dir / "metrics.csv"
        mp.store.load_values(best_values)
        save_checkpoint(
            result.checkpoint_path,
            mp.store,
            {
                "seed": cfg.seed,
                "model": cfg.model.__dict__,
                "vocab": list(vocab.tokens),
                "slots": list(corpus.slots),
                "best_epoch": best_epoch,
            },
        )
        write_metrics_csv(result.metrics_path, metrics)
    return result


def write_metrics_csv(path: str | Path, metrics: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "dev_joint_acc", "dev_focus_acc", "w_c"])
        for row in metrics:
            writer.writerow(
                [
                    row["epoch"],
                    f"{row['train_loss']:.6f}",
                    f"{row['dev_joint_acc']:.6f}",
                    f"{row['dev_focus_acc']:.6f}",
                    f"{row['w_c']:.6f}",
                ]
            )


# --- config files -------------------------------------------------------------


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(value: str, typ):
    if typ is bool:
        return value.lower() in ("1", "true", "yes", "on")
    return typ(value)


def train_config_from(kv: dict[str, str]) -> TrainConfig:
    """Build a TrainConfig (and nested model config) from flat keys."""
    model_names = {f.name for f in fields(ModelConfig)}
    train_names = {f.name for f in fields(TrainConfig)} - {"model"}
    model_kwargs = {}
    train_kwargs = {}
    for key, value in kv.items():
        if key in model_names:
            default = ModelConfig.__dataclass_fields__[key].default
            model_kwargs[key] = _coerce(value, type(default))
        elif key in train_names:
            default = TrainConfig.__dataclass_fields__[key].default
            train_kwargs[key] = _coerce(value, type(default))
        elif key in _SYNTH_KEYS:
            continue  # generator settings may share the file
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = TrainConfig(model=ModelConfig(**model_kwargs), **train_kwargs)
    cfg.validate()
    return cfg


_SYNTH_KEYS = ("n_dialogues", "n_turns_min", "n_turns_max", "n_slots", "vocab_size", "distractor_rate")


def synth_config_from(kv: dict[str, str]) -> SynthConfig:
    missing = [k for k in _SYNTH_KEYS if k not in kv]
    if missing:
        raise ConfigError(f"generator config missing keys: {', '.join(missing)}")
    cfg = SynthConfig(
        n_dialogues=int(kv["n_dialogues"]),
        n_turns_min=int(kv["n_turns_min"]),
        n_turns_max=int(kv["n_turns_max"]),
        n_slots=int(kv["n_slots"]),
        vocab_size=int(kv["vocab_size"]),
        distractor_rate=float(kv["distractor_rate"]),
    )
    cfg.validate()
    return cfg
