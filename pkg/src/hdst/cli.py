"""Command-line entry points: gen, train, eval, dump-attn, gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import corpus as cp
from .checkpoint import CheckpointError
from .evaluation import (
    build_info_turn_index,
    dump_attention,
    predict_corpus,
    report_from,
    tracker_from_checkpoint,
)
from .params import ConfigError, ModelConfig, build_params
from .training import (
    TrainingError,
    parse_kv_file,
    prepare_dialogue,
    synth_config_from,
    train,
    train_config_from,
)

KNOWN_ERRORS = (cp.CorpusError, ConfigError, CheckpointError, TrainingError, ag.GraphError, ag.ShapeError, OSError)


def _load_corpus_args(corpus_path: str, slots_path: str) -> cp.Corpus:
    slots = cp.load_slot_inventory(slots_path)
    return cp.load_corpus(corpus_path, slots)


def cmd_gen(args) -> int:
    kv = parse_kv_file(args.config)
    synth = synth_config_from(kv)
    seed = args.seed if args.seed is not None else int(kv.get("seed", 0))
    corpus = cp.generate_synthetic(synth, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cp.write_corpus(corpus, out / "corpus.json", out / "slots.json")
    n_turns = sum(d.n_real_turns for d in corpus.dialogues)
    print(f"wrote {len(corpus)} dialogues ({n_turns} turns, {len(corpus.slots)} slots) to {out}")
    return 0


def cmd_train(args) -> int:
    kv = parse_kv_file(args.config)
    cfg = train_config_from(kv)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    train_corpus = _load_corpus_args(args.train, args.slots)
    dev_corpus = _load_corpus_args(args.dev, args.slots)
    result = train(cfg, train_corpus, dev_corpus, out_dir=args.out, quiet=args.quiet)
    if result.uncopiable_targets:
        print(
            f"note: {result.uncopiable_targets} gold tokens were neither in the vocabulary "
            "nor copyable and trained against <unk>",
            file=sys.stderr,
        )
    print(
        f"best epoch {result.best_epoch} (dev joint {result.best_dev_joint:.4f}); "
        f"checkpoint: {result.checkpoint_path}, metrics: {result.metrics_path}"
    )
    return 0


def cmd_eval(args) -> int:
    corpus = _load_corpus_args(args.corpus, args.slots)
    info_index = build_info_turn_index(corpus)
    runs = []
    for path in args.checkpoint:
        records, traces = predict_corpus(path, corpus)
        report = report_from(records, traces, info_index, corpus.slots)
        report["checkpoint"] = str(path)
        runs.append(report)
    if len(runs) == 1:
        out = dict(runs[0])
    else:
        focus_vals = [r["focus_acc"] for r in runs if r["focus_acc"] is not None]
        out = {
            "joint_acc": float(np.mean([r["joint_acc"] for r in runs])),
            "focus_acc": float(np.mean(focus_vals)) if focus_vals else None,
            "focus_acc_mentioned": None,
            "n_turns": runs[0]["n_turns"],
            "n_slots": runs[0]["n_slots"],
            "per_slot_acc": {
                slot: float(np.mean([r["per_slot_acc"][slot] for r in runs]))
                for slot in corpus.slots
            },
            "runs": runs,
        }
        mentioned = [r["focus_acc_mentioned"] for r in runs if r["focus_acc_mentioned"] is not None]
        if mentioned:
            out["focus_acc_mentioned"] = float(np.mean(mentioned))
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote report to {args.out}")
    else:
        print(text)
    return 0


def cmd_dump_attn(args) -> int:
    corpus = _load_corpus_args(args.corpus, args.slots)
    tracker = tracker_from_checkpoint(args.checkpoint)
    n = dump_attention(tracker, corpus, args.out)
    print(f"wrote {n} attention records to {args.out}")
    return 0


def gradcheck_suite(seed: int = 0) -> list[tuple[str, float, float]]:
    """Finite-difference checks per op plus the full model loss (float64)."""
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return ag.Tensor(rng.normal(size=shape) * 0.5, requires_grad=True, dtype=np.float64)

    results: list[tuple[str, float, float]] = []

    def check(name, f, params, bound=1e-4):
        results.append((name, ag.grad_check(f, params, epsilon=1e-5), bound))

    a, b = leaf(3, 4), leaf(4, 2)
    check("matmul", lambda: ag.tsum(ag.matmul(a, b)), [("a", a), ("b", b)])
    bias = leaf(1, 4)
    check("add_broadcast", lambda: ag.tsum(ag.add(a, bias)), [("a", a), ("bias", bias)])
    c = leaf(3, 4)
    check("mul", lambda: ag.tsum(ag.mul(a, c)), [("a", a), ("c", c)])
    check("concat_slice", lambda: ag.tsum(ag.slice_cols(ag.concat([a, c], axis=1), 2, 6)), [("a", a), ("c", c)])
    check("transpose", lambda: ag.tsum(ag.matmul(ag.transpose(a), a)), [("a", a)])
    check("sigmoid", lambda: ag.tsum(ag.sigmoid(a)), [("a", a)])
    check("tanh", lambda: ag.tsum(ag.tanh(a)), [("a", a)])
    check("exp", lambda: ag.tsum(ag.exp(a)), [("a", a)])
    pos = ag.Tensor(np.abs(rng.normal(size=(3, 3))) + 0.5, requires_grad=True, dtype=np.float64)
    check("log", lambda: ag.tsum(ag.log(pos)), [("pos", pos)])
    check("sum_axis", lambda: ag.tsum(ag.mul(ag.tsum(a, axis=1, keepdims=True), 2.0)), [("a", a)])
    check("mean", lambda: ag.mean(ag.mul(a, a)), [("a", a)])
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    w = ag.Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    check("masked_softmax", lambda: ag.tsum(ag.mul(ag.masked_softmax(a, mask), w)), [("a", a)])
    check("max_pool_rows", lambda: ag.tsum(ag.mul(ag.max_pool_rows(a), 2.0)), [("a", a)])
    table = leaf(6, 3)
    ids = np.array([0, 2, 5, 2])
    check("embedding_lookup", lambda: ag.tsum(ag.mul(ag.embedding_lookup(table, ids), 1.5)), [("table", table)])
    cols = np.array([1, 0, 2])
    check("take_per_row", lambda: ag.tsum(ag.take_per_row(a, np.array([1, 0, 2]))), [("a", a)])
    sc = leaf(2, 5)
    check(
        "scatter_add_cols",
        lambda: ag.tsum(ag.mul(ag.scatter_add_cols(sc, np.array([0, 3, 3, 1, 2]), 4), 2.0)),
        [("sc", sc)],
    )

    def dropout_fixed():
        r = np.random.default_rng(1234)
        return ag.tsum(ag.dropout(a, 0.4, train=True, rng=r))

    check("dropout", dropout_fixed, [("a", a)])

    zg, cg = leaf(2, 8), leaf(2, 2)
    check("lstm_gates", lambda: ag.tsum(ag.mul(ag.lstm_gates(zg, cg), 1.5)), [("z", zg), ("c", cg)])

    from .nn import LSTMParams, lstm_cell

    lp = LSTMParams(wx=leaf(3, 8), wh=leaf(2, 8), b=leaf(1, 8))
    x, h0, c0 = leaf(2, 3), leaf(2, 2), leaf(2, 2)

    def lstm_f():
        h, cc = lstm_cell(x, h0, c0, lp)
        return ag.tsum(ag.mul(h, cc))

    check("lstm_cell", lstm_f, [("wx", lp.wx), ("wh", lp.wh), ("b", lp.b), ("x", x), ("h0", h0), ("c0", c0)])

    # full loss over a 2-turn dialogue, cover mode, focus term on
    from .decoder import decode_slots, hier_context, make_slot_queries, slot_query_embeddings
    from .encoder import encode_dialogue
    from .training import example_loss

    synth = cp.SynthConfig(
        n_dialogues=1, n_turns_min=2, n_turns_max=2, n_slots=2, vocab_size=40, distractor_rate=0.3
    )
    corpus = cp.generate_synthetic(synth, seed=3)
    vocab = cp.build_vocab(corpus)
    cfg = ModelConfig(
        mode="cover", encoder_init="last", hidden_dim=3, embed_dim=3,
        n_layers=1, dropout=0.0, max_decode_len=4,
    )
    mp = build_params(cfg, vocab.size, np.random.default_rng(seed), dtype=np.float64)
    queries = make_slot_queries(corpus.slots, vocab)
    ex = prepare_dialogue(corpus.dialogues[0], vocab, corpus.slots)

    def full_loss():
        enc = encode_dialogue(ex.num, mp, cfg)
        emb = slot_query_embeddings(queries, mp.embed)
        total = None
        for tg in ex.prefixes:
            ctx = hier_context(enc, tg.turn, mp, cfg.mode)
            out = decode_slots(ctx, queries, emb, mp, cfg, teacher_ids=tg.target_ids, record_traces=False)
            loss, _ = example_loss(out, tg, focus_ratio=0.1, gate_loss_weight=1.0)
            total = loss if total is None else ag.add(total, loss)
        return total

    results.append(("full_model_loss", ag.grad_check(full_loss, list(mp.store.items()), epsilon=1e-5), 1e-3))
    return results


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(seed=args.seed if args.seed is not None else 0)
    failed = False
    rows = []
    for name, err, bound in results:
        ok = bool(err < bound)
        failed |= not ok
        rows.append({"op": name, "max_rel_error": float(err), "bound": bound, "ok": ok})
        print(f"{name:20s} {err:12.3e}  (< {bound:.0e})  {'ok' if ok else 'FAIL'}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return 1
    print("all gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdst", description="Hierarchical-copy dialogue state tracker")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--config", required=True, help="key=value file with generator settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=".", help="output directory for corpus.json and slots.json")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a tracker")
    p.add_argument("--config", required=True, help="key=value file with training settings")
    p.add_argument("--train", required=True, help="training corpus JSON")
    p.add_argument("--dev", required=True, help="development corpus JSON")
    p.add_argument("--slots", required=True, help="slot inventory JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="joint/focus accuracy report as JSON")
    p.add_argument("--checkpoint", required=True, nargs="+", help="one or more checkpoints; means reported over several")
    p.add_argument("--corpus", required=True)
    p.add_argument("--slots", required=True)
    p.add_argument("--seed", type=int, default=None, help="unused; accepted for uniformity")
    p.add_argument("--out", default=None, help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-attn", help="line-delimited JSON attention traces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--slots", required=True)
    p.add_argument("--seed", type=int, default=None, help="unused; accepted for uniformity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("gradcheck", help="finite-difference validation of every op and the full loss")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="write results as JSON")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KNOWN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
