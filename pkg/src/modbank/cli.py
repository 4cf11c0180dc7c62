"""Command-line harness for the full experiment pipeline."""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import checkpoint, evalqa
from .bank import MemoryBank, MemoryInstrument
from .config import ConfigError, RunConfig, load_config
from .data import gen_synthetic_corpus, load_jsonl_corpus, save_jsonl_corpus
from .model import ModelBundle
from .trainer import TrainConfig, meta_train, pretrain_base


class MetricsWriter:
    """Serialized newline-delimited JSON sink; quiet when no path is set."""

    def __init__(self, path):
        self.fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, record):
        if self.fh is not None:
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _load_run(args):
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.metrics_out:
        config.metrics_path = args.metrics_out
    return config


def _train_config(config: RunConfig) -> TrainConfig:
    return TrainConfig(
        k_train=config.k_train,
        n_qa=config.n_qa,
        dropout_p=config.dropout_p,
        min_mode=config.min_mode,
        lr=config.lr,
        warmup_epochs=config.warmup_epochs,
        epochs=config.epochs,
        seed=config.seed,
    )


def cmd_gen_corpus(args):
    config = _load_run(args)
    corpus = gen_synthetic_corpus(
        seed=config.seed if args.corpus_seed is None else args.corpus_seed,
        n_docs=args.n_docs,
        facts_per_doc=args.facts_per_doc,
        split=args.split,
        key_prefix=args.key_prefix,
    )
    save_jsonl_corpus(corpus, args.out)
    print(f"wrote {len(corpus.documents)} documents, "
          f"{len(corpus.qa_pairs)} QA pairs to {args.out}")


def cmd_pretrain_base(args):
    config = _load_run(args)
    metrics = MetricsWriter(config.metrics_path)
    bundle = ModelBundle(config)
    if args.corpus:
        corpus = load_jsonl_corpus(args.corpus)
    else:
        # pretraining facts live in a disjoint key space from any stream
        # the marker keeps pretrain keys disjoint from every natural key
        # while preserving key lengths, hence fact positions
        corpus = gen_synthetic_corpus(
            seed=config.seed + 777, n_docs=args.n_docs, split="pretrain",
            key_marker="x",
        )
    pretrain_base(
        bundle.lm, corpus, steps=config.pretrain_steps, lr=config.pretrain_lr,
        seed=config.seed, log=metrics.write,
        amortizer=bundle.amortizer, expander=bundle.expander,
        qencoder=bundle.qencoder, aggregator=bundle.aggregator,
    )
    bundle.base_pretrained = True
    checkpoint.save_bundle(bundle, config.checkpoint_path)
    metrics.close()
    print(f"pretrained base LM saved to {config.checkpoint_path}")


def cmd_train(args):
    config = _load_run(args)
    metrics = MetricsWriter(config.metrics_path)
    bundle = checkpoint.load_bundle(config.checkpoint_path, config)
    if not bundle.base_pretrained:
        print("error: checkpoint base LM is not pretrained", file=sys.stderr)
        return 1
    corpus = load_jsonl_corpus(args.corpus or config.corpus_path)
    meta_train(bundle, corpus, _train_config(config), log=metrics.write)
    checkpoint.save_bundle(bundle, config.checkpoint_path)
    metrics.close()
    print(f"trained bundle saved to {config.checkpoint_path}")


def cmd_adapt(args):
    config = _load_run(args)
    bundle = checkpoint.load_bundle(config.checkpoint_path, config)
    stream = load_jsonl_corpus(args.corpus or config.corpus_path, split="stream")
    before = bundle.checksums()
    t0 = time.time()
    bank = evalqa.adapt_stream(
        bundle, stream, bank_limit=config.bank_limit,
        reduction=config.reduction, seed=config.seed,
    )
    elapsed = time.time() - t0
    assert bundle.checksums() == before, "adaptation must not mutate parameters"
    bank.save(config.bank_path)
    metrics = MetricsWriter(config.metrics_path)
    metrics.write({"metric": "wall_time", "value": elapsed, "cohort": "adapt", "step": len(bank)})
    metrics.close()
    print(f"adapted {len(stream.documents)} documents; bank size {len(bank)} "
          f"saved to {config.bank_path} ({elapsed:.1f}s)")


def cmd_eval(args):
    config = _load_run(args)
    bundle = checkpoint.load_bundle(config.checkpoint_path, config)
    bank = MemoryBank.load(config.bank_path)
    corpus = load_jsonl_corpus(args.corpus or config.corpus_path, split="eval")
    instrument = MemoryInstrument()
    records, em, f1 = evalqa.evaluate(
        bundle, bank, corpus.qa_pairs, m_tokens=config.m_tokens,
        instrument=instrument,
    )
    metrics = MetricsWriter(config.metrics_path)
    for r in records:
        metrics.write({"metric": "em", "value": r["em"], "cohort": "eval", "step": r["step"]})
        metrics.write({"metric": "f1", "value": r["f1"], "cohort": "eval", "step": r["step"]})
    metrics.write({"metric": "peak_attention_elements",
                   "value": instrument.peak_attention_elements,
                   "cohort": "eval", "step": len(records)})
    metrics.close()
    print(f"EM {em:.4f}  F1 {f1:.4f} over {len(records)} questions "
          f"(peak attention elements {instrument.peak_attention_elements})")


def cmd_retention(args):
    config = _load_run(args)
    bundle = checkpoint.load_bundle(config.checkpoint_path, config)
    stream = load_jsonl_corpus(args.corpus or config.corpus_path, split="stream")
    curve = evalqa.retention_curve(
        bundle, stream, probe_size=args.probe_size, increment=args.increment,
        m_tokens=config.m_tokens,
    )
    metrics = MetricsWriter(config.metrics_path)
    for rec in curve:
        metrics.write({"metric": "retention_ratio", "value": rec["retention"],
                       "cohort": "mac", "step": rec["streamed"]})
        print(f"streamed {rec['streamed']:5d}  F1 {rec['f1']:.4f}  "
              f"retention {rec['retention']:.4f}")
    if args.baseline:
        straw = evalqa.OnlinePrefixFinetuner(bundle.lm, config.n_tokens)
        straw_curve = straw.retention_curve(stream, args.probe_size, args.increment)
        for rec in straw_curve:
            metrics.write({"metric": "retention_ratio", "value": rec["retention"],
                           "cohort": "prefix-finetune", "step": rec["streamed"]})
            print(f"[prefix-finetune] streamed {rec['streamed']:5d}  "
                  f"F1 {rec['f1']:.4f}  retention {rec['retention']:.4f}")
    metrics.close()


def cmd_lm_eval(args):
    config = _load_run(args)
    bundle = checkpoint.load_bundle(config.checkpoint_path, config)
    bank = MemoryBank.load(config.bank_path)
    adapted = load_jsonl_corpus(args.corpus or config.corpus_path)
    unseen = load_jsonl_corpus(args.unseen_corpus)
    means, records = evalqa.lm_eval(
        bundle, bank, adapted.documents, unseen.documents,
        split_frac=args.split_frac, m_tokens=config.m_tokens,
    )
    metrics = MetricsWriter(config.metrics_path)
    for r in records:
        metrics.write(r)
    metrics.close()
    print(f"perplexity adapted {means['adapted']:.4f}  unseen {means['unseen']:.4f}")


def cmd_bank(args):
    config = _load_run(args)
    bank = MemoryBank.load(config.bank_path)
    if args.bank_cmd == "inspect":
        for i, e in enumerate(bank.entries):
            norm = float(np.linalg.norm(e.modulation.tokens.data))
            print(f"{i:5d}  {e.doc_id}  l2={norm:.6f}")
        print(f"total {len(bank)} entries (T={bank.n_tokens}, d={bank.d_model})")
    elif args.bank_cmd == "reduce":
        target = args.target
        if target.endswith("%"):
            target = int(len(bank) * float(target[:-1]) / 100)
        else:
            target = int(target)
        bank.reduce(args.strategy, target, seed=config.seed)
        out = args.out or config.bank_path
        bank.save(out)
        print(f"reduced bank to {len(bank)} entries; saved to {out}")
    elif args.bank_cmd == "aggregate-bench":
        bundle = checkpoint.load_bundle(config.checkpoint_path, config)
        corpus = load_jsonl_corpus(args.corpus or config.corpus_path)
        qa = corpus.qa_pairs[: args.n_questions]
        m_values = [int(m) for m in args.m_values.split(",")]
        report = evalqa.aggregate_bench(bundle, bank, qa, m_values)
        metrics = MetricsWriter(config.metrics_path)
        print(f"full aggregation attention elements: {report['full_attention_elements']}")
        for row in report["sweep"]:
            metrics.write({"metric": "peak_attention_elements",
                           "value": row["peak_attention_elements"],
                           "cohort": f"M={row['m_tokens']}", "step": 0})
            metrics.write({"metric": "f1", "value": row["f1"],
                           "cohort": f"M={row['m_tokens']}", "step": 0})
            print(f"M={row['m_tokens']:5d}  peak={row['peak_attention_elements']:7d}  "
                  f"F1={row['f1']:.4f}  calls={row['aggregator_calls']}")
        metrics.close()


def build_parser():
    parser = argparse.ArgumentParser(prog="modbank")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--metrics-out", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic fact corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-docs", type=int, default=100)
    p.add_argument("--facts-per-doc", type=int, default=1)
    p.add_argument("--split", default="train")
    p.add_argument("--key-prefix", default="")
    p.add_argument("--corpus-seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain-base", help="next-token pretrain the base LM")
    p.add_argument("--corpus", help="JSONL pretraining corpus (default: generated)")
    p.add_argument("--n-docs", type=int, default=5000)
    p.set_defaults(func=cmd_pretrain_base)

    p = sub.add_parser("train", help="meta-train amortizer/encoder/aggregator")
    p.add_argument("--corpus", help="JSONL training corpus")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="stream documents into a memory bank")
    p.add_argument("--corpus", help="JSONL stream corpus")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="QA evaluation against a memory bank")
    p.add_argument("--corpus", help="JSONL corpus with eval QA pairs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retention", help="knowledge retention curve")
    p.add_argument("--corpus", help="JSONL stream corpus")
    p.add_argument("--probe-size", type=int, default=20)
    p.add_argument("--increment", type=int, default=None)
    p.add_argument("--baseline", action="store_true",
                   help="also run the online prefix-finetuning strawman")
    p.set_defaults(func=cmd_retention)

    p = sub.add_parser("lm-eval", help="perplexity on adapted vs unseen docs")
    p.add_argument("--corpus", help="JSONL adapted-document corpus")
    p.add_argument("--unseen-corpus", required=True)
    p.add_argument("--split-frac", type=float, default=0.1)
    p.set_defaults(func=cmd_lm_eval)

    p = sub.add_parser("bank", help="bank inspection and maintenance")
    bank_sub = p.add_subparsers(dest="bank_cmd", required=True)
    b = bank_sub.add_parser("inspect")
    b.set_defaults(func=cmd_bank)
    b = bank_sub.add_parser("reduce")
    b.add_argument("--strategy", required=True)
    b.add_argument("--target", required=True, help="entry count or percentage like 60%")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bank)
    b = bank_sub.add_parser("aggregate-bench")
    b.add_argument("--corpus", help="JSONL corpus with QA pairs")
    b.add_argument("--m-values", default="8,16,32")
    b.add_argument("--n-questions", type=int, default=20)
    b.set_defaults(func=cmd_bank)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = args.func(args)
    except (ConfigError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
