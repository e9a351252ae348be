"""Operator surface: corpus generation, training stages, evaluation, QA.

Every command resolves one RunConfig (file + --set overrides + --seed),
records it next to its artifacts, and stamps outputs with the config hash so
later stages can refuse mismatched inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_bundle, load_encoders, save_bundle, save_encoders
from .config import ConfigError, RunConfig
from .corpus import (
    Corpus,
    CorpusError,
    generate_synthetic_corpus,
    load_corpus,
    split_corpus,
    write_conversations,
    write_passages,
)
from .curriculum import CurriculumConfig, JointHyper, train_scheduler
from .encoder import encoder_checksum, init_encoder
from .metrics import load_stopwords
from .pipeline import PipelineBundle, answer_question, evaluate_split
from .postranker import identity_postranker, init_postranker
from .reader import init_reader
from .retriever import build_index, load_index, pretrain_retriever, save_index

log = logging.getLogger("convqa")

ABLATION_VARIANTS = ("full", "no_kl", "no_postranker", "no_curriculum")


def _setup_logging() -> None:
    level = os.environ.get("CONVQA_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError("CONVQA_LOG_LEVEL", "must be one of error, info, debug")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"])
    cfg.validate()
    return cfg


def _record_config(cfg: RunConfig, out: Path, stage: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"stage": stage, "config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    (out / f"config_{stage}.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _corpus_files(out: Path) -> tuple[Path, Path, Path]:
    return (
        out / "passages.jsonl",
        out / "conversations_train.jsonl",
        out / "conversations_dev.jsonl",
    )


def _load_split(out: Path, split: str) -> Corpus:
    passages, train, dev = _corpus_files(out)
    conv_path = {"train": train, "dev": dev}.get(split)
    if conv_path is None:
        raise ConfigError("split", "must be train or dev")
    return load_corpus(str(passages), str(conv_path), split=split)


# ---------------------------------------------------------------------------
# Stages (reused by ablate)
# ---------------------------------------------------------------------------

def stage_gen_corpus(cfg: RunConfig, out: Path) -> None:
    corpus = generate_synthetic_corpus(
        seed=cfg.seed,
        n_conversations=cfg.n_conversations,
        turns_per_conv=cfg.turns_per_conv,
        n_passages=cfg.n_passages,
        vocab_size=cfg.vocab_size,
    )
    train, dev = split_corpus(corpus, cfg.dev_fraction, seed=cfg.seed)
    passages, train_path, dev_path = _corpus_files(out)
    write_passages(corpus, str(passages))
    write_conversations(train, str(train_path))
    write_conversations(dev, str(dev_path))
    log.info("corpus: %d passages, %d train / %d dev conversations",
             len(corpus.passages), len(train.conversations), len(dev.conversations))


def stage_pretrain(cfg: RunConfig, out: Path) -> None:
    corpus = _load_split(out, "train")
    q = init_encoder(cfg.seed, cfg.dim, cfg.hash_buckets)
    p = init_encoder(cfg.seed + 1, cfg.dim, cfg.hash_buckets)
    result = pretrain_retriever(
        corpus, q, p,
        steps=cfg.pretrain_steps, batch_size=cfg.batch_pretrain,
        lr=cfg.lr_pretrain, kl_weight=cfg.kl_weight,
        seed=cfg.seed, window=cfg.window, optimizer=cfg.optimizer,
    )
    save_encoders(str(out / "encoders.npz"), q, p, cfg.config_hash())
    with open(out / "pretrain_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.steps:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("pretrained %d steps, final loss %.4f",
             len(result.steps), result.steps[-1]["loss"] if result.steps else float("nan"))


def stage_index(cfg: RunConfig, out: Path) -> None:
    corpus = _load_split(out, "train")
    _, p, _ = load_encoders(str(out / "encoders.npz"))
    index = build_index(p, corpus)
    save_index(index, str(out / "index.npz"), cfg.config_hash())
    log.info("indexed %d passages (dim %d)", len(index.ids), index.dim)


def stage_train(cfg: RunConfig, out: Path) -> None:
    corpus = _load_split(out, "train")
    q, p, _ = load_encoders(str(out / "encoders.npz"))
    index, idx_meta = load_index(str(out / "index.npz"))
    if idx_meta["encoder_checksum"] != encoder_checksum(p):
        raise ConfigError("index", "index was built from a different passage encoder")

    ranker = (init_postranker(cfg.seed + 2, cfg.dim) if cfg.use_postranker
              else identity_postranker(cfg.dim))
    reader = init_reader(cfg.seed + 3, cfg.dim, cfg.hash_buckets)
    hyper = JointHyper(
        hinge_margin=cfg.hinge_margin,
        triplet_margin=cfg.triplet_margin,
        triplet_weight=cfg.triplet_weight,
        top_t=cfg.top_t,
        window=cfg.window,
    )
    ccfg = CurriculumConfig(lower=cfg.curriculum_lower, upper=cfg.curriculum_upper,
                            seed=cfg.seed)

    def _checkpoint(state):
        save_bundle(
            str(out / f"bundle_iter{state.iteration:06d}.npz"), q, ranker, reader,
            cfg.config_hash(),
            extra={"index_checksum": idx_meta["encoder_checksum"],
                   "curriculum": state.to_dict()},
        )

    result = train_scheduler(
        corpus, q, index, ranker, reader, ccfg,
        iterations=cfg.joint_iterations, batch_size=cfg.batch_joint,
        lr=cfg.lr_joint, top_k=cfg.top_k, hyper=hyper,
        use_postranker=cfg.use_postranker, force_inject=cfg.force_inject,
        checkpoint_every=cfg.checkpoint_every,
        checkpoint_fn=_checkpoint if cfg.checkpoint_every else None,
        optimizer=cfg.optimizer,
    )
    save_bundle(
        str(out / "bundle.npz"), q, ranker, reader, cfg.config_hash(),
        extra={"index_checksum": idx_meta["encoder_checksum"],
               "curriculum": result.state.to_dict()},
    )
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("joint training: %d iterations, final total loss %.4f",
             len(result.log), result.log[-1]["loss_total"] if result.log else float("nan"))


def _load_pipeline(cfg: RunConfig, out: Path, split: str) -> PipelineBundle:
    corpus = _load_split(out, split)
    q, ranker, reader, meta = load_bundle(str(out / "bundle.npz"))
    index, idx_meta = load_index(str(out / "index.npz"))
    if meta.get("index_checksum") != idx_meta["encoder_checksum"]:
        raise ConfigError("bundle", "bundle was trained against a different index")
    return PipelineBundle(
        question_encoder=q, index=index, ranker=ranker, reader=reader,
        corpus=corpus, top_k=cfg.top_k, top_t=cfg.top_t, window=cfg.window,
        max_span_len=cfg.max_span_len, top_n_spans=cfg.top_n_spans,
    )


def stage_eval(cfg: RunConfig, out: Path, split: str) -> dict:
    bundle = _load_pipeline(cfg, out, split)
    report = evaluate_split(bundle, bundle.corpus,
                            stopwords=load_stopwords(cfg.stopword_path),
                            human_f1=cfg.human_f1)
    payload = json.loads(report.to_json())
    payload["split"] = split
    payload["config_hash"] = cfg.config_hash()
    (out / "report.json").write_text(json.dumps(payload, sort_keys=True) + "\n",
                                     encoding="utf-8")
    report.write_csv(str(out / "report.csv"))
    return payload


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _record_config(cfg, out, "gen_corpus")
    stage_gen_corpus(cfg, out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _record_config(cfg, out, "pretrain")
    stage_pretrain(cfg, out)
    return 0


def cmd_index(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _record_config(cfg, out, "index")
    stage_index(cfg, out)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _record_config(cfg, out, "train")
    stage_train(cfg, out)
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _record_config(cfg, out, "eval")
    payload = stage_eval(cfg, out, args.split)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_ask(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    bundle = _load_pipeline(cfg, out, args.split)
    conv = next((c for c in bundle.corpus.conversations if c.cid == args.cid), None)
    if conv is None:
        raise ConfigError("cid", f"conversation {args.cid!r} not found in {args.split} split")
    if not 1 <= args.turn <= len(conv.turns):
        raise ConfigError("turn", f"must lie in [1, {len(conv.turns)}]")
    answer = answer_question(bundle, conv, args.turn)
    if answer is None:
        print(json.dumps({"answer": None, "unanswerable": True}, sort_keys=True))
    else:
        print(answer.to_json())
    return 0


def _variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    overrides = {
        "full": [],
        "no_kl": ["kl_weight=0.0"],
        "no_postranker": ["use_postranker=false"],
        "no_curriculum": ["force_inject=true"],
    }[variant]
    out = cfg.with_overrides(overrides)
    out.validate()
    return out


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _record_config(cfg, out, "ablate")
    variants = ABLATION_VARIANTS if args.variant == "all" else (args.variant,)
    rows = {}
    for variant in variants:
        vcfg = _variant_config(cfg, variant)
        vout = out / variant
        vout.mkdir(parents=True, exist_ok=True)
        log.info("ablation variant %s (hash %s)", variant, vcfg.config_hash())
        _record_config(vcfg, vout, "variant")
        stage_gen_corpus(vcfg, vout)
        stage_pretrain(vcfg, vout)
        stage_index(vcfg, vout)
        stage_train(vcfg, vout)
        rows[variant] = stage_eval(vcfg, vout, args.split)
    (out / "ablation.json").write_text(json.dumps(rows, sort_keys=True) + "\n",
                                       encoding="utf-8")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Variant", "F1", "HEQ-Q", "HEQ-D", "Rt MRR", "Rt Recall"])
        for variant in variants:
            r = rows[variant]
            writer.writerow([variant, r["f1"], r["heq_q"], r["heq_d"], r["mrr"], r["recall"]])
    print(json.dumps(rows, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convqa",
        description="Conversational open-retrieval QA pipeline (desk scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (repeatable)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="artifact directory")

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="pre-train the dual encoders")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("index", help="embed all passages into an index")
    common(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", help="joint curriculum training")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate the trained pipeline")
    common(p)
    p.add_argument("--split", default="dev", choices=("train", "dev"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ask", help="answer a single conversation turn")
    common(p)
    p.add_argument("--split", default="dev", choices=("train", "dev"))
    p.add_argument("--cid", required=True)
    p.add_argument("--turn", type=int, required=True)
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("ablate", help="run component-removal variants")
    common(p)
    p.add_argument("--variant", default="all",
                   choices=("all",) + ABLATION_VARIANTS)
    p.add_argument("--split", default="dev", choices=("train", "dev"))
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
