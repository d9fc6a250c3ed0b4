"""Command-line entry point: ``adaptalign <subcommand> ...``.

Exit codes: 0 success, 2 user or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import evaluator as ev
from .backbone import load_state, read_checkpoint
from .language import Vocab, WordPieceTokenizer, build_vocab
from .model import AlignmentModel, ModelConfig, build_model
from .records import (
    ConfigurationError,
    EmptyCorpusError,
    ManifestError,
    Record,
    build_records,
    default_image_loader,
    load_record_store,
    make_synthetic_corpus,
    read_manifest,
    save_record_store,
    synthetic_vocab,
)
from .trainer import NonFiniteLossError, Trainer, TrainingAborted

log = logging.getLogger("adaptalign")

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 2, 3


class UserError(Exception):
    pass


# --------------------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------------------

def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(getattr(args, "config", None), getattr(args, "set", None) or ())
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


def _synthetic_splits(cfg: cfgmod.RunConfig) -> dict[str, list[Record]]:
    """One generator call so every split shares the planted class patterns."""
    s = cfg.records.synthetic
    n = s.n_train + s.n_val + s.n_test
    recs = make_synthetic_corpus(n, s.n_classes, np.random.default_rng(cfg.seed), s.synthetic_config())
    return {"train": recs[: s.n_train], "val": recs[s.n_train: s.n_train + s.n_val],
            "test": recs[s.n_train + s.n_val:]}


def _split(cfg: cfgmod.RunConfig, name: str) -> list[Record]:
    store = getattr(cfg.records, f"{name}_store")
    if store is None:
        return _synthetic_splits(cfg)[name]
    if not (Path(store) / "index.tsv").exists():
        raise UserError(f"records.{name}_store: no record store at {store}")
    return load_record_store(store)


def _tokenizer(cfg: cfgmod.RunConfig) -> WordPieceTokenizer:
    vocab = Vocab.from_file(cfg.records.vocab) if cfg.records.vocab else synthetic_vocab()
    return WordPieceTokenizer(vocab, max_len=cfg.records.max_tokens)


def _model(cfg: cfgmod.RunConfig, require_checkpoint: bool) -> AlignmentModel:
    ckpt = cfg.eval.checkpoint
    if ckpt is None:
        if require_checkpoint and not cfg.eval.random_init:
            raise UserError("eval.checkpoint: not set (use eval.random_init=true for an untrained model)")
        return build_model(cfg.model_config(), seed=cfg.seed)
    if not Path(ckpt).is_file():
        raise UserError(f"eval.checkpoint: missing checkpoint {ckpt}")
    manifest, arrays = read_checkpoint(ckpt)
    model = AlignmentModel(ModelConfig.from_dict(manifest["config"]))
    load_state(model, arrays)
    return model


def _write_report(out: Path, report: ev.MetricReport, cfg: cfgmod.RunConfig, stem: str) -> None:
    report.config_hash = cfg.hash()
    (out / f"{stem}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / f"{stem}.tsv").write_text(report.to_table(), encoding="utf-8")
    print(report.to_table(), end="")


# --------------------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------------------

def cmd_build_records(args) -> int:
    cfg = _load_config(args)
    manifest = args.manifest or cfg.records.manifest
    if manifest is None:
        raise UserError("records.manifest: no manifest given")
    rows = read_manifest(manifest)
    if not rows:
        raise EmptyCorpusError("empty corpus: the manifest has no rows")
    if cfg.records.vocab:
        vocab = Vocab.from_file(cfg.records.vocab)
    else:
        texts = [Path(r["report_path"]).read_text(encoding="utf-8") for r in rows
                 if r.get("report_path") and Path(r["report_path"]).is_file()]
        vocab = build_vocab(texts)
    tok = WordPieceTokenizer(vocab, max_len=cfg.records.max_tokens)
    root = args.image_root or cfg.records.image_root
    loader = default_image_loader(root) if root else None
    records, stats = build_records(rows, cfg.records.record_config(), tok, loader)
    out = cfg.output_path()
    save_record_store(records, out)
    vocab.to_file(out / "vocab.txt")
    (out / "corpus_stats.json").write_text(json.dumps(stats.to_dict(), sort_keys=True, indent=2) + "\n")
    cfgmod.write_run_files(out, cfg, "build-records")
    print(json.dumps(stats.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    cfg = _load_config(args)
    out = cfg.output_path()
    for name, recs in _synthetic_splits(cfg).items():
        save_record_store(recs, out / name)
    synthetic_vocab().to_file(out / "vocab.txt")
    cfgmod.write_run_files(out, cfg, "make-synthetic")
    print(str(out))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps
    if args.ablate:
        cfg.train.ablate = sorted(set(cfg.train.ablate) | set(args.ablate))
    try:
        ablation = cfg.train.ablation()
    except ValueError as exc:
        raise UserError(f"train.ablate: {exc}") from exc
    train, val = _split(cfg, "train"), _split(cfg, "val")
    model_cfg = cfg.model_config()
    vocab_size = len(_tokenizer(cfg).vocab)
    if vocab_size > model_cfg.vocab_size:
        raise UserError(f"model.vocab_size: {model_cfg.vocab_size} < vocabulary size {vocab_size}")
    model = build_model(model_cfg, seed=cfg.seed)
    out = cfg.output_path()
    cfgmod.write_run_files(out, cfg, "train")
    trainer = Trainer(model, cfg.train.train_config(cfg.seed), cfg.train.weights(), ablation,
                      cfg.train.augment_config())
    result = trainer.fit(train, ev.retrieval_scorer(val, cfg.train.val_k), out)
    summary = {"best_score": result.best_score, "best_epoch": result.best_epoch, "steps": len(result.history),
               "stopped_early": result.stopped_early, "ablation": cfg.train.ablate}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval_retrieval(args) -> int:
    cfg = _load_config(args)
    if args.task:
        cfg.eval.task = args.task
    if cfg.eval.task not in ev.RETRIEVAL_TASKS:
        raise UserError(f"eval.task: {cfg.eval.task!r} is not a retrieval task {ev.RETRIEVAL_TASKS}")
    model = _model(cfg, require_checkpoint=True)
    protocol = ev.retrieval_protocol(_split(cfg, "test"), cfg.eval.task, cfg.eval.n_queries_per_class,
                                     cfg.eval.ks, cfg.seed)
    out = cfg.output_path()
    cfgmod.write_run_files(out, cfg, "eval-retrieval")
    _write_report(out, ev.retrieval(protocol, model), cfg, f"retrieval_{cfg.eval.task}")
    return EXIT_OK


def cmd_eval_zeroshot(args) -> int:
    cfg = _load_config(args)
    model = _model(cfg, require_checkpoint=True)
    binary = args.binary or cfg.eval.binary
    protocol = ev.synthetic_zero_shot_protocol(_split(cfg, "test"), cfg.records.synthetic.n_classes, binary, cfg.seed)
    protocol.folds = cfg.eval.folds
    out = cfg.output_path()
    cfgmod.write_run_files(out, cfg, "eval-zeroshot")
    _write_report(out, ev.zero_shot_classify(protocol, model), cfg, "zeroshot_binary" if binary else "zeroshot")
    return EXIT_OK


def cmd_eval_sentsim(args) -> int:
    cfg = _load_config(args)
    model = _model(cfg, require_checkpoint=True)
    protocol = ev.synthetic_sentence_pairs(cfg.eval.n_pairs, cfg.records.synthetic.n_classes, cfg.seed)
    protocol.folds = cfg.eval.folds
    out = cfg.output_path()
    cfgmod.write_run_files(out, cfg, "eval-sentsim")
    _write_report(out, ev.sentence_similarity(protocol, model), cfg, "sentsim")
    return EXIT_OK


def cmd_account_params(args) -> int:
    cfg = _load_config(args)
    if args.preset:
        cfg.preset = args.preset
    with torch.device("meta"):
        model = AlignmentModel(cfg.model_config())
    acct = model.accounting()
    print(json.dumps(acct, sort_keys=True))
    if args.out:
        out = cfg.output_path()
        cfgmod.write_run_files(out, cfg, "account-params")
        (out / "accounting.json").write_text(json.dumps(acct, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("config", nargs=None if config_required else "?", help="YAML/JSON run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")

    sp = sub.add_parser("build-records", help="manifest -> record store + corpus statistics")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--image-root")
    sp.set_defaults(func=cmd_build_records)

    sp = sub.add_parser("make-synthetic", help="write train/val/test synthetic record stores")
    common(sp)
    sp.set_defaults(func=cmd_make_synthetic)

    sp = sub.add_parser("train", help="fit adapters, projectors and heads")
    common(sp)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--ablate", action="append", choices=["temporal", "multiview", "local", "mlm", "mim"])
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval-retrieval", help="P@k retrieval on the test split")
    common(sp)
    sp.add_argument("--task", choices=list(ev.RETRIEVAL_TASKS))
    sp.set_defaults(func=cmd_eval_retrieval)

    sp = sub.add_parser("eval-zeroshot", help="prompt-based zero-shot classification")
    common(sp)
    sp.add_argument("--binary", action="store_true")
    sp.set_defaults(func=cmd_eval_zeroshot)

    sp = sub.add_parser("eval-sentsim", help="sentence-pair similarity classification")
    common(sp)
    sp.set_defaults(func=cmd_eval_sentsim)

    sp = sub.add_parser("account-params", help="trainable/frozen parameter counts")
    common(sp)
    sp.add_argument("--preset", choices=["toy", "vit_b_bert_base"])
    sp.set_defaults(func=cmd_account_params)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UserError, cfgmod.ConfigError, ManifestError, EmptyCorpusError, ConfigurationError,
            ev.ProtocolError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (NonFiniteLossError, TrainingAborted, RuntimeError, ValueError, KeyError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
