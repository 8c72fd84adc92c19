"""Command-line front-end tying the pipeline together.

Subcommands: preprocess | bpe-learn | bpe-apply | build-vocab | pretrain-lm |
train | translate | evaluate | inspect-checkpoint | report.  Usage errors
exit 2 (argparse); data/config/integrity failures exit 1 with a single
`error: <category>: <message>` line on stderr.

Heavy imports happen inside the handlers so that `--threads` can cap the
BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="picomt",
        description="Desk-scale neural MT: preprocessing, BPE, MLM pretraining, training, decoding, scoring.",
    )
    parser.add_argument("--threads", type=int, default=None, metavar="N",
                        help="cap internal numeric parallelism at N threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize, tokenize, and clean a parallel corpus")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out-src", required=True)
    p.add_argument("--out-tgt", required=True)
    p.add_argument("--max-len", type=int, default=80)
    p.add_argument("--max-ratio", type=float, default=1.5)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("bpe-learn", help="learn BPE merges from tokenized text")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--merges", required=True, help="output merge file")
    p.add_argument("--num-merges", type=int, required=True)
    p.set_defaults(func=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", help="segment tokenized text with a merge file")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True, help="merge file from bpe-learn")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_bpe_apply)

    p = sub.add_parser("build-vocab", help="build a vocabulary from segmented text")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--size", type=int, required=True, help="budget including the 5 specials")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain-lm", help="pretrain a masked language model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, metavar="CKPT")
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("train", help="train a translation model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, metavar="CKPT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="beam-translate a segmented source file")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--no-detok", action="store_true", help="emit tokenized output")
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--src-vocab", default=None, help="override the vocabulary path recorded at training time")
    p.add_argument("--tgt-vocab", default=None)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU of a hypothesis file against a reference")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--lc", action="store_true", help="case-insensitive scoring")
    p.add_argument("--smooth", action="store_true", help="add-one smoothing for tiny corpora")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint header and tensor table")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="render figures from a training log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", default=None, help="output PNG (default: alongside the log)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(max(1, args.threads))
    from .errors import PicomtError

    try:
        return args.func(args) or 0
    except PicomtError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------


def _write_lines(path: str, lines):
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _read_token_lines(path: str) -> list[str]:
    from .textpipe import read_lines_strict

    return read_lines_strict(path)


def cmd_preprocess(args) -> int:
    from .textpipe import preprocess_corpus

    kept, report = preprocess_corpus(args.src, args.tgt, max_len=args.max_len, max_ratio=args.max_ratio)
    _write_lines(args.out_src, (" ".join(p.source) for p in kept))
    _write_lines(args.out_tgt, (" ".join(p.target) for p in kept))
    for line in report.as_lines():
        print(line)
    return 0


def _token_stream(paths):
    from .textpipe import read_lines_strict

    for path in paths:
        for line in read_lines_strict(path):
            yield from line.split()


def cmd_bpe_learn(args) -> int:
    from .subword import learn_bpe

    model = learn_bpe(_token_stream(args.input), args.num_merges)
    model.save(args.merges)
    print(f"learned {len(model.merges)} merges -> {args.merges}")
    return 0


def cmd_bpe_apply(args) -> int:
    from .subword import SubwordModel, segment_line

    model = SubwordModel.load(args.model)
    lines = _read_token_lines(args.input)
    _write_lines(args.output, (" ".join(segment_line(line, model)) for line in lines))
    return 0


def cmd_build_vocab(args) -> int:
    from .subword import build_vocab

    vocab = build_vocab(_token_stream(args.input), args.size)
    vocab.save(args.output)
    print(f"vocabulary of {len(vocab)} tokens -> {args.output} (hash {vocab.content_hash()[:12]})")
    return 0


def cmd_pretrain_lm(args) -> int:
    import numpy as np

    from .checkpoint import Checkpoint, load_checkpoint, rng_from_meta, rng_state_to_meta, save_checkpoint
    from .config import canonical_text, load_lm_config, resolve_seed
    from .errors import IntegrityError
    from .lm import LmConfig, LmTrainConfig, MaskedLm, MaskingPolicy, pretrain
    from .subword import Vocabulary
    from .trainer import _prune_checkpoints

    cfg = load_lm_config(args.config)
    seed = resolve_seed(args.seed, cfg.seed)
    cfg.values["seed"] = seed
    config_text = canonical_text(cfg.values)

    vocab = Vocabulary.load(cfg.vocab)
    sentences = [vocab.encode(line.split()) for line in _read_token_lines(cfg.corpus) if line.strip()]
    lm_cfg = LmConfig(
        vocab_size=len(vocab), layers=cfg.layers, heads=cfg.heads, d_model=cfg.d_model,
        d_ff=cfg.d_ff, max_positions=cfg.max_positions, dropout=cfg.dropout,
        norm_placement=cfg.norm_placement,
    )
    train_cfg = LmTrainConfig(
        epochs=cfg.epochs, batch_sentences=cfg.batch_sentences, lr=cfg.lr,
        warmup_steps=cfg.warmup_steps, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
        eps=cfg.adam_eps, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip,
        valid_fraction=cfg.valid_fraction, seed=seed,
        masking=MaskingPolicy(cfg.mask_prob, cfg.mask_token_prob, cfg.random_token_prob, cfg.keep_prob),
    )
    lm = MaskedLm(lm_cfg, np.random.default_rng(seed), vocab_hash=vocab.content_hash())
    optimizer = None
    start_epoch = 0
    rng = np.random.default_rng(seed)
    if args.resume:
        from .trainer import optimizer_from_checkpoint

        ck = load_checkpoint(args.resume)
        if ck.meta.get("kind") != "lm":
            raise IntegrityError(f"{args.resume} is not a language-model checkpoint")
        if ck.meta["vocab_hash"] != vocab.content_hash():
            from .errors import ConfigError

            raise ConfigError(f"{args.resume} was trained with a different vocabulary (hash mismatch)")
        lm.load_state({k: v for k, v in ck.tensors.items() if not k.startswith("adam.")})
        optimizer = optimizer_from_checkpoint(ck, lm.trainable_params())
        rng = rng_from_meta(ck.meta["rng_state"])
        start_epoch = ck.meta["epoch"]

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    log_path = os.path.join(cfg.checkpoint_dir, "lm.log.tsv")
    log_fh = open(log_path, "a" if args.resume else "w", encoding="utf-8")
    state = {"best_epoch": 0, "best_acc": -1.0}
    if args.resume:
        state["best_epoch"] = ck.meta["best_epoch"]
        state["best_acc"] = ck.meta["best_acc"]

    def on_epoch(metrics, lm_model, opt, gen):
        import shutil

        log_fh.write(metrics.log_line() + "\n")
        log_fh.flush()
        if metrics.valid_accuracy > state["best_acc"]:
            state["best_acc"] = metrics.valid_accuracy
            state["best_epoch"] = metrics.epoch
        meta = {
            "kind": "lm",
            "epoch": metrics.epoch,
            "best_epoch": state["best_epoch"],
            "best_acc": state["best_acc"],
            "lm_config": lm_cfg.as_dict(),
            "vocab_hash": lm_model.vocab_hash,
            "rng_state": rng_state_to_meta(gen),
            "adam": {"step": opt.step, **vars(opt.hyper)},
        }
        tensors = dict(lm_model.state_tensors())
        for name, buf in opt.m.items():
            tensors["adam.m." + name] = buf
        for name, buf in opt.v.items():
            tensors["adam.v." + name] = buf
        epoch_path = os.path.join(cfg.checkpoint_dir, f"epoch-{metrics.epoch}.ckpt")
        save_checkpoint(epoch_path, Checkpoint(config_text=config_text, meta=meta, tensors=tensors))
        if state["best_epoch"] == metrics.epoch:
            shutil.copyfile(epoch_path, os.path.join(cfg.checkpoint_dir, "best.ckpt"))
            with open(os.path.join(cfg.checkpoint_dir, "best.json"), "w", encoding="utf-8") as fh:
                fh.write('{"epoch": %d, "valid_accuracy": %.6f, "path": "epoch-%d.ckpt"}\n'
                         % (metrics.epoch, metrics.valid_accuracy, metrics.epoch))
        if not cfg.keep_all_checkpoints:
            _prune_checkpoints(cfg.checkpoint_dir, keep={metrics.epoch, state["best_epoch"]})

    try:
        history, _ = pretrain(lm, sentences, train_cfg, rng, optimizer=optimizer,
                              start_epoch=start_epoch, on_epoch=on_epoch)
    finally:
        log_fh.close()
    if cfg.render_figures:
        from .report import render_lm_log

        fig = render_lm_log(log_path)
        print(f"figures -> {fig}")
    last = history[-1] if history else None
    if last:
        print(f"best epoch {state['best_epoch']} (valid accuracy {state['best_acc']:.4f}); "
              f"final perplexity {last.valid_perplexity:.3f}")
    print(f"checkpoints -> {cfg.checkpoint_dir}")
    return 0


def cmd_train(args) -> int:
    import numpy as np

    from .config import canonical_text, load_train_config, resolve_seed
    from .errors import ConfigError
    from .model import ModelConfig, build_model
    from .subword import Vocabulary
    from .trainer import TrainConfig, train

    cfg = load_train_config(args.config)
    seed = resolve_seed(args.seed, cfg.seed)
    cfg.values["seed"] = seed
    config_text = canonical_text(cfg.values)

    src_vocab = Vocabulary.load(cfg.src_vocab)
    tgt_vocab = Vocabulary.load(cfg.tgt_vocab)
    train_src = _read_token_lines(cfg.train_src)
    train_tgt = _read_token_lines(cfg.train_tgt)
    if len(train_src) != len(train_tgt):
        raise ConfigError(
            f"train files differ in length: {len(train_src)} vs {len(train_tgt)} lines"
        )
    pairs = [
        (src_vocab.encode(s.split()), tgt_vocab.encode(t.split()))
        for s, t in zip(train_src, train_tgt)
        if s.strip() and t.strip()
    ]
    dev_src = [src_vocab.encode(line.split()) for line in _read_token_lines(cfg.dev_src)]
    dev_refs = _read_token_lines(cfg.dev_ref)

    model_cfg = ModelConfig(
        src_vocab_size=len(src_vocab), tgt_vocab_size=len(tgt_vocab),
        layers=cfg.layers, heads=cfg.heads, d_model=cfg.d_model, d_ff=cfg.d_ff,
        dropout=cfg.dropout, provider_kind=cfg.provider_kind,
        max_positions=cfg.max_positions, norm_placement=cfg.norm_placement,
    )
    lm = None
    if cfg.provider_kind == "frozen_lm":
        from .lm import load_lm_model

        lm, _ = load_lm_model(cfg.lm_checkpoint)
    model = build_model(model_cfg, np.random.default_rng(seed), lm=lm,
                        src_vocab_hash=src_vocab.content_hash())

    train_cfg = TrainConfig(
        batch_sentences=cfg.batch_sentences, epochs=cfg.epochs,
        label_smoothing=cfg.label_smoothing, lr=cfg.lr, seed=seed,
        dev_beam=cfg.dev_beam, checkpoint_dir=cfg.checkpoint_dir,
        grad_clip=cfg.grad_clip, warmup_steps=cfg.warmup_steps,
        beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay, length_norm=cfg.length_norm,
        keep_all_checkpoints=cfg.keep_all_checkpoints,
    )
    result = train(
        model, train_cfg, pairs, dev_src, dev_refs, tgt_vocab,
        src_vocab_hash=src_vocab.content_hash(), tgt_vocab_hash=tgt_vocab.content_hash(),
        config_text=config_text, resume_from=args.resume,
    )
    log_path = os.path.join(cfg.checkpoint_dir, "train.log.tsv")
    if cfg.render_figures:
        from .report import render_mt_log

        fig = render_mt_log(log_path)
        print(f"figures -> {fig}")
    print(f"best epoch {result.best_epoch} (dev BLEU {result.best_bleu:.2f}) -> {result.best_path}")
    return 0


def cmd_translate(args) -> int:
    from .config import parse_kv_text
    from .decoder import translate_corpus
    from .errors import ConfigError
    from .subword import Vocabulary
    from .trainer import load_mt_model

    model, ck = load_mt_model(args.model)
    recorded = parse_kv_text(ck.config_text, origin=f"{args.model}:config")
    src_vocab_path = args.src_vocab or recorded.get("src_vocab")
    tgt_vocab_path = args.tgt_vocab or recorded.get("tgt_vocab")
    if not src_vocab_path or not tgt_vocab_path:
        raise ConfigError("checkpoint does not record vocabulary paths; pass --src-vocab/--tgt-vocab")
    src_vocab = Vocabulary.load(src_vocab_path)
    tgt_vocab = Vocabulary.load(tgt_vocab_path)
    if src_vocab.content_hash() != ck.meta["src_vocab_hash"]:
        raise ConfigError(f"source vocabulary {src_vocab_path} does not match the checkpoint (hash mismatch)")
    if tgt_vocab.content_hash() != ck.meta["tgt_vocab_hash"]:
        raise ConfigError(f"target vocabulary {tgt_vocab_path} does not match the checkpoint (hash mismatch)")
    lines = _read_token_lines(args.input)
    out = translate_corpus(
        model, lines, src_vocab, tgt_vocab, beam_size=args.beam,
        detok=not args.no_detok, max_len=args.max_len, nbest=args.nbest,
    )
    _write_lines(args.output, out)
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import bleu, bleu_report_format

    hyp = _read_token_lines(args.hyp)
    ref = _read_token_lines(args.ref)
    report = bleu(hyp, ref, lowercase=args.lc, smooth=args.smooth)
    print(bleu_report_format(report))
    return 0


def cmd_inspect(args) -> int:
    from .checkpoint import load_checkpoint

    ck = load_checkpoint(args.path)
    kind = ck.meta.get("kind", "?")
    print(f"kind: {kind}")
    print(f"epoch: {ck.meta.get('epoch')}")
    for key in ("src_vocab_hash", "tgt_vocab_hash", "vocab_hash"):
        if key in ck.meta:
            print(f"{key}: {ck.meta[key]}")
    model_tensors = {k: v for k, v in ck.tensors.items() if not k.startswith("adam.")}
    lm_tensors = {k: v for k, v in model_tensors.items() if k.startswith("lm.")}
    own = {k: v for k, v in model_tensors.items() if not k.startswith("lm.")}
    print(f"tensors: {len(ck.tensors)} ({len(model_tensors)} model, "
          f"{len(ck.tensors) - len(model_tensors)} optimizer)")
    for name in sorted(model_tensors):
        print(f"  {name}  {'x'.join(map(str, model_tensors[name].shape))}")
    trainable = sum(v.size for v in own.values())
    total = trainable + sum(v.size for v in lm_tensors.values())
    print(f"parameters: total {total}, trainable {trainable}")
    if kind == "mt":
        from .model import ModelConfig, expected_trainable_params

        mc = ModelConfig(**ck.meta["model_config"])
        d_lm = ck.meta["lm_config"]["d_model"] if ck.meta.get("lm_config") else None
        print(f"expected trainable (formula): {expected_trainable_params(mc, d_lm=d_lm)}")
    return 0


def cmd_report(args) -> int:
    from .report import render_log

    out = render_log(args.log, args.out)
    print(f"figures -> {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
