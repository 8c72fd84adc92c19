"""Translation training loop: sentence-count batches, label-smoothed cross
entropy, Adam at a fixed learning rate, per-epoch dev BLEU at the configured
beam, and best-checkpoint retention over the full epoch budget (no early
stopping; ties go to the earliest epoch).

Determinism contract: everything random (shuffling, dropout) flows from one
seeded generator whose state rides along in every checkpoint, so equal seeds
give byte-identical logs and checkpoints, and resuming from epoch N replays
exactly what an uninterrupted run would have done.  Wall-clock durations are
recorded in a sidecar timings file to keep the main log deterministic.
"""

from __future__ import annotations

import os
import shutil
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, rng_from_meta, rng_state_to_meta, save_checkpoint
from .decoder import translate_ids
from .errors import ConfigError, DataError, DivergenceError, IntegrityError
from .lm import LmConfig, MaskedLm
from .metrics import bleu
from .model import ModelConfig, TransformerMT, build_model
from .subword import BOS_ID, EOS_ID, PAD_ID, merge_bpe_markers
from .tensor import AdamHyper, AdamState, adam_step, clip_grad_norm

LOG_HEADER = "epoch\ttrain_loss\tdev_bleu\tdev_bleu_ci\tis_best"


@dataclass
class TrainConfig:
    batch_sentences: int = 100
    epochs: int = 250
    label_smoothing: float = 0.1
    lr: float = 1e-4
    seed: int = 1
    dev_beam: int = 12
    checkpoint_dir: str = "checkpoints"
    grad_clip: float = 1.0  # 0 disables
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    length_norm: bool = False
    keep_all_checkpoints: bool = False

    def validate(self):
        if self.batch_sentences < 1:
            raise ConfigError("batch_sentences must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")


@dataclass
class TrainLogEntry:
    epoch: int
    train_loss: float
    dev_bleu: float
    dev_bleu_ci: float
    is_best: bool
    wall_seconds: float

    def log_line(self) -> str:
        return (
            f"{self.epoch}\t{self.train_loss:.6f}\t{self.dev_bleu:.2f}"
            f"\t{self.dev_bleu_ci:.2f}\t{int(self.is_best)}"
        )


@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    ntokens: int  # non-pad target positions


@dataclass
class TrainResult:
    entries: list[TrainLogEntry] = field(default_factory=list)
    best_epoch: int = 0
    best_bleu: float = -1.0
    best_path: str = ""


def _pad_rows(rows: list[list[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def pad_batch(pairs: list[tuple[list[int], list[int]]]) -> Batch:
    src_rows = [[BOS_ID] + list(s) + [EOS_ID] for s, _ in pairs]
    tgt_in_rows = [[BOS_ID] + list(t) for _, t in pairs]
    tgt_out_rows = [list(t) + [EOS_ID] for _, t in pairs]
    return Batch(
        src=_pad_rows(src_rows),
        tgt_in=_pad_rows(tgt_in_rows),
        tgt_out=_pad_rows(tgt_out_rows),
        ntokens=sum(len(r) for r in tgt_out_rows),
    )


def make_batches(
    pairs: list[tuple[list[int], list[int]]],
    batch_sentences: int,
    rng: np.random.Generator,
) -> list[Batch]:
    """Shuffle with the run RNG and cut into sentence-count batches, each
    padded to its own maximum length.  Every pair appears exactly once."""
    if not pairs:
        raise DataError("empty training corpus")
    order = rng.permutation(len(pairs))
    return [
        pad_batch([pairs[i] for i in order[start : start + batch_sentences]])
        for start in range(0, len(pairs), batch_sentences)
    ]


def hypothesis_token_line(hyp, tgt_vocab) -> str:
    return " ".join(merge_bpe_markers(tgt_vocab.decode(hyp.generated())))


def decode_dev(model, dev_src_ids, tgt_vocab, beam_size: int, length_norm: bool = False) -> list[str]:
    lines = []
    for ids in dev_src_ids:
        hyp = translate_ids(model, ids, beam_size=beam_size, length_norm=length_norm)[0]
        lines.append(hypothesis_token_line(hyp, tgt_vocab))
    return lines


# -- checkpoint glue ----------------------------------------------------------


def make_mt_checkpoint(
    model: TransformerMT,
    optimizer: AdamState,
    rng: np.random.Generator,
    epoch: int,
    best_epoch: int,
    best_bleu: float,
    config_text: str,
    src_vocab_hash: str,
    tgt_vocab_hash: str,
) -> Checkpoint:
    meta = {
        "kind": "mt",
        "epoch": epoch,
        "best_epoch": best_epoch,
        "best_bleu": best_bleu,
        "model_config": vars(model.config).copy(),
        "lm_config": model.provider.lm.config.as_dict() if model.provider.kind == "frozen_lm" else None,
        "src_vocab_hash": src_vocab_hash,
        "tgt_vocab_hash": tgt_vocab_hash,
        "rng_state": rng_state_to_meta(rng),
        "adam": {"step": optimizer.step, **vars(optimizer.hyper)},
    }
    tensors = dict(model.state_tensors())
    for name, buf in optimizer.m.items():
        tensors["adam.m." + name] = buf
    for name, buf in optimizer.v.items():
        tensors["adam.v." + name] = buf
    return Checkpoint(config_text=config_text, meta=meta, tensors=tensors)


def load_mt_model(path: str) -> tuple[TransformerMT, Checkpoint]:
    """Rebuild a translation model from a self-contained checkpoint."""
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "mt":
        raise IntegrityError(f"{path}: not a translation checkpoint (kind={ck.meta.get('kind')!r})")
    mc = ModelConfig(**ck.meta["model_config"])
    throwaway = np.random.default_rng(0)
    lm = None
    if mc.provider_kind == "frozen_lm":
        lm = MaskedLm(LmConfig(**ck.meta["lm_config"]), throwaway, vocab_hash=ck.meta["src_vocab_hash"])
    model = build_model(mc, throwaway, lm=lm, src_vocab_hash=ck.meta["src_vocab_hash"])
    model.load_state({k: v for k, v in ck.tensors.items() if not k.startswith("adam.")})
    return model, ck


def optimizer_from_checkpoint(ck: Checkpoint, params: dict) -> AdamState:
    adam_meta = dict(ck.meta["adam"])
    step = adam_meta.pop("step")
    state = AdamState(hyper=AdamHyper(**adam_meta), step=step)
    for name in params:
        m_key, v_key = "adam.m." + name, "adam.v." + name
        if m_key not in ck.tensors or v_key not in ck.tensors:
            raise IntegrityError(f"checkpoint lacks optimizer buffers for {name}")
        state.m[name] = ck.tensors[m_key].copy()
        state.v[name] = ck.tensors[v_key].copy()
    return state


# -- the loop -----------------------------------------------------------------


def train(
    model: TransformerMT,
    cfg: TrainConfig,
    train_pairs: list[tuple[list[int], list[int]]],
    dev_src_ids: list[list[int]],
    dev_refs: list[str],
    tgt_vocab,
    src_vocab_hash: str = "",
    tgt_vocab_hash: str = "",
    config_text: str = "",
    resume_from: str | None = None,
    log_path: str | None = None,
    on_epoch=None,
) -> TrainResult:
    """Run the full training schedule and return the log plus best-checkpoint
    information.  `resume_from` continues a run from any retained checkpoint,
    bitwise-identically to the uninterrupted run."""
    cfg.validate()
    if not train_pairs:
        raise DataError("empty training corpus")
    if len(dev_src_ids) != len(dev_refs) or not dev_src_ids:
        raise DataError("dev corpus is empty or source/reference line counts differ")
    if len(tgt_vocab) != model.config.tgt_vocab_size:
        raise ConfigError(
            f"target vocab size {len(tgt_vocab)} does not match model config {model.config.tgt_vocab_size}"
        )
    if model.provider.kind == "frozen_lm" and src_vocab_hash and model.provider.vocab_hash != src_vocab_hash:
        raise ConfigError("frozen-LM provider vocabulary differs from the source vocabulary (hash mismatch)")

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    log_path = log_path or os.path.join(cfg.checkpoint_dir, "train.log.tsv")
    if log_path.endswith(".log.tsv"):
        times_path = log_path[: -len(".log.tsv")] + ".times.tsv"
    else:
        times_path = os.path.splitext(log_path)[0] + ".times.tsv"

    hyper = AdamHyper(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                      weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps)
    optimizer = AdamState(hyper=hyper)
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable_params()
    result = TrainResult()
    start_epoch = 0

    if resume_from:
        ck = load_checkpoint(resume_from)
        if ck.meta.get("kind") != "mt":
            raise IntegrityError(f"{resume_from} is not a translation checkpoint")
        if ck.meta["model_config"] != vars(model.config):
            raise ConfigError("resume checkpoint was trained with a different model configuration")
        if src_vocab_hash and ck.meta["src_vocab_hash"] != src_vocab_hash:
            raise ConfigError("resume checkpoint uses a different source vocabulary")
        if tgt_vocab_hash and ck.meta["tgt_vocab_hash"] != tgt_vocab_hash:
            raise ConfigError("resume checkpoint uses a different target vocabulary")
        model.load_state({k: v for k, v in ck.tensors.items() if not k.startswith("adam.")})
        optimizer = optimizer_from_checkpoint(ck, params)
        rng = rng_from_meta(ck.meta["rng_state"])
        start_epoch = ck.meta["epoch"]
        result.best_epoch = ck.meta["best_epoch"]
        result.best_bleu = ck.meta["best_bleu"]
        result.best_path = os.path.join(cfg.checkpoint_dir, "best.ckpt")

    mode = "a" if resume_from else "w"
    log_fh = open(log_path, mode, encoding="utf-8")
    times_fh = open(times_path, mode, encoding="utf-8")
    if not resume_from:
        log_fh.write(LOG_HEADER + "\n")
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            t0 = time.perf_counter()
            total_loss, total_tokens = 0.0, 0
            for batch in make_batches(train_pairs, cfg.batch_sentences, rng):
                loss = model.loss_on_batch(
                    batch.src, batch.tgt_in, batch.tgt_out,
                    label_smoothing=cfg.label_smoothing, train=True, rng=rng,
                )
                if not np.isfinite(loss.data):
                    raise DivergenceError(
                        f"training loss diverged at epoch {epoch}; last checkpoint retained in {cfg.checkpoint_dir}"
                    )
                for p in params.values():
                    p.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    clip_grad_norm(params, cfg.grad_clip)
                adam_step(params, optimizer)
                total_loss += loss.item() * batch.ntokens
                total_tokens += batch.ntokens
            hyp_lines = decode_dev(model, dev_src_ids, tgt_vocab, cfg.dev_beam, cfg.length_norm)
            report = bleu(hyp_lines, dev_refs)
            report_ci = bleu(hyp_lines, dev_refs, lowercase=True)
            is_best = report.bleu > result.best_bleu
            entry = TrainLogEntry(
                epoch=epoch,
                train_loss=total_loss / total_tokens,
                dev_bleu=report.bleu,
                dev_bleu_ci=report_ci.bleu,
                is_best=is_best,
                wall_seconds=time.perf_counter() - t0,
            )
            result.entries.append(entry)
            if is_best:
                result.best_bleu = report.bleu
                result.best_epoch = epoch
            ck = make_mt_checkpoint(
                model, optimizer, rng, epoch, result.best_epoch, result.best_bleu,
                config_text, src_vocab_hash, tgt_vocab_hash,
            )
            epoch_path = os.path.join(cfg.checkpoint_dir, f"epoch-{epoch}.ckpt")
            save_checkpoint(epoch_path, ck)
            if is_best:
                result.best_path = os.path.join(cfg.checkpoint_dir, "best.ckpt")
                shutil.copyfile(epoch_path, result.best_path)
                with open(os.path.join(cfg.checkpoint_dir, "best.json"), "w", encoding="utf-8") as fh:
                    fh.write(
                        '{"epoch": %d, "dev_bleu": %.6f, "path": "epoch-%d.ckpt"}\n'
                        % (epoch, report.bleu, epoch)
                    )
            if not cfg.keep_all_checkpoints:
                _prune_checkpoints(cfg.checkpoint_dir, keep={epoch, result.best_epoch})
            log_fh.write(entry.log_line() + "\n")
            log_fh.flush()
            times_fh.write(f"{epoch}\t{entry.wall_seconds:.3f}\n")
            times_fh.flush()
            if on_epoch is not None:
                on_epoch(entry, model)
    finally:
        log_fh.close()
        times_fh.close()
    return result


def _prune_checkpoints(directory: str, keep: set[int]):
    for name in os.listdir(directory):
        if not (name.startswith("epoch-") and name.endswith(".ckpt")):
            continue
        try:
            n = int(name[len("epoch-") : -len(".ckpt")])
        except ValueError:
            continue
        if n not in keep:
            os.remove(os.path.join(directory, name))
