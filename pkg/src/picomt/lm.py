"""Masked-language-model pretraining on an encoder-only transformer.

The LM is BERT-flavored: learned position embeddings (no sinusoids), full
bidirectional self-attention, and an output head tied to the token embedding
table (plus a free bias).  Pretraining corrupts a fraction of the non-special
tokens per the 15% / 80-10-10 masking policy and trains with Adam under
linear warmup.  The resulting checkpoint is exactly what the translation
model's frozen-embedding provider consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DivergenceError
from .subword import BOS_ID, EOS_ID, MASK_ID, PAD_ID, SPECIALS
from .tensor import AdamHyper, AdamState, Tensor, adam_step, clip_grad_norm

IGNORE_LABEL = -1
NUM_SPECIALS = len(SPECIALS)


@dataclass
class LmConfig:
    vocab_size: int
    layers: int = 6
    heads: int = 8
    d_model: int = 512
    d_ff: int = 2048
    max_positions: int = 512
    dropout: float = 0.1
    norm_placement: str = "pre"

    def validate(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.vocab_size <= NUM_SPECIALS:
            raise ConfigError(f"LM vocab must exceed the {NUM_SPECIALS} specials")

    def as_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "layers": self.layers, "heads": self.heads,
            "d_model": self.d_model, "d_ff": self.d_ff, "max_positions": self.max_positions,
            "dropout": self.dropout, "norm_placement": self.norm_placement,
        }


@dataclass
class MaskingPolicy:
    """Which tokens get corrupted and how, BERT-style."""

    mask_prob: float = 0.15
    replace_with_mask_prob: float = 0.8
    replace_with_random_prob: float = 0.1
    keep_prob: float = 0.1

    def validate(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        total = self.replace_with_mask_prob + self.replace_with_random_prob + self.keep_prob
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"corruption probabilities must sum to 1, got {total}")


def mask_tokens(
    ids: np.ndarray,
    policy: MaskingPolicy,
    rng: np.random.Generator,
    vocab_size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a batch of token ids; labels carry the originals at the
    selected positions and IGNORE_LABEL everywhere else.

    Special tokens (ids below NUM_SPECIALS) are never selected.  All random
    draws happen unconditionally so the RNG stream length is a function of
    the batch shape alone.
    """
    policy.validate()
    ids = np.asarray(ids)
    selectable = ids >= NUM_SPECIALS
    u = rng.random(ids.shape)
    selected = selectable & (u < policy.mask_prob)
    action = rng.random(ids.shape)
    random_ids = rng.integers(NUM_SPECIALS, vocab_size, size=ids.shape)
    corrupted = ids.copy()
    to_mask = selected & (action < policy.replace_with_mask_prob)
    to_random = selected & ~to_mask & (action < policy.replace_with_mask_prob + policy.replace_with_random_prob)
    corrupted[to_mask] = MASK_ID
    corrupted[to_random] = random_ids[to_random]
    labels = np.where(selected, ids, IGNORE_LABEL)
    return corrupted, labels


class MaskedLm:
    """Encoder-only transformer with a tied MLM head."""

    def __init__(self, config: LmConfig, rng: np.random.Generator, vocab_hash: str = ""):
        config.validate()
        self.config = config
        self.vocab_hash = vocab_hash
        self.params: dict[str, Tensor] = {}
        d, f = config.d_model, config.d_ff
        self._add("tok.table", T.xavier_uniform(rng, (config.vocab_size, d)))
        self._add("pos.table", T.xavier_uniform(rng, (config.max_positions, d)))
        for layer in range(config.layers):
            prefix = f"enc.l{layer}"
            for w in ("wq", "wk", "wv", "wo"):
                self._add(f"{prefix}.self.{w}", T.xavier_uniform(rng, (d, d)))
                self._add(f"{prefix}.self.{w}_b", T.zeros(d))
            self._add(f"{prefix}.ff.w1", T.xavier_uniform(rng, (d, f)))
            self._add(f"{prefix}.ff.b1", T.zeros(f))
            self._add(f"{prefix}.ff.w2", T.xavier_uniform(rng, (f, d)))
            self._add(f"{prefix}.ff.b2", T.zeros(d))
            for k in (1, 2):
                self._add(f"{prefix}.ln{k}.gain", T.ones(d))
                self._add(f"{prefix}.ln{k}.bias", T.zeros(d))
        if config.norm_placement == "pre":
            self._add("enc.norm.gain", T.ones(d))
            self._add("enc.norm.bias", T.zeros(d))
        self._add("out.bias", T.zeros(config.vocab_size))
        actual = sum(p.size for p in self.params.values())
        assert actual == expected_lm_params(config), "LM parameter count drifted from formula"

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]):
        missing = sorted(set(self.params) - set(tensors))
        if missing:
            raise ConfigError(f"LM checkpoint is missing tensors: {missing[:3]}")
        for name, p in self.params.items():
            if tensors[name].shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.data.shape}")
            p.data = tensors[name].astype(np.float32, copy=True)

    def _sublayer(self, x, fn, ln_prefix, train, rng):
        gain, bias = self.params[f"{ln_prefix}.gain"], self.params[f"{ln_prefix}.bias"]
        if self.config.norm_placement == "pre":
            h = fn(T.layer_norm(x, gain, bias))
            return T.add(x, T.dropout(h, self.config.dropout, rng, train))
        h = fn(x)
        return T.layer_norm(T.add(x, T.dropout(h, self.config.dropout, rng, train)), gain, bias)

    def hidden_states(self, ids: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Final-layer representations [B, T, d] with PAD keys masked out."""
        from .model import _merge_heads, _split_heads, attention, pad_bias

        ids = np.atleast_2d(np.asarray(ids))
        t = ids.shape[1]
        if t > self.config.max_positions:
            raise ConfigError(f"sequence length {t} exceeds LM max_positions {self.config.max_positions}")
        bias = pad_bias(ids)
        x = T.add(T.embedding(self.params["tok.table"], ids), T.embedding(self.params["pos.table"], np.arange(t)))
        x = T.dropout(x, self.config.dropout, rng, train)
        heads = self.config.heads
        for layer in range(self.config.layers):
            prefix = f"enc.l{layer}"

            def attn(h, prefix=prefix):
                p = self.params
                q = _split_heads(T.add(T.matmul(h, p[f"{prefix}.self.wq"]), p[f"{prefix}.self.wq_b"]), heads)
                k = _split_heads(T.add(T.matmul(h, p[f"{prefix}.self.wk"]), p[f"{prefix}.self.wk_b"]), heads)
                v = _split_heads(T.add(T.matmul(h, p[f"{prefix}.self.wv"]), p[f"{prefix}.self.wv_b"]), heads)
                ctx, _ = attention(q, k, v, bias)
                return T.add(T.matmul(_merge_heads(ctx), p[f"{prefix}.self.wo"]), p[f"{prefix}.self.wo_b"])

            def ffn(h, prefix=prefix):
                p = self.params
                inner = T.relu(T.add(T.matmul(h, p[f"{prefix}.ff.w1"]), p[f"{prefix}.ff.b1"]))
                return T.add(T.matmul(inner, p[f"{prefix}.ff.w2"]), p[f"{prefix}.ff.b2"])

            x = self._sublayer(x, attn, f"{prefix}.ln1", train, rng)
            x = self._sublayer(x, ffn, f"{prefix}.ln2", train, rng)
        if self.config.norm_placement == "pre":
            x = T.layer_norm(x, self.params["enc.norm.gain"], self.params["enc.norm.bias"])
        return x

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        return T.add(T.matmul(hidden, T.transpose(self.params["tok.table"], (1, 0))), self.params["out.bias"])


def expected_lm_params(config: LmConfig) -> int:
    d, f = config.d_model, config.d_ff
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d
    total = config.vocab_size * d + config.max_positions * d + config.layers * per_layer
    if config.norm_placement == "pre":
        total += 2 * d
    return total + config.vocab_size  # output bias


def mlm_loss_and_accuracy(
    lm: MaskedLm,
    corrupted: np.ndarray,
    labels: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, float]:
    """Cross entropy and top-1 accuracy over the labeled positions only."""
    labels = np.asarray(labels)
    labeled = labels != IGNORE_LABEL
    n = int(labeled.sum())
    if n == 0:
        raise DataError("batch has no masked positions; re-draw the masking")
    hidden = lm.hidden_states(corrupted, train=train, rng=rng)
    logits = lm.mlm_logits(hidden)
    # IGNORE_LABEL positions are routed to PAD_ID, which no real label uses
    # (specials are never selected), so the pad filter drops exactly them.
    targets = np.where(labeled, labels, PAD_ID)
    loss = T.cross_entropy_label_smoothed(logits, targets, epsilon=0.0, pad_id=PAD_ID)
    pred = logits.data.reshape(-1, lm.config.vocab_size).argmax(axis=1).reshape(labels.shape)
    accuracy = float((pred[labeled] == labels[labeled]).mean())
    return loss, accuracy


def perplexity(mean_loss: float) -> float:
    """exp of the mean per-labeled-token cross entropy."""
    if mean_loss < 0:
        raise DataError(f"negative loss {mean_loss} has no perplexity")
    return math.exp(mean_loss)


def load_lm_model(path: str):
    """Rebuild a pretrained LM from its checkpoint (for the frozen provider)."""
    from .checkpoint import load_checkpoint
    from .errors import IntegrityError

    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "lm":
        raise IntegrityError(f"{path}: not a language-model checkpoint (kind={ck.meta.get('kind')!r})")
    lm = MaskedLm(LmConfig(**ck.meta["lm_config"]), np.random.default_rng(0),
                  vocab_hash=ck.meta["vocab_hash"])
    lm.load_state({k: v for k, v in ck.tensors.items() if not k.startswith("adam.")})
    return lm, ck


@dataclass
class LmTrainConfig:
    epochs: int = 100
    batch_sentences: int = 100
    lr: float = 1e-4
    warmup_steps: int = 30000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    valid_fraction: float = 0.005
    seed: int = 1
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)


@dataclass
class LmEpochMetrics:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_accuracy: float
    valid_perplexity: float
    is_best: bool

    def log_line(self) -> str:
        return f"{self.epoch}\t{self.valid_loss:.6f}\t{self.valid_accuracy:.6f}\t{self.valid_perplexity:.6f}"


def add_sentence_specials(ids: list[int]) -> list[int]:
    return [BOS_ID] + list(ids) + [EOS_ID]


def split_validation(sentences: list[list[int]], fraction: float, seed: int):
    """Shuffled split; validation gets at least one sentence when possible.

    The permutation comes from its own seed-derived generator so that the
    split is a pure function of (corpus, seed) and resuming a run never
    disturbs the main RNG stream.
    """
    if len(sentences) < 2:
        raise DataError("need at least 2 sentences to carve out a validation set")
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(sentences))
    n_valid = max(1, int(round(len(sentences) * fraction)))
    n_valid = min(n_valid, len(sentences) - 1)
    valid = [sentences[i] for i in order[:n_valid]]
    train = [sentences[i] for i in order[n_valid:]]
    return train, valid


def _pad_batch(sentences: list[list[int]], max_positions: int) -> np.ndarray:
    rows = [s[:max_positions] for s in sentences]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _masked_batch(ids: np.ndarray, policy: MaskingPolicy, rng: np.random.Generator, vocab_size: int):
    # re-draw until at least one position is labeled (tiny batches can miss)
    for _ in range(1000):
        corrupted, labels = mask_tokens(ids, policy, rng, vocab_size)
        if (labels != IGNORE_LABEL).any():
            return corrupted, labels
    raise DataError("masking produced no labeled positions in 1000 draws; check mask_prob")


def pretrain(
    lm: MaskedLm,
    sentences: list[list[int]],
    cfg: LmTrainConfig,
    rng: np.random.Generator,
    optimizer: AdamState | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> tuple[list[LmEpochMetrics], AdamState]:
    """Run MLM training; sentences are raw id lists (specials added here).

    `on_epoch(metrics, lm, optimizer, rng)` fires after every epoch so the
    caller can persist checkpoints and logs.  Returns the metric history and
    the optimizer state for resumption.
    """
    if not sentences:
        raise DataError("empty pretraining corpus")
    framed = [add_sentence_specials(s) for s in sentences]
    train_set, valid_set = split_validation(framed, cfg.valid_fraction, cfg.seed)
    hyper = AdamHyper(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                      weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps)
    if optimizer is None:
        optimizer = AdamState(hyper=hyper)
    params = lm.trainable_params()
    vocab = lm.config.vocab_size
    history: list[LmEpochMetrics] = []
    best_acc = -1.0
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        total_loss, total_labeled = 0.0, 0
        for start in range(0, len(order), cfg.batch_sentences):
            chunk = [train_set[i] for i in order[start : start + cfg.batch_sentences]]
            ids = _pad_batch(chunk, lm.config.max_positions)
            corrupted, labels = _masked_batch(ids, cfg.masking, rng, vocab)
            loss, _ = mlm_loss_and_accuracy(lm, corrupted, labels, train=True, rng=rng)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"LM loss diverged at epoch {epoch}")
            for p in params.values():
                p.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.grad_clip)
            adam_step(params, optimizer)
            n = int((labels != IGNORE_LABEL).sum())
            total_loss += loss.item() * n
            total_labeled += n
        vloss_sum, vacc_sum, vcount = 0.0, 0.0, 0
        for start in range(0, len(valid_set), cfg.batch_sentences):
            ids = _pad_batch(valid_set[start : start + cfg.batch_sentences], lm.config.max_positions)
            corrupted, labels = _masked_batch(ids, cfg.masking, rng, vocab)
            vloss_t, vacc = mlm_loss_and_accuracy(lm, corrupted, labels, train=False, rng=None)
            n = int((labels != IGNORE_LABEL).sum())
            vloss_sum += vloss_t.item() * n
            vacc_sum += vacc * n
            vcount += n
        vloss = vloss_sum / vcount
        metrics = LmEpochMetrics(
            epoch=epoch,
            train_loss=total_loss / max(total_labeled, 1),
            valid_loss=vloss,
            valid_accuracy=vacc_sum / vcount,
            valid_perplexity=perplexity(vloss),
            is_best=vacc_sum / vcount > best_acc,
        )
        if metrics.is_best:
            best_acc = metrics.valid_accuracy
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics, lm, optimizer, rng)
    return history, optimizer
