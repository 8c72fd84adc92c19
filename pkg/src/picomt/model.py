"""Transformer encoder-decoder with swappable source-embedding providers.

Two ways to feed the encoder:

* ``lookup``: a jointly trained embedding table, scaled by sqrt(d_model),
  plus sinusoidal positional encoding.
* ``frozen_lm``: the final hidden layer of a pre-trained masked language
  model whose parameters stay fixed; a trainable linear resize layer maps
  the LM width to d_model.  No positional encoding is added (the LM output
  already carries position), and the resize layer is applied even when the
  widths happen to match.

The target side always uses a trained lookup table, and that same matrix
produces the output logits (weight tying): logits = states @ table^T.

Layer normalization defaults to pre-norm (before each sublayer, plus a final
norm after the stack) for stability at high dropout; ``norm_placement="post"``
switches to the classic post-norm arrangement.  Dropout is applied to the
embeddings and to each sublayer output before its residual connection.

Parameter count (lookup provider, pre-norm), asserted at build time:

    encoder layer: 4*(d^2+d) + (d*f + f) + (f*d + d) + 2*2d
    decoder layer: 8*(d^2+d) + (d*f + f) + (f*d + d) + 3*2d
    total = Vs*d + Vt*d + L*(enc + dec) + 2*2d          (final norms)

with the source term replaced by (d_lm*d + d) for frozen_lm, whose LM
parameters count toward the total but not the trainable set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .subword import PAD_ID
from .tensor import Tensor

NEG_BIAS = np.float32(-1e9)  # additive attention mask; exp() underflows to 0


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    layers: int = 6
    heads: int = 8
    d_model: int = 512
    d_ff: int = 2048
    dropout: float = 0.3
    provider_kind: str = "lookup"  # lookup | frozen_lm
    max_positions: int = 512
    norm_placement: str = "pre"  # pre | post

    def validate(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.provider_kind not in ("lookup", "frozen_lm"):
            raise ConfigError(f"unknown provider_kind {self.provider_kind!r}")
        if self.norm_placement not in ("pre", "post"):
            raise ConfigError(f"norm_placement must be pre or post, got {self.norm_placement!r}")
        for field_name in ("src_vocab_size", "tgt_vocab_size", "layers", "heads", "d_model", "d_ff", "max_positions"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be positive")


def sinusoidal_pe(position: int, dim_index: int, d_model: int) -> float:
    """One positional-encoding entry: sin on even dims, cos on odd dims,
    wavelength 10000^(2i/d_model)."""
    if not 0 <= dim_index < d_model:
        raise ConfigError(f"dim_index {dim_index} outside [0, {d_model})")
    i = dim_index // 2
    angle = position / (10000.0 ** (2.0 * i / d_model))
    return math.sin(angle) if dim_index % 2 == 0 else math.cos(angle)


def sinusoidal_table(max_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d_model)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


def pad_bias(ids: np.ndarray, pad_id: int = PAD_ID) -> np.ndarray:
    """[B, 1, 1, T] additive bias: NEG_BIAS at PAD key positions."""
    bias = np.where(ids == pad_id, NEG_BIAS, np.float32(0.0)).astype(np.float32)
    return bias[:, None, None, :]

def causal_bias(t: int) -> np.ndarray:
    """[1, 1, T, T] additive bias hiding positions j > i."""
    m = np.triu(np.full((t, t), NEG_BIAS, dtype=np.float32), k=1)
    return m[None, None, :, :]


def attention(q: Tensor, k: Tensor, v: Tensor, mask_bias: np.ndarray | None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over [B, h, T, dh] inputs.

    Returns the context and the attention weights (each row sums to 1).
    """
    dh = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask_bias is not None:
        scores = T.add(scores, Tensor(mask_bias))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


class TransformerMT:
    """The full encoder-decoder; parameters live in a flat name->Tensor map."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, provider):
        config.validate()
        if provider.kind != config.provider_kind:
            raise ConfigError(
                f"provider kind {provider.kind!r} does not match config {config.provider_kind!r}"
            )
        self.config = config
        self.provider = provider
        self.params: dict[str, Tensor] = {}
        d, f = config.d_model, config.d_ff
        for name, p in provider.trainable_params().items():
            self.params[name] = p
        self.params["tgt.table"] = Tensor(
            T.xavier_uniform(rng, (config.tgt_vocab_size, d)), requires_grad=True, name="tgt.table"
        )
        for side, n_attn in (("enc", 1), ("dec", 2)):
            for layer in range(config.layers):
                prefix = f"{side}.l{layer}"
                for sub in range(n_attn):
                    tag = ["self", "cross"][sub]
                    for w in ("wq", "wk", "wv", "wo"):
                        self._add(f"{prefix}.{tag}.{w}", T.xavier_uniform(rng, (d, d)))
                        self._add(f"{prefix}.{tag}.{w}_b", T.zeros(d))
                self._add(f"{prefix}.ff.w1", T.xavier_uniform(rng, (d, f)))
                self._add(f"{prefix}.ff.b1", T.zeros(f))
                self._add(f"{prefix}.ff.w2", T.xavier_uniform(rng, (f, d)))
                self._add(f"{prefix}.ff.b2", T.zeros(d))
                n_norms = 2 if side == "enc" else 3
                for k in range(1, n_norms + 1):
                    self._add(f"{prefix}.ln{k}.gain", T.ones(d))
                    self._add(f"{prefix}.ln{k}.bias", T.zeros(d))
            if config.norm_placement == "pre":
                self._add(f"{side}.norm.gain", T.ones(d))
                self._add(f"{side}.norm.bias", T.zeros(d))
        self.pe = sinusoidal_table(config.max_positions, d)
        actual = sum(p.size for p in self.params.values())
        expected = expected_trainable_params(config, d_lm=getattr(provider, "d_lm", None))
        assert actual == expected, f"parameter count drifted: built {actual}, formula says {expected}"

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    # -- parameter access -----------------------------------------------------

    def trainable_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """All weights, frozen LM included, for checkpointing."""
        state = {name: p.data for name, p in self.params.items()}
        if self.provider.kind == "frozen_lm":
            for name, p in self.provider.lm.params.items():
                state["lm." + name] = p.data
        return state

    def load_state(self, tensors: dict[str, np.ndarray]):
        own = self.state_tensors()
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise ConfigError(f"checkpoint does not match model: missing {missing[:3]}, extra {extra[:3]}")
        for name, p in self.params.items():
            if tensors[name].shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.data.shape}")
            p.data = tensors[name].astype(np.float32, copy=True)
        if self.provider.kind == "frozen_lm":
            for name, p in self.provider.lm.params.items():
                p.data = tensors["lm." + name].astype(np.float32, copy=True)
            self.provider.clear_cache()

    def param_count(self) -> tuple[int, int]:
        """(total, trainable); they differ only for frozen-LM providers."""
        trainable = sum(p.size for p in self.params.values())
        total = trainable
        if self.provider.kind == "frozen_lm":
            total += sum(p.size for p in self.provider.lm.params.values())
        return total, trainable

    # -- forward passes --------------------------------------------------------

    def _sublayer(self, x, fn, ln_prefix, train, rng):
        p = self.params
        gain, bias = p[f"{ln_prefix}.gain"], p[f"{ln_prefix}.bias"]
        if self.config.norm_placement == "pre":
            h = fn(T.layer_norm(x, gain, bias))
            return T.add(x, T.dropout(h, self.config.dropout, rng, train))
        h = fn(x)
        return T.layer_norm(T.add(x, T.dropout(h, self.config.dropout, rng, train)), gain, bias)

    def _mha(self, prefix, q_in, kv_in, mask_bias, train, rng):
        p = self.params
        heads = self.config.heads
        q = _split_heads(T.add(T.matmul(q_in, p[f"{prefix}.wq"]), p[f"{prefix}.wq_b"]), heads)
        k = _split_heads(T.add(T.matmul(kv_in, p[f"{prefix}.wk"]), p[f"{prefix}.wk_b"]), heads)
        v = _split_heads(T.add(T.matmul(kv_in, p[f"{prefix}.wv"]), p[f"{prefix}.wv_b"]), heads)
        ctx, _ = attention(q, k, v, mask_bias)
        return T.add(T.matmul(_merge_heads(ctx), p[f"{prefix}.wo"]), p[f"{prefix}.wo_b"])

    def _ffn(self, prefix, x):
        p = self.params
        h = T.relu(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return T.add(T.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def encode(self, src_ids: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        """Run the encoder; returns (memory [B,Ts,d], source pad bias)."""
        src_ids = np.atleast_2d(np.asarray(src_ids))
        bias = pad_bias(src_ids)
        x = self.provider(src_ids, train=train, rng=rng)
        for layer in range(self.config.layers):
            prefix = f"enc.l{layer}"
            x = self._sublayer(
                x, lambda h: self._mha(f"{prefix}.self", h, h, bias, train, rng), f"{prefix}.ln1", train, rng
            )
            x = self._sublayer(x, lambda h: self._ffn(f"{prefix}.ff", h), f"{prefix}.ln2", train, rng)
        if self.config.norm_placement == "pre":
            x = T.layer_norm(x, self.params["enc.norm.gain"], self.params["enc.norm.bias"])
        return x, bias

    def decode_logits(
        self,
        memory: Tensor,
        src_bias: np.ndarray,
        tgt_in_ids: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Logits [B, Tt, V_tgt] for every prefix position (causally masked)."""
        tgt_in_ids = np.atleast_2d(np.asarray(tgt_in_ids))
        t = tgt_in_ids.shape[1]
        if t > self.config.max_positions:
            raise ConfigError(f"target length {t} exceeds max_positions {self.config.max_positions}")
        table = self.params["tgt.table"]
        x = T.mul(T.embedding(table, tgt_in_ids), math.sqrt(self.config.d_model))
        x = T.add(x, Tensor(self.pe[:t]))
        x = T.dropout(x, self.config.dropout, rng, train)
        causal = causal_bias(t)
        for layer in range(self.config.layers):
            prefix = f"dec.l{layer}"
            x = self._sublayer(
                x, lambda h: self._mha(f"{prefix}.self", h, h, causal, train, rng), f"{prefix}.ln1", train, rng
            )
            x = self._sublayer(
                x, lambda h: self._mha(f"{prefix}.cross", h, memory, src_bias, train, rng), f"{prefix}.ln2", train, rng
            )
            x = self._sublayer(x, lambda h: self._ffn(f"{prefix}.ff", h), f"{prefix}.ln3", train, rng)
        if self.config.norm_placement == "pre":
            x = T.layer_norm(x, self.params["dec.norm.gain"], self.params["dec.norm.bias"])
        return T.matmul(x, T.transpose(table, (1, 0)))  # tied output projection

    def loss_on_batch(
        self,
        src_ids: np.ndarray,
        tgt_in_ids: np.ndarray,
        tgt_out_ids: np.ndarray,
        label_smoothing: float = 0.0,
        train: bool = True,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        memory, src_bias = self.encode(src_ids, train=train, rng=rng)
        logits = self.decode_logits(memory, src_bias, tgt_in_ids, train=train, rng=rng)
        return T.cross_entropy_label_smoothed(logits, tgt_out_ids, epsilon=label_smoothing, pad_id=PAD_ID)


class LookupEmbedding:
    """Trained table + sinusoidal positions, scaled by sqrt(d_model)."""

    kind = "lookup"

    def __init__(self, vocab_size: int, d_model: int, max_positions: int, dropout: float,
                 rng: np.random.Generator, vocab_hash: str = ""):
        self.table = Tensor(T.xavier_uniform(rng, (vocab_size, d_model)), requires_grad=True, name="src.table")
        self.pe = sinusoidal_table(max_positions, d_model)
        self.dropout = dropout
        self.scale = math.sqrt(d_model)
        self.vocab_hash = vocab_hash

    def trainable_params(self) -> dict[str, Tensor]:
        return {"src.table": self.table}

    def __call__(self, ids: np.ndarray, train: bool, rng: np.random.Generator | None) -> Tensor:
        t = ids.shape[1]
        if t > self.pe.shape[0]:
            raise ConfigError(f"source length {t} exceeds max_positions {self.pe.shape[0]}")
        x = T.add(T.mul(T.embedding(self.table, ids), self.scale), Tensor(self.pe[:t]))
        return T.dropout(x, self.dropout, rng, train)


class FrozenLmEmbedding:
    """Fixed language-model features plus a trainable resize projection.

    The LM always runs in eval mode under no_grad, so its parameters never
    receive gradient buffers; per-sentence hidden states are memoized since
    they cannot change during MT training.  No positional encoding is added.
    """

    kind = "frozen_lm"

    def __init__(self, lm, d_model: int, dropout: float, rng: np.random.Generator):
        lm.freeze()
        self.lm = lm
        self.d_lm = lm.config.d_model
        self.resize_w = Tensor(T.xavier_uniform(rng, (self.d_lm, d_model)), requires_grad=True, name="src.resize.w")
        self.resize_b = Tensor(T.zeros(d_model), requires_grad=True, name="src.resize.b")
        self.dropout = dropout
        self.vocab_hash = lm.vocab_hash
        self._feature_cache: dict[bytes, np.ndarray] = {}

    def trainable_params(self) -> dict[str, Tensor]:
        return {"src.resize.w": self.resize_w, "src.resize.b": self.resize_b}

    def clear_cache(self):
        self._feature_cache.clear()

    def _features(self, ids: np.ndarray) -> np.ndarray:
        key = ids.astype(np.int64).tobytes() + str(ids.shape).encode()
        hit = self._feature_cache.get(key)
        if hit is None:
            with T.no_grad():
                hit = self.lm.hidden_states(ids, train=False, rng=None).data
            self._feature_cache[key] = hit
        return hit

    def __call__(self, ids: np.ndarray, train: bool, rng: np.random.Generator | None) -> Tensor:
        h = Tensor(self._features(ids))  # constant: gradient stops here
        x = T.add(T.matmul(h, self.resize_w), self.resize_b)
        return T.dropout(x, self.dropout, rng, train)


def _enc_layer_params(d: int, f: int) -> int:
    return 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d


def _dec_layer_params(d: int, f: int) -> int:
    return 8 * (d * d + d) + (d * f + f) + (f * d + d) + 3 * 2 * d


def expected_trainable_params(config: ModelConfig, d_lm: int | None = None) -> int:
    """The documented closed-form parameter count for a given configuration."""
    d, f = config.d_model, config.d_ff
    if config.provider_kind == "lookup":
        src = config.src_vocab_size * d
    else:
        if d_lm is None:
            raise ConfigError("frozen_lm parameter count needs the LM width")
        src = d_lm * d + d
    total = src + config.tgt_vocab_size * d
    total += config.layers * (_enc_layer_params(d, f) + _dec_layer_params(d, f))
    if config.norm_placement == "pre":
        total += 2 * 2 * d
    return total


def build_model(
    config: ModelConfig,
    rng: np.random.Generator,
    lm=None,
    src_vocab_hash: str = "",
) -> TransformerMT:
    """Construct a model with the provider named by the config."""
    config.validate()
    if config.provider_kind == "lookup":
        provider = LookupEmbedding(
            config.src_vocab_size, config.d_model, config.max_positions, config.dropout, rng,
            vocab_hash=src_vocab_hash,
        )
    else:
        if lm is None:
            raise ConfigError("provider_kind=frozen_lm requires a language model")
        if src_vocab_hash and lm.vocab_hash and src_vocab_hash != lm.vocab_hash:
            raise ConfigError(
                "source vocabulary does not match the language model's vocabulary "
                f"(hash {src_vocab_hash[:12]}... vs {lm.vocab_hash[:12]}...)"
            )
        if lm.config.vocab_size != config.src_vocab_size:
            raise ConfigError(
                f"source vocab size {config.src_vocab_size} differs from LM vocab {lm.config.vocab_size}"
            )
        provider = FrozenLmEmbedding(lm, config.d_model, config.dropout, rng)
    return TransformerMT(config, rng, provider)
