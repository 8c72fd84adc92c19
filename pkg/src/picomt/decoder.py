"""Beam-search decoding with deterministic tie handling.

The search keeps at most `beam_size` live hypotheses.  Each step expands all
of them over the full vocabulary, sorts the candidates by cumulative
log-probability (ties: lexicographically smaller token-id sequence first,
which also prefers the shorter of two prefix-related sequences), and keeps
the top `beam_size`.  Candidates that just emitted EOS retire to the
finished pool and are never extended.  The search stops when the best
finished hypothesis strictly outscores every live one, when no live
hypotheses remain, or at `max_len` generated tokens.

Scoring works on any callable that maps a batch of equal-length prefixes to
per-token log-probabilities, so toy distributions test the search logic
without a neural model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .subword import BOS_ID, EOS_ID, merge_bpe_markers
from .textpipe import detokenize

log = logging.getLogger("picomt")

# candidate pools at or below this size are sorted exactly; larger pools are
# pre-thinned by score with argpartition before the exact tie-break sort
_EXACT_SORT_LIMIT = 4096


@dataclass
class Hypothesis:
    """A (partial) translation: ids start with BOS; EOS closes finished ones."""

    ids: tuple[int, ...]
    logprob: float
    finished: bool = False
    truncated: bool = False

    def sort_key(self):
        return (-self.logprob, self.ids)

    def generated(self) -> list[int]:
        """Token ids without BOS and without the trailing EOS."""
        ids = self.ids[1:]
        if self.finished and ids and ids[-1] == EOS_ID:
            ids = ids[:-1]
        return list(ids)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _top_candidates(live: list[Hypothesis], logps: np.ndarray, k: int):
    """Best k (score, ids) expansions with exact deterministic tie-break."""
    n, vocab = logps.shape
    totals = np.array([h.logprob for h in live], dtype=np.float64)[:, None] + logps
    flat = totals.ravel()
    if flat.size > _EXACT_SORT_LIMIT:
        cut = min(flat.size, max(4 * k, 64))
        pool = np.argpartition(-flat, cut - 1)[:cut]
    else:
        pool = np.arange(flat.size)
    cands = [(-flat[i], live[i // vocab].ids + (int(i % vocab),)) for i in pool]
    cands.sort()
    return [(-neg, ids) for neg, ids in cands[:k]]


def beam_search(
    next_logprobs,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
    beam_size: int = 12,
    max_len: int = 64,
    nbest: int = 1,
    length_norm: bool = False,
) -> list[Hypothesis]:
    """Return the `nbest` best hypotheses (best first).

    `next_logprobs` receives a list of equal-length id prefixes and returns
    an [n, V] array of log-probabilities for the next token.  With no
    finished hypothesis by `max_len`, the best live one comes back flagged
    `truncated`.  `length_norm` divides scores by generated length for the
    final ranking only.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    nbest = max(1, min(nbest, beam_size))
    live = [Hypothesis(ids=(bos_id,), logprob=0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        logps = next_logprobs([list(h.ids) for h in live])
        new_live: list[Hypothesis] = []
        for score, ids in _top_candidates(live, np.asarray(logps), beam_size):
            if ids[-1] == eos_id:
                finished.append(Hypothesis(ids, score, finished=True))
            else:
                new_live.append(Hypothesis(ids, score))
        finished.sort(key=Hypothesis.sort_key)
        del finished[beam_size:]
        live = new_live
        if not live:
            break
        # live scores only fall as hypotheses grow, so once the nbest-th
        # finished score beats the best live score nothing can improve
        if len(finished) >= nbest and finished[nbest - 1].logprob > live[0].logprob:
            break
    if not finished:
        best = min(live, key=Hypothesis.sort_key)
        return [Hypothesis(best.ids, best.logprob, finished=False, truncated=True)]
    if length_norm:
        finished.sort(key=lambda h: (-h.logprob / max(1, len(h.ids) - 1), h.ids))
    return finished[:nbest]


def score_hypothesis(next_logprobs, ids) -> float:
    """Teacher-force a token sequence and sum the per-step log-probabilities.

    Recomputes the score the search assigned, for verification.
    """
    ids = list(ids)
    total = 0.0
    for t in range(1, len(ids)):
        logps = np.asarray(next_logprobs([ids[:t]]))
        total += float(logps[0, ids[t]])
    return total


def model_step_fn(model, src_ids: list[int]):
    """Encode one framed source sentence and return the prefix scorer."""
    with T.no_grad():
        memory, src_bias = model.encode(np.asarray([src_ids], dtype=np.int64))

    def step(prefixes: list[list[int]]) -> np.ndarray:
        arr = np.asarray(prefixes, dtype=np.int64)
        with T.no_grad():
            logits = model.decode_logits(memory, src_bias, arr)
        return log_softmax(logits.data[:, -1, :])

    return step


def frame_source(src_ids: list[int]) -> list[int]:
    return [BOS_ID] + list(src_ids) + [EOS_ID]


def translate_ids(
    model,
    src_ids: list[int],
    beam_size: int = 12,
    max_len: int | None = None,
    nbest: int = 1,
    length_norm: bool = False,
) -> list[Hypothesis]:
    """Beam-translate raw source ids (specials added here)."""
    framed = frame_source(src_ids)
    if max_len is None:
        max_len = 2 * len(framed) + 10
    # the decoder input is BOS + generated prefix, so it may reach max_len + 1
    max_len = min(max_len, model.config.max_positions - 1)
    step = model_step_fn(model, framed)
    return beam_search(
        step, bos_id=BOS_ID, eos_id=EOS_ID, beam_size=beam_size,
        max_len=max_len, nbest=nbest, length_norm=length_norm,
    )


def translate_corpus(
    model,
    src_lines: list[str],
    src_vocab,
    tgt_vocab,
    beam_size: int = 12,
    detok: bool = True,
    max_len: int | None = None,
    nbest: int = 1,
    length_norm: bool = False,
) -> list[str]:
    """Translate BPE-segmented source lines; output line count matches input.

    With nbest > 1 each input line yields `rank<TAB>score<TAB>text` lines.
    A line that fails to decode becomes an empty line and a logged warning.
    """
    out: list[str] = []
    for lineno, line in enumerate(src_lines, start=1):
        try:
            ids = src_vocab.encode(line.split())
            hyps = translate_ids(
                model, ids, beam_size=beam_size, max_len=max_len, nbest=nbest, length_norm=length_norm
            )
            rendered = []
            for h in hyps:
                tokens = merge_bpe_markers(tgt_vocab.decode(h.generated()))
                rendered.append(detokenize(tokens) if detok else " ".join(tokens))
            if nbest == 1:
                out.append(rendered[0])
            else:
                out.append("\n".join(f"{i}\t{h.logprob:.6f}\t{text}"
                                     for i, (h, text) in enumerate(zip(hyps, rendered))))
        except Exception:  # noqa: BLE001 - keep the corpus run alive per line
            log.warning("line %d failed to translate; emitting empty line", lineno, exc_info=True)
            out.append("")
    return out
