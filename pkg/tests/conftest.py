"""Shared fixtures and independent oracles.

The oracles here deliberately avoid the library's own code paths: matmul is
a triple loop, BPE learning is a full recount per merge, beam search is
exhaustive enumeration, and gradients come from central finite differences.
"""

from __future__ import annotations

from collections import Counter

import numpy as np
import pytest


# -- gradient checking ---------------------------------------------------------


def fd_gradient(loss_fn, arr: np.ndarray, h: float = 1e-2) -> np.ndarray:
    """Central finite differences of a scalar loss with respect to `arr`,
    evaluated through the float32 forward path."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-3):
    """Relative error against the largest gradient magnitude, floored at 1."""
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = max(1.0, float(np.abs(numeric).max()))
    err = float(np.abs(analytic - numeric).max()) / denom
    assert err <= rtol, f"gradient mismatch: relative error {err:.2e} > {rtol:.0e}"


# -- linear algebra oracle -------------------------------------------------------


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += float(a[i, t]) * float(b[t, j])
    return out


# -- BPE oracle ------------------------------------------------------------------


def naive_learn_bpe(tokens, num_merges: int) -> list[tuple[str, str]]:
    """Greedy most-frequent-pair merging by full recount each round; ties go
    to the lexicographically smallest pair; stops when the best count is 1."""
    from picomt.subword import END_OF_WORD

    freqs = Counter(tokens)
    vocab = {}
    for word, f in freqs.items():
        vocab[tuple(list(word[:-1]) + [word[-1] + END_OF_WORD])] = f
    merges = []
    for _ in range(num_merges):
        counts = Counter()
        for syms, f in vocab.items():
            for i in range(len(syms) - 1):
                counts[(syms[i], syms[i + 1])] += f
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        best = min(p for p, c in counts.items() if c == best_count)
        merges.append(best)
        new_vocab = {}
        for syms, f in vocab.items():
            out = []
            i = 0
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == best:
                    out.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            new_vocab[tuple(out)] = new_vocab.get(tuple(out), 0) + f
        vocab = new_vocab
    return merges


# -- beam search oracles -----------------------------------------------------------


class RandomToyModel:
    """Deterministic random next-token distributions keyed by the prefix."""

    def __init__(self, vocab_size: int, seed: int, concentration: float = 1.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.concentration = concentration

    def __call__(self, prefixes):
        out = np.empty((len(prefixes), self.vocab_size))
        for i, prefix in enumerate(prefixes):
            rng = np.random.default_rng([self.seed, 7919, *[int(t) + 1 for t in prefix]])
            probs = rng.dirichlet(np.full(self.vocab_size, self.concentration))
            out[i] = np.log(np.maximum(probs, 1e-300))
        return out


def greedy_decode(step_fn, bos_id, eos_id, max_len):
    """Argmax decoding (ties to the lowest token id, numpy convention)."""
    ids = [bos_id]
    score = 0.0
    for _ in range(max_len):
        logps = np.asarray(step_fn([ids]))[0]
        tok = int(np.argmax(logps))
        score += float(logps[tok])
        ids.append(tok)
        if tok == eos_id:
            return tuple(ids), score, True
    return tuple(ids), score, False


def enumerate_best(step_fn, bos_id, eos_id, vocab_size, max_len, top_k=1):
    """Exhaustively score every EOS-terminated sequence of at most max_len
    generated tokens; rank by (score desc, token ids lexicographic)."""
    finished = []

    def recurse(prefix, score, depth):
        if depth == max_len:
            return
        logps = np.asarray(step_fn([list(prefix)]))[0]
        for tok in range(vocab_size):
            s = score + float(logps[tok])
            if tok == eos_id:
                finished.append((s, prefix + (tok,)))
            else:
                recurse(prefix + (tok,), s, depth + 1)

    recurse((bos_id,), 0.0, 0)
    finished.sort(key=lambda it: (-it[0], it[1]))
    return finished[:top_k]


# -- corpora ---------------------------------------------------------------------


def make_copy_corpus(n_pairs: int, vocab: list[str], rng: np.random.Generator,
                     min_len: int = 8, max_len: int = 14) -> list[list[str]]:
    """Unique random symbol sentences; copying them is the learning task."""
    seen = set()
    corpus = []
    while len(corpus) < n_pairs:
        n = int(rng.integers(min_len, max_len + 1))
        sent = tuple(vocab[int(i)] for i in rng.integers(0, len(vocab), size=n))
        if sent in seen:
            continue
        seen.add(sent)
        corpus.append(list(sent))
    return corpus


COPY_SYMBOLS = [
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu",
    "na", "pe", "qi", "ro", "su", "ta", "ve", "wi", "xo", "zu",
]


def build_copy_task(n_train=30, n_dev=5, seed=77, min_len=4, max_len=8):
    """Vocabulary, encoded pairs, and dev references for a copy problem."""
    from picomt.subword import build_vocab

    gen = np.random.default_rng(seed)
    sents = make_copy_corpus(n_train + n_dev, COPY_SYMBOLS, gen, min_len=min_len, max_len=max_len)
    vocab = build_vocab([tok for sent in sents for tok in sent], 64)
    train = sents[:n_train]
    dev = sents[n_train:]
    return {
        "vocab": vocab,
        "train_pairs": [(vocab.encode(s), vocab.encode(s)) for s in train],
        "dev_src_ids": [vocab.encode(s) for s in dev],
        "dev_refs": [" ".join(s) for s in dev],
        "train_sents": train,
        "dev_sents": dev,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
