"""Byte-pair encoding: merge learning, application, and vocabularies.

Merges are learned greedily on word frequencies: the most frequent adjacent
symbol pair wins each round, ties broken by lexicographic order of the pair.
Internally a word is its characters with END_OF_WORD appended to the final
one; serialized output instead marks non-final subwords with the CONNECTOR
suffix ("lo@@ wer"), which is also what the translation pipeline consumes.
"""

from __future__ import annotations

import hashlib
import heapq
from collections import Counter
from dataclasses import dataclass, field

from .errors import DataError

END_OF_WORD = "</w>"
CONNECTOR = "@@"
MERGE_FILE_HEADER = "#bpe-v1"

SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>", "<mask>")
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)


@dataclass
class SubwordModel:
    """An ordered merge list; order is the whole model."""

    merges: list[tuple[str, str]]
    end_of_word_marker: str = END_OF_WORD
    version: str = MERGE_FILE_HEADER
    _cache: dict[str, list[str]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise DataError("merge list contains duplicate pairs")

    def segment(self, word: str) -> list[str]:
        """Split one word into subwords, CONNECTOR-marked except the last.

        Joining the pieces with the markers stripped recovers the word
        exactly; unknown characters simply stay single-character subwords.
        """
        if not word:
            raise DataError("cannot segment an empty word")
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        marker = self.end_of_word_marker
        syms = list(word[:-1]) + [word[-1] + marker]
        for pair in self.merges:
            if len(syms) == 1:
                break
            syms = _merge_in_word(syms, pair)
        out = [s + CONNECTOR for s in syms[:-1]] + [syms[-1][: -len(marker)]]
        # an all-marker final symbol cannot occur: the marker always rides on
        # the last character
        self._cache[word] = out
        return out

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(MERGE_FILE_HEADER + "\n")
            for left, right in self.merges:
                fh.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path: str) -> "SubwordModel":
        merges: list[tuple[str, str]] = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != MERGE_FILE_HEADER:
                raise DataError(f"{path}: not a merge file (missing {MERGE_FILE_HEADER} header)")
            for i, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split(" ")
                if len(parts) != 2:
                    raise DataError(f"{path}:{i}: expected 'left right', got {line!r}")
                merges.append((parts[0], parts[1]))
        return cls(merges=merges)


def _merge_in_word(syms: list[str], pair: tuple[str, str]) -> list[str]:
    """Merge all left-to-right non-overlapping occurrences of `pair`."""
    left, right = pair
    if left not in syms:
        return syms
    out = []
    i = 0
    n = len(syms)
    while i < n:
        if i < n - 1 and syms[i] == left and syms[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def _count_pairs(syms: tuple[str, ...] | list[str]) -> Counter:
    c = Counter()
    for i in range(len(syms) - 1):
        c[(syms[i], syms[i + 1])] += 1
    return c


def learn_bpe(tokens, num_merges: int) -> SubwordModel:
    """Learn `num_merges` merges from a stream of words.

    Stops early once the best remaining pair occurs fewer than twice.  The
    pair scan counts overlapping occurrences; merging is left-to-right
    non-overlapping, same as application.
    """
    word_freqs = Counter(tokens)
    if not word_freqs:
        raise DataError("cannot learn BPE from an empty corpus")
    words: list[list] = []  # [symbols, freq]
    for word, freq in word_freqs.items():
        syms = list(word[:-1]) + [word[-1] + END_OF_WORD]
        words.append([syms, freq])

    pair_counts: Counter = Counter()
    pair_words: dict[tuple[str, str], set[int]] = {}
    for idx, (syms, freq) in enumerate(words):
        for pair, k in _count_pairs(syms).items():
            pair_counts[pair] += k * freq
            pair_words.setdefault(pair, set()).add(idx)

    # lazy max-heap keyed by (-count, pair): highest count first, then the
    # lexicographically smallest pair
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    def push(pair):
        c = pair_counts.get(pair, 0)
        if c > 0:
            heapq.heappush(heap, (-c, pair))

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges:
        best = None
        while heap:
            neg, pair = heapq.heappop(heap)
            if pair_counts.get(pair, 0) == -neg:
                best = pair
                break
        if best is None or pair_counts[best] < 2:
            break
        merges.append(best)
        touched: set[tuple[str, str]] = set()
        for idx in sorted(pair_words.get(best, ())):
            syms, freq = words[idx]
            old = _count_pairs(syms)
            if (best[0], best[1]) not in old:
                continue  # stale index entry
            new_syms = _merge_in_word(syms, best)
            new = _count_pairs(new_syms)
            for pair, k in old.items():
                pair_counts[pair] -= k * freq
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                touched.add(pair)
            for pair, k in new.items():
                pair_counts[pair] += k * freq
                pair_words.setdefault(pair, set()).add(idx)
                touched.add(pair)
            words[idx][0] = new_syms
        for pair in touched:
            push(pair)
    return SubwordModel(merges=merges)


def apply_bpe(word: str, model: SubwordModel) -> list[str]:
    return model.segment(word)


def segment_line(line: str, model: SubwordModel) -> list[str]:
    out: list[str] = []
    for word in line.split():
        out.extend(model.segment(word))
    return out


def merge_bpe_markers(subwords: list[str]) -> list[str]:
    """Undo segmentation: glue CONNECTOR-marked pieces back into words."""
    words: list[str] = []
    buf = ""
    for piece in subwords:
        if piece.endswith(CONNECTOR):
            buf += piece[: -len(CONNECTOR)]
        else:
            words.append(buf + piece)
            buf = ""
    if buf:
        words.append(buf)  # dangling connector at end of line: keep the text
    return words


class Vocabulary:
    """Bijective token<->id map with the reserved specials at ids 0..4."""

    def __init__(self, tokens_with_counts: list[tuple[str, int]]):
        self.token_of: list[str] = list(SPECIALS)
        self.counts: list[int] = [0] * len(SPECIALS)
        self.id_of: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for token, count in tokens_with_counts:
            if token in self.id_of:
                raise DataError(f"duplicate token in vocabulary: {token!r}")
            if not token or any(ch.isspace() for ch in token):
                raise DataError(f"vocabulary token contains whitespace or is empty: {token!r}")
            self.id_of[token] = len(self.token_of)
            self.token_of.append(token)
            self.counts.append(count)

    def __len__(self):
        return len(self.token_of)

    def __contains__(self, token: str):
        return token in self.id_of

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.id_of.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.token_of):
                raise DataError(f"token id {i} out of range [0, {len(self.token_of)})")
            out.append(self.token_of[i])
        return out

    def serialize(self) -> bytes:
        lines = [f"{t}\t{c}" for t, c in zip(self.token_of[len(SPECIALS):], self.counts[len(SPECIALS):])]
        return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    def save(self, path: str):
        with open(path, "wb") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        entries: list[tuple[str, int]] = []
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{i}: expected 'token<TAB>count', got {line!r}")
                entries.append((parts[0], int(parts[1])))
        return cls(entries)


def build_vocab(tokens, size_budget: int) -> Vocabulary:
    """Keep the most frequent tokens up to `size_budget` (specials included).

    Frequency ties go to the token seen first in the stream.
    """
    if size_budget < len(SPECIALS):
        raise DataError(f"vocabulary budget {size_budget} is below the {len(SPECIALS)} reserved specials")
    counts: Counter = Counter()
    first_seen: dict[str, int] = {}
    for pos, tok in enumerate(tokens):
        counts[tok] += 1
        if tok not in first_seen:
            first_seen[tok] = pos
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], first_seen[kv[0]]))
    return Vocabulary(ranked[: size_budget - len(SPECIALS)])


def encode_ids(tokens: list[str], vocab: Vocabulary) -> list[int]:
    return vocab.encode(tokens)


def decode_ids(ids, vocab: Vocabulary) -> list[str]:
    return vocab.decode(ids)
