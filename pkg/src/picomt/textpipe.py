"""Corpus preprocessing: punctuation normalization, rule-based tokenization,
length/ratio cleaning, and detokenization of system output.

The tokenizer is a deterministic, versioned rule set (TOK_RULES_VERSION), not
a byte-exact emulation of any external script.  The detokenizer inverts it on
its own output; golden files under tests/data pin the behavior.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass

from .errors import DataError

TOK_RULES_VERSION = "tok-rules-v1"

# Replacement table applied by normalize(), in addition to control-character
# removal and whitespace collapsing.  Keys are single characters.
REPLACEMENTS: dict[str, str] = {
    # double quotes
    "“": '"', "”": '"', "„": '"', "‟": '"',
    "«": '"', "»": '"', "″": '"',
    # single quotes / apostrophes
    "‘": "'", "’": "'", "‚": "'", "‛": "'",
    "′": "'", "`": "'", "´": "'",
    # dashes
    "‒": "-", "–": "-", "—": "-", "―": "-",
    # ellipsis
    "…": "...",
    # exotic spaces
    " ": " ", " ": " ", " ": " ", " ": " ", "　": " ",
}

_REPLACE_MAP = {ord(k): v for k, v in REPLACEMENTS.items()}
_SPACE_RUN = re.compile(r"[ \t]+")


def normalize(text: str) -> str:
    """Map curly punctuation to ASCII, drop non-printing characters, collapse
    whitespace runs.  Idempotent."""
    text = text.translate(_REPLACE_MAP)
    out = []
    for ch in text:
        if ch in ("\n", "\t", " "):
            out.append(ch)
            continue
        cat = unicodedata.category(ch)
        if cat == "Cc" or cat == "Cf":
            continue  # control and invisible format characters
        out.append(ch)
    return _SPACE_RUN.sub(" ", "".join(out)).strip()


# Token rule set v1, tried in order:
#   1. URLs (http://, https://, www.), excluding trailing sentence punctuation
#   2. numbers with internal . , : separators (3.5  10,000  12:30)
#   3. apostrophe + letters ('t  's  'Brien) -- attaches left on detok
#   4. words: letter/digit runs, hyphenated compounds stay whole
#   5. runs of one repeated punctuation character (...  !!  --)
_TOKEN_RE = re.compile(
    r"(?:https?://|www\.)\S*[^\s.,;:!?)\"'\]]"
    r"|\d+(?:[.,:]\d+)+"
    r"|'\w+"
    r"|\w+(?:-\w+)*"
    r"|([^\w\s])\1*"
)


def tokenize(text: str) -> list[str]:
    """Split normalized text into tokens; deterministic and idempotent."""
    return [m.group(0) for m in _TOKEN_RE.finditer(text)]


# Detokenizer attachment classes.
_ATTACH_LEFT = set(".,!?;:%)]}…")
_ATTACH_RIGHT = set("([{")
_CURRENCY = set("$€£¥")


def detokenize(tokens: list[str]) -> str:
    """Rebuild natural text from tokens produced by tokenize().

    Punctuation re-attaches to the preceding word, openers to the following
    one, and straight double quotes pair up by toggling.
    """
    pieces: list[str] = []
    glue_next = False  # suppress the space before the next token
    quote_open = False
    for tok in tokens:
        no_space_before = (
            glue_next
            or (tok[0] in _ATTACH_LEFT and all(c == tok[0] for c in tok))
            or tok[0] == "'"
        )
        glue_next = False
        if tok == '"':
            if quote_open:
                no_space_before = True  # closing quote hugs the previous word
                quote_open = False
            else:
                quote_open = True
                glue_next = True
        elif (tok[0] in _ATTACH_RIGHT or tok[0] in _CURRENCY) and len(tok) == 1:
            glue_next = True
        if pieces and not no_space_before:
            pieces.append(" ")
        pieces.append(tok)
    return "".join(pieces)


@dataclass
class SentencePair:
    """A tokenized parallel sentence; tokens never contain whitespace."""

    source: list[str]
    target: list[str]
    line_number: int


@dataclass
class CleanReport:
    input_pairs: int = 0
    kept_pairs: int = 0
    dropped_by_length: int = 0
    dropped_by_ratio: int = 0
    dropped_empty: int = 0

    def reconciles(self) -> bool:
        return self.input_pairs == (
            self.kept_pairs + self.dropped_by_length + self.dropped_by_ratio + self.dropped_empty
        )

    def as_lines(self) -> list[str]:
        return [
            f"input_pairs: {self.input_pairs}",
            f"kept_pairs: {self.kept_pairs}",
            f"dropped_by_length: {self.dropped_by_length}",
            f"dropped_by_ratio: {self.dropped_by_ratio}",
            f"dropped_empty: {self.dropped_empty}",
        ]


KEEP = "keep"
DROP_LENGTH = "length"
DROP_RATIO = "ratio"
DROP_EMPTY = "empty"


def clean_pair(pair: SentencePair, max_len: int = 80, max_ratio: float = 1.5) -> str:
    """Classify a pair: empty side, then side longer than max_len, then a
    symmetric length ratio strictly greater than max_ratio.  Pure per-pair."""
    ls, lt = len(pair.source), len(pair.target)
    if ls == 0 or lt == 0:
        return DROP_EMPTY
    if ls > max_len or lt > max_len:
        return DROP_LENGTH
    if max(ls, lt) / min(ls, lt) > max_ratio:
        return DROP_RATIO
    return KEEP


def clean_corpus(
    pairs: list[SentencePair], max_len: int = 80, max_ratio: float = 1.5
) -> tuple[list[SentencePair], CleanReport]:
    report = CleanReport(input_pairs=len(pairs))
    kept: list[SentencePair] = []
    for pair in pairs:
        verdict = clean_pair(pair, max_len=max_len, max_ratio=max_ratio)
        if verdict == KEEP:
            kept.append(pair)
            report.kept_pairs += 1
        elif verdict == DROP_LENGTH:
            report.dropped_by_length += 1
        elif verdict == DROP_RATIO:
            report.dropped_by_ratio += 1
        else:
            report.dropped_empty += 1
    return kept, report


def read_lines_strict(path: str) -> list[str]:
    """Read UTF-8 lines, reporting the 1-based line number on bad bytes."""
    lines = []
    with open(path, "rb") as fh:
        for i, raw in enumerate(fh, start=1):
            try:
                lines.append(raw.decode("utf-8").rstrip("\r\n"))
            except UnicodeDecodeError as e:
                raise DataError(f"{path}:{i}: invalid UTF-8 ({e.reason})") from e
    return lines


def preprocess_corpus(
    src_path: str,
    tgt_path: str,
    max_len: int = 80,
    max_ratio: float = 1.5,
) -> tuple[list[SentencePair], CleanReport]:
    """normalize + tokenize + clean a parallel corpus of raw text files."""
    src_lines = read_lines_strict(src_path)
    tgt_lines = read_lines_strict(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"parallel files differ in length: {src_path} has {len(src_lines)} lines, "
            f"{tgt_path} has {len(tgt_lines)}"
        )
    pairs = [
        SentencePair(tokenize(normalize(s)), tokenize(normalize(t)), i)
        for i, (s, t) in enumerate(zip(src_lines, tgt_lines), start=1)
    ]
    return clean_corpus(pairs, max_len=max_len, max_ratio=max_ratio)
