"""Corpus-level BLEU: clipped modified n-gram precision plus brevity penalty.

Counts aggregate over the whole corpus (sum of clipped matches over sum of
candidate n-grams), single reference per line, computed on whitespace tokens.
Without smoothing any zero precision zeroes the score, which is the classic
behavior; add-one smoothing is available for tiny test corpora.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import DataError


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    @property
    def ratio(self) -> float:
        return self.hyp_len / self.ref_len if self.ref_len else 0.0


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    hypotheses: list[str],
    references: list[str],
    max_n: int = 4,
    lowercase: bool = False,
    smooth: bool = False,
) -> BleuReport:
    """Score tokenized hypothesis lines against reference lines.

    `lowercase=True` folds both sides before counting (the "ci" variant).
    """
    if len(hypotheses) != len(references):
        raise DataError(f"line count mismatch: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise DataError("cannot score an empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp_line, ref_line in zip(hypotheses, references):
        if lowercase:
            hyp_line, ref_line = hyp_line.lower(), ref_line.lower()
        hyp = hyp_line.split()
        ref = ref_line.split()
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            counts = _ngram_counts(hyp, n)
            if not counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
            total[n - 1] += sum(counts.values())
    if smooth:
        precisions = [(m + 1) / (t + 1) for m, t in zip(matched, total)]
    else:
        precisions = [m / t if t else 0.0 for m, t in zip(matched, total)]
    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n) * 100.0
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def bleu_report_format(report: BleuReport) -> str:
    """The stable one-line rendering used by the evaluate command."""
    ps = "/".join(f"{100.0 * p:.1f}" for p in report.precisions)
    return (
        f"BLEU = {report.bleu:.2f}, p1/p2/p3/p4 = {ps}, "
        f"BP = {report.brevity_penalty:.3f}, ratio = {report.ratio:.3f}, "
        f"hyp_len = {report.hyp_len}, ref_len = {report.ref_len}"
    )
