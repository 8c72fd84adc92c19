#!/usr/bin/env python3
"""Regenerate the bundled copy-task dataset under data/copy-task/.

The task is to reproduce the source sentence: random sentences over a small
two-letter symbol alphabet, identical on both sides.  The script also learns
the BPE merges, segments the corpus, and builds the vocabularies, so the
bundled configs work out of the box.  Deterministic for a fixed seed.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from picomt.subword import SubwordModel, build_vocab, learn_bpe, segment_line  # noqa: E402

SYMBOLS = [
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu",
    "na", "pe", "qi", "ro", "su", "ta", "ve", "wi", "xo", "zu",
]


def make_sentences(n, rng, min_len=6, max_len=10):
    seen = set()
    out = []
    while len(out) < n:
        k = int(rng.integers(min_len, max_len + 1))
        sent = tuple(SYMBOLS[int(i)] for i in rng.integers(0, len(SYMBOLS), size=k))
        if sent in seen:
            continue
        seen.add(sent)
        out.append(" ".join(sent))
    return out


def write(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "copy-task"))
    parser.add_argument("--train", type=int, default=200)
    parser.add_argument("--dev", type=int, default=40,
                        help="dev sentences, sampled from the training corpus (learnability smoke design)")
    parser.add_argument("--seed", type=int, default=20190710)
    parser.add_argument("--merges", type=int, default=80)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    train = make_sentences(args.train, rng)
    # the copy task is a trainability check, so the dev set draws from the
    # training corpus: the score measures whether the loop fits it at all
    dev = train[: args.dev]

    out = os.path.abspath(args.out)
    os.makedirs(out, exist_ok=True)
    write(os.path.join(out, "train.src"), train)
    write(os.path.join(out, "train.tgt"), train)
    write(os.path.join(out, "dev.src"), dev)
    write(os.path.join(out, "dev.ref.tok"), dev)

    model = learn_bpe((tok for line in train for tok in line.split()), args.merges)
    model.save(os.path.join(out, "copy.bpe"))
    reloaded = SubwordModel.load(os.path.join(out, "copy.bpe"))

    seg = {name: [" ".join(segment_line(line, reloaded)) for line in lines]
           for name, lines in (("train.src.bpe", train), ("train.tgt.bpe", train), ("dev.src.bpe", dev))}
    for name, lines in seg.items():
        write(os.path.join(out, name), lines)

    vocab = build_vocab((tok for line in seg["train.src.bpe"] for tok in line.split()), 64)
    vocab.save(os.path.join(out, "vocab.src"))
    vocab.save(os.path.join(out, "vocab.tgt"))
    print(f"wrote {args.train} sentences ({args.dev} reused as dev), {len(model.merges)} merges, "
          f"vocab of {len(vocab)} -> {out}")


if __name__ == "__main__":
    main()
