"""picomt: a desk-scale neural machine translation toolkit.

A transformer encoder-decoder whose source embeddings come from either a
jointly trained lookup table or a frozen, separately pretrained masked
language model, together with the full surrounding pipeline: punctuation
normalization and tokenization, BPE subwords, MLM pretraining, label-smoothed
training with per-epoch dev BLEU, beam-search decoding, and BLEU scoring.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DivergenceError, IntegrityError, PicomtError
from .tensor import Tensor, no_grad

__all__ = [
    "__version__",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "IntegrityError",
    "PicomtError",
    "Tensor",
    "no_grad",
]
