"""Render training-curve figures next to the delimited log files.

Both training loops emit tab-separated logs; this module turns them into
PNG figures (loss and dev BLEU for translation runs, loss/accuracy/perplexity
for language-model runs).  The CLI calls it automatically after training and
exposes it as the `report` subcommand for regeneration.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError

MT_HEADER_PREFIX = "epoch\ttrain_loss"


def _read_rows(log_path: str) -> tuple[list[str], list[list[float]]]:
    try:
        with open(log_path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    except OSError as e:
        raise DataError(f"cannot read log {log_path}: {e}") from e
    if not lines:
        raise DataError(f"log file is empty: {log_path}")
    header: list[str] = []
    if lines[0].startswith("epoch\t") and not lines[0].split("\t")[1].replace(".", "").isdigit():
        header = lines[0].split("\t")
        lines = lines[1:]
    rows = []
    for ln in lines:
        try:
            rows.append([float(x) for x in ln.split("\t")])
        except ValueError as e:
            raise DataError(f"{log_path}: bad log line {ln!r}") from e
    if not rows:
        raise DataError(f"log file has no data rows: {log_path}")
    return header, rows


def default_figure_path(log_path: str) -> str:
    return os.path.splitext(log_path)[0] + ".png"


def render_mt_log(log_path: str, out_path: str | None = None) -> str:
    """Loss curve plus dev BLEU (cased and ci) with the best epoch marked."""
    _, rows = _read_rows(log_path)
    epochs = [r[0] for r in rows]
    loss = [r[1] for r in rows]
    bleu = [r[2] for r in rows]
    bleu_ci = [r[3] for r in rows]
    best_idx = max(range(len(rows)), key=lambda i: (bleu[i], -epochs[i]))

    fig, ax_loss = plt.subplots(figsize=(7, 4.2))
    ax_loss.plot(epochs, loss, color="tab:red", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:red")
    ax_loss.tick_params(axis="y", labelcolor="tab:red")
    ax_bleu = ax_loss.twinx()
    ax_bleu.plot(epochs, bleu, color="tab:blue", label="dev BLEU")
    ax_bleu.plot(epochs, bleu_ci, color="tab:blue", linestyle="--", alpha=0.6, label="dev BLEU (ci)")
    ax_bleu.scatter([epochs[best_idx]], [bleu[best_idx]], color="tab:blue", marker="*", s=140, zorder=5,
                    label=f"best ({bleu[best_idx]:.2f} @ {int(epochs[best_idx])})")
    ax_bleu.set_ylabel("dev BLEU", color="tab:blue")
    ax_bleu.tick_params(axis="y", labelcolor="tab:blue")
    ax_bleu.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    out_path = out_path or default_figure_path(log_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_lm_log(log_path: str, out_path: str | None = None) -> str:
    """Validation loss, accuracy, and perplexity over pretraining epochs."""
    _, rows = _read_rows(log_path)
    epochs = [r[0] for r in rows]
    loss = [r[1] for r in rows]
    acc = [r[2] for r in rows]
    ppl = [r[3] for r in rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.8))
    ax1.plot(epochs, loss, color="tab:red", label="valid loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("valid loss", color="tab:red")
    ax1b = ax1.twinx()
    ax1b.plot(epochs, acc, color="tab:green", label="valid accuracy")
    ax1b.set_ylabel("valid accuracy", color="tab:green")
    ax2.plot(epochs, ppl, color="tab:purple")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("valid perplexity")
    ax2.set_yscale("log")
    fig.tight_layout()
    out_path = out_path or default_figure_path(log_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_log(log_path: str, out_path: str | None = None) -> str:
    """Dispatch on the log flavor: the MT log carries a header line."""
    with open(log_path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith(MT_HEADER_PREFIX):
        return render_mt_log(log_path, out_path)
    return render_lm_log(log_path, out_path)
