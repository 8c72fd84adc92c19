"""Figure rendering from training logs."""

import os

import pytest

from picomt.errors import DataError
from picomt.report import default_figure_path, render_lm_log, render_log, render_mt_log

MT_LOG = (
    "epoch\ttrain_loss\tdev_bleu\tdev_bleu_ci\tis_best\n"
    "1\t3.500000\t12.00\t12.50\t1\n"
    "2\t2.100000\t48.50\t49.00\t1\n"
    "3\t1.400000\t47.90\t48.40\t0\n"
)
LM_LOG = "1\t2.996000\t0.150000\t20.005000\n2\t2.303000\t0.300000\t10.004000\n"


def test_mt_log_renders(tmp_path):
    log = tmp_path / "train.log.tsv"
    log.write_text(MT_LOG)
    out = render_mt_log(str(log))
    assert out == str(tmp_path / "train.log.png")
    assert os.path.getsize(out) > 1000


def test_lm_log_renders(tmp_path):
    log = tmp_path / "lm.log.tsv"
    log.write_text(LM_LOG)
    out = render_lm_log(str(log), str(tmp_path / "fig.png"))
    assert os.path.getsize(out) > 1000


def test_dispatch_on_header(tmp_path):
    mt = tmp_path / "a.tsv"
    mt.write_text(MT_LOG)
    lm = tmp_path / "b.tsv"
    lm.write_text(LM_LOG)
    assert render_log(str(mt)).endswith("a.png")
    assert render_log(str(lm)).endswith("b.png")


def test_empty_log_rejected(tmp_path):
    log = tmp_path / "empty.tsv"
    log.write_text("")
    with pytest.raises(DataError):
        render_mt_log(str(log))


def test_malformed_log_rejected(tmp_path):
    log = tmp_path / "bad.tsv"
    log.write_text("1\tnot-a-number\t3\t4\t5\n")
    with pytest.raises(DataError):
        render_mt_log(str(log))


def test_default_figure_path():
    assert default_figure_path("runs/x/train.log.tsv") == "runs/x/train.log.png"
