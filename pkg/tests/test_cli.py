import csv

import numpy as np
import pytest

from dynconv.cli import build_parser, main
from dynconv.harness import read_pgm

TINY = """\
blocks:
  - {channels: 8, expansion_channels: 48}
  - {channels: 8, expansion_channels: 48}
stem_channels: 8
input_size: 16
recipe:
  epochs: 2
  train_size: 64
  val_size: 32
  probe_size: 16
  batch_size: 16
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def rows(path):
    with open(path) as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def test_parser_flags():
    a = build_parser().parse_args(["train", "--theta", "0.3", "--alpha", "2", "--criterion", "net",
                                   "--epochs", "3", "--seed", "4", "--deterministic", "--out", "x"])
    assert (a.theta, a.alpha, a.criterion, a.epochs, a.seed, a.deterministic) == (0.3, 2.0, "net", 3, 4, True)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--criterion", "global"])


def test_train_writes_metrics(tmp_path, cfg_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--theta", "0.4", "--out", str(out)]) == 0
    r = rows(out / "metrics.csv")
    assert len(r) == 2
    assert list(r[0])[:7] == ["epoch", "task_loss", "sp_net", "sp_low", "sp_up", "frac_b0", "frac_b1"]
    assert (out / "model.npz").exists() and "theta: 0.4" in (out / "config.yaml").read_text()
    assert rows(out / "budget.csv")[0]["block"] == "0"


def test_deterministic_train_is_byte_identical(tmp_path, cfg_path):
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg_path), "--deterministic", "--seed", "3",
                     "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()


def test_verify_bench_ponder_on_trained_model(tmp_path, cfg_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    model = str(out / "model.npz")
    assert main(["verify", "--model", model, "--trials", "10", "--out", str(out)]) == 0
    assert rows(out / "verify.csv")[-1]["scope"] == "end_to_end"
    assert main(["bench", "--model", model, "--batch", "4", "--repeats", "1", "--warmup", "0",
                 "--densities", "1.0", "0.5", "--out", str(out)]) == 0
    b = rows(out / "bench.csv")
    assert [x["path"] for x in b] == ["dense", "sparse", "sparse"]
    assert main(["ponder", "--model", model, "--images", "3", "--out", str(out)]) == 0
    img = read_pgm(out / "ponder_0.pgm")
    assert img.shape == (16, 16) and set(np.unique(img)) <= {0, 128, 255}
    assert len(rows(out / "ponder.csv")) == 3 * 16


def test_verify_random_model(tmp_path, cfg_path):
    assert main(["verify", "--config", str(cfg_path), "--trials", "5", "--out", str(tmp_path)]) == 0


@pytest.mark.parametrize("text", ["recipe: {bogus: 1}\n", "blocks: [\n", "recipe: {theta: 2.0}\n"])
def test_bad_config_exit_code(tmp_path, text, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(text)
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "invalid configuration" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path):
    assert main(["verify", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2
