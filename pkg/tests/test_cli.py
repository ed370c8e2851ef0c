import csv
import json

import numpy as np
import pytest

from dpbridge.checkpoint import load_checkpoint
from dpbridge.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, main
from dpbridge.metrics import CSV_COLUMNS
from dpbridge.tensor import read_dpbt, write_dpbt

TINY_INI = """
[run]
seed = 3
[dataset]
H = 8
W = 8
n_train = 12
n_val = 4
n_test = 4
[model]
width = 16
n_blocks = 1
temb_dim = 8
[train]
n_iter = 6
grad_accum = 2
checkpoint_every = 4
[eval]
steps = 1, 2
n_eval = 3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY_INI)
    assert main(["gen-data", "--config", str(root / "tiny.ini"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "tiny.ini"), "--data", str(root / "data"),
                 "--out", str(root / "m.dpbk"), "--log", str(root / "log.csv")]) == 0
    return root


def _args(root, *extra):
    return ["--config", str(root / "tiny.ini"), "--checkpoint", str(root / "m.dpbk"), *extra]


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_gen_data_layout(workdir):
    lines = (workdir / "data" / "manifest.txt").read_text().splitlines()
    assert lines[0].startswith("# dpbridge dataset v1 task=depth H=8 W=8 seed=3")
    assert len(lines) == 1 + 12 + 4 + 4
    seed, task, xf, yf = lines[1].split()
    assert task == "depth" and xf == "train/00000_x.dpbt"
    assert read_dpbt(workdir / "data" / yf).shape == (8, 8, 1)


def test_train_outputs(workdir):
    state = load_checkpoint(workdir / "m.dpbk")
    assert state.iteration == 6 and state.config.seed == 3 and state.model.width == 16
    rows = _rows(workdir / "log.csv")
    assert [int(r["iteration"]) for r in rows] == list(range(1, 7))
    assert set(rows[0]) == {"iteration", "elbo", "ic", "total", "wall_ms"}


def test_train_resume(workdir, tmp_path):
    out = tmp_path / "r.dpbk"
    assert main(["train", "--config", str(workdir / "tiny.ini"), "--data", str(workdir / "data"),
                 "--out", str(out), "--resume", str(workdir / "m.dpbk"), "--n-iter", "8"]) == 0
    assert load_checkpoint(out).iteration == 8


def test_sample_from_dataset(workdir, tmp_path, capsys):
    out = tmp_path / "pred"
    assert main(["sample", *_args(workdir, "--data", str(workdir / "data"), "--count", "2",
                                  "--steps", "3", "--out-dir", str(out))]) == 0
    assert "wrote 2 prediction(s)" in capsys.readouterr().out
    pgm = (out / "pred_00001.pgm").read_bytes()
    assert pgm.startswith(b"P5\n8 8\n255\n") and len(pgm) == len(b"P5\n8 8\n255\n") + 64
    y = read_dpbt(out / "pred_00000.dpbt")
    assert y.shape == (8, 8, 1) and np.all(np.isfinite(y))
    assert read_dpbt(out / "latent_00000.dpbt").shape == (4, 4, 1)


def test_sample_from_file_matches_dataset(workdir, tmp_path):
    x = read_dpbt(workdir / "data" / "test" / "00000_x.dpbt")
    write_dpbt(tmp_path / "x.dpbt", x)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sample", *_args(workdir, "--input", str(tmp_path / "x.dpbt"),
                                  "--out-dir", str(a))]) == 0
    assert main(["sample", *_args(workdir, "--data", str(workdir / "data"), "--out-dir", str(b))]) == 0
    assert np.array_equal(read_dpbt(a / "pred_00000.dpbt"), read_dpbt(b / "pred_00000.dpbt"))


def test_eval_and_sweeps(workdir, tmp_path):
    base = ["--data", str(workdir / "data")]
    assert main(["eval", *_args(workdir, *base, "--out", str(tmp_path / "e.csv"))]) == 0
    rows = _rows(tmp_path / "e.csv")
    assert len(rows) == 1 and rows[0]["n_steps"] == "50" and rows[0]["n_samples"] == "3"

    assert main(["sweep-steps", *_args(workdir, *base, "--out", str(tmp_path / "s.csv"))]) == 0
    rows = _rows(tmp_path / "s.csv")
    assert [r["n_steps"] for r in rows] == ["1", "2"]
    assert tuple(rows[0]) == CSV_COLUMNS

    assert main(["robustness", *_args(workdir, *base, "--steps", "2",
                                      "--out", str(tmp_path / "r.csv"))]) == 0
    rows = _rows(tmp_path / "r.csv")
    assert rows[0]["noise_kind"] == "none"
    assert {r["noise_kind"] for r in rows[1:]} == {"gaussian", "uniform", "poisson", "salt_pepper"}
    assert rows[0]["absrel"] == _rows(tmp_path / "s.csv")[1]["absrel"]


def test_verify_writes_reports(tmp_path, capsys):
    out, coeffs = tmp_path / "v.jsonl", tmp_path / "c.csv"
    code = main(["verify", "--out", str(out), "--dump-coeffs", str(coeffs), "--n-traj", "1000",
                 "--n-dan", "20000"])
    table = capsys.readouterr().out
    reports = [json.loads(line) for line in out.read_text().splitlines()]
    assert code == (EXIT_OK if all(r["ok"] for r in reports) else EXIT_CHECK)
    assert {r["name"].split(".")[0] for r in reports} >= {"composition", "dan", "sde_bridge",
                                                          "sampler", "gradients", "step_chain"}
    assert "control" in table
    assert len(coeffs.read_text().splitlines()) == 1002


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", "m.dpbk", "--data", "d", "--out", "o", "--steps", "0"])
    assert exc.value.code == EXIT_USAGE


def test_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlearning_rate = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


def test_io_errors(workdir, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.dpbk"), "--data",
                 str(workdir / "data"), "--out", str(tmp_path / "o.csv")]) == EXIT_IO
    junk = tmp_path / "junk.dpbk"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(junk), "--data", str(workdir / "data"),
                 "--out", str(tmp_path / "o.csv")]) == EXIT_IO
    assert main(["train", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "m")]) == EXIT_IO


def test_mismatch_errors(workdir, tmp_path):
    other = tmp_path / "other.ini"
    other.write_text(TINY_INI.replace("[model]", "[schedule]\nT = 500\n[model]"))
    assert main(["eval", "--config", str(other), "--checkpoint", str(workdir / "m.dpbk"),
                 "--data", str(workdir / "data"), "--out", str(tmp_path / "o.csv")]) == EXIT_MISMATCH
    normal = tmp_path / "normal.ini"
    normal.write_text(TINY_INI.replace("H = 8", "task = normal\nH = 8"))
    assert main(["gen-data", "--config", str(normal), "--out", str(tmp_path / "nd")]) == 0
    assert main(["eval", *_args(workdir, "--data", str(tmp_path / "nd"),
                                "--out", str(tmp_path / "o.csv"))]) == EXIT_MISMATCH
    big = tmp_path / "big.dpbt"
    write_dpbt(big, np.zeros((16, 16, 1)))
    assert main(["sample", *_args(workdir, "--input", str(big),
                                  "--out-dir", str(tmp_path / "p"))]) == EXIT_MISMATCH


def test_eval_honours_sampler_section(workdir, tmp_path):
    short = tmp_path / "short.ini"
    short.write_text(TINY_INI + "[sampler]\nt_start = 100\n")
    base = ["--checkpoint", str(workdir / "m.dpbk"), "--data", str(workdir / "data"),
            "--steps", "2"]
    assert main(["eval", "--config", str(workdir / "tiny.ini"), *base,
                 "--out", str(tmp_path / "a.csv")]) == 0
    assert main(["eval", "--config", str(short), *base, "--out", str(tmp_path / "b.csv")]) == 0
    assert _rows(tmp_path / "a.csv")[0]["absrel"] != _rows(tmp_path / "b.csv")[0]["absrel"]
