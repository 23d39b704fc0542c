import json

import numpy as np
import pytest

from flipout import cli


def run_cli(args):
    return cli.main([str(a) for a in args])


def strip_wall_ms(text):
    return [{k: v for k, v in json.loads(line).items() if k != "wall_ms"}
            for line in text.splitlines()]


TINY_SWEEP = """
[variance-sweep]
data_n = 256
data_d = 4
classes = 3
widths = 8
pretrain_steps = 20
grid = 1,4
strategies = shared,flipout
repeats = 10
runs = 4
"""

TINY_DECOMPOSE = """
[decompose]
data_n = 256
data_d = 4
classes = 3
widths = 8
pretrain_steps = 10
n_outer = 6
n_inner = 4
n_pairs = 8
"""

TINY_ES = """
[train-es]
data_n = 128
data_d = 3
classes = 2
widths = 4
workers = 4
flip_batch = 4
iters = 3
fitness_batch = 16
"""

TINY_BBB = """
[train-bbb]
data_n = 256
data_d = 3
classes = 2
widths = 4
batch_size = 32
steps = 5
"""


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[variance-sweep]\nrepeat = 10\n")
    code = run_cli(["variance-sweep", "--config", cfg, "--out", tmp_path / "o"])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "CliError"
    assert "repeat" in err["detail"]


def test_unknown_config_section_is_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[varianse-sweep]\nruns = 10\n")
    assert run_cli(["variance-sweep", "--config", cfg, "--out", tmp_path / "o"]) == 2
    assert "varianse-sweep" in json.loads(capsys.readouterr().err)["detail"]


def test_bad_value_type_is_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[variance-sweep]\nruns = ten\n")
    assert run_cli(["variance-sweep", "--config", cfg, "--out", tmp_path / "o"]) == 2
    assert "runs" in json.loads(capsys.readouterr().err)["detail"]


def test_unknown_strategy_flag_is_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY_SWEEP)
    code = run_cli(["variance-sweep", "--config", cfg, "--out", tmp_path / "o",
                    "--strategies", "flipout,bogus"])
    assert code == 2


def test_grid_parsing():
    assert cli.parse_grid("1..1024") == [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]
    assert cli.parse_grid("8..9") == [8]
    assert cli.parse_grid("4,1,16") == [1, 4, 16]
    with pytest.raises(cli.CliError):
        cli.parse_grid("0..8")
    with pytest.raises(cli.CliError):
        cli.parse_grid("a,b")


def test_variance_sweep_csv_schema(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY_SWEEP)
    out = tmp_path / "o"
    assert run_cli(["variance-sweep", "--config", cfg, "--out", out, "--seed", 7]) == 0
    lines = (out / "variance.csv").read_text().splitlines()
    assert lines[0] == "layer,strategy,N,variance,ci_low,ci_high,repeats,runs,seed"
    # 2 layers x 2 strategies x 2 grid points
    assert len(lines) == 1 + 8
    for line in lines[1:]:
        parts = line.split(",")
        assert parts[1] in ("shared", "flipout") and parts[8] == "7"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7
    assert manifest["command"] == "variance-sweep"
    assert len(manifest["config_hash"]) == 64


def test_variance_sweep_is_byte_reproducible_across_runs_and_threads(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY_SWEEP)
    outs = []
    for name, threads in (("a", 1), ("b", 1), ("c", 8)):
        out = tmp_path / name
        assert run_cli(["variance-sweep", "--config", cfg, "--out", out,
                        "--threads", threads]) == 0
        outs.append((out / "variance.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_decompose_json_reproducible(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY_DECOMPOSE)
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run_cli(["decompose", "--config", cfg, "--out", out]) == 0
        blobs.append((out / "decomposition.json").read_bytes())
    assert blobs[0] == blobs[1]
    rec = json.loads(blobs[0])
    assert {"alpha", "beta", "gamma", "alpha_se", "beta_se", "gamma_se",
            "budgets", "seed", "layer"} <= set(rec)


def test_train_es_runlog_reproducible_modulo_wall_time(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY_ES)
    logs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run_cli(["train-es", "--config", cfg, "--out", out]) == 0
        logs.append(strip_wall_ms((out / "es_log.jsonl").read_text()))
    assert logs[0] == logs[1]
    assert (tmp_path / "a" / "es_final.json").read_bytes() == \
           (tmp_path / "b" / "es_final.json").read_bytes()


def test_train_bbb_writes_log_and_checkpoint(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY_BBB)
    out = tmp_path / "o"
    assert run_cli(["train-bbb", "--config", cfg, "--out", out]) == 0
    records = strip_wall_ms((out / "bbb_log.jsonl").read_text())
    assert len(records) == 5
    assert set(records[0]) == {"iter", "loss", "error_rate", "samples_used",
                               "strategy", "seed"}
    from flipout import checkpoint
    params = checkpoint.load_params(out / "bbb_params.ckpt")
    assert "layer0/mean" in params and params["layer0/mean"].shape == (3, 4)


def test_gradcheck_command_passes(tmp_path, capsys):
    assert run_cli(["gradcheck", "--out", tmp_path / "o"]) == 0
    report = json.loads((tmp_path / "o" / "gradcheck.json").read_text())
    assert report["passed"] is True
    assert report["max_rel_error"] < 1e-5


def test_bench_command_reports_matmul_counts(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[bench]\nwidths = 16,16\ndata_d = 8\nbatch = 64\nreps = 5\n")
    assert run_cli(["bench", "--config", cfg, "--out", tmp_path / "o"]) == 0
    report = json.loads((tmp_path / "o" / "bench.json").read_text())
    assert report["matmuls_flipout"] == 2 * report["layers"]
    assert report["matmuls_shared"] == report["layers"]
    assert report["ratio"] > 0


def test_seed_flag_validation(tmp_path, capsys):
    assert run_cli(["gradcheck", "--out", tmp_path / "o", "--seed", -2]) == 2
