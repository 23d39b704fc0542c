"""Experiment runner: reproducible sweeps with machine-readable outputs.

Subcommands: variance-sweep, decompose, train-bbb, train-es, gradcheck,
bench.  Configuration comes from an INI-style file with one section per
subcommand, validated strictly (an unknown section or key is an error),
plus a handful of command-line overrides.  Every run writes a manifest
(resolved config, config hash, seed, git revision) next to its outputs;
timestamps live only in the manifest, so two runs with identical config
and seed produce byte-identical CSV/JSON bodies.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__, checkpoint, datasets, gradcheck, rng, trainers, variance_lab
from . import net as nets
from .perturb import FLIPOUT, LRT, MODES, SHARED, STRATEGIES


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schema: section -> key -> (type tag, default)

_DATA_KEYS = {
    "dataset": ("str", "blobs"),
    "data_n": ("int", 8192),
    "data_d": ("int", 32),
    "classes": ("int", 10),
    "data_noise": ("float", 1.0),
    "separation": ("float", 6.0),
}

SCHEMAS = {
    "variance-sweep": {
        **_DATA_KEYS,
        "widths": ("ints", [128, 128]),
        "mode": ("str", "multiplicative_gaussian"),
        "sigma": ("float", 1.0),
        "activation": ("str", "relu"),
        "pretrain_steps": ("int", 300),
        "pretrain_lr": ("float", 0.003),
        "pretrain_batch": ("int", 128),
        "grid": ("str", "1..1024"),
        "strategies": ("strs", ["shared", "flipout", "lrt"]),
        "repeats": ("int", 200),
        "runs": ("int", 50),
        "replace": ("bool", True),
    },
    "decompose": {
        **_DATA_KEYS,
        "widths": ("ints", [128, 128]),
        "mode": ("str", "multiplicative_gaussian"),
        "sigma": ("float", 1.0),
        "activation": ("str", "relu"),
        "pretrain_steps": ("int", 300),
        "pretrain_lr": ("float", 0.003),
        "pretrain_batch": ("int", 128),
        "layer": ("int", 0),
        "n_outer": ("int", 200),
        "n_inner": ("int", 100),
        "n_pairs": ("int", 500),
        "inner": ("str", "mc"),
    },
    "train-bbb": {
        **_DATA_KEYS,
        "widths": ("ints", [128, 128]),
        "activation": ("str", "relu"),
        "strategy": ("str", "flipout"),
        "batch_size": ("int", 1024),
        "learning_rate": ("float", 0.003),
        "kl_scale": ("float", 0.1),
        "prior_std": ("float", 1.0),
        "steps": ("int", 500),
        "sigma0_factor": ("float", 0.05),
        "optimizer": ("str", "adam"),
    },
    "train-es": {
        **_DATA_KEYS,
        "widths": ("ints", [32]),
        "activation": ("str", "tanh"),
        "sigma": ("float", 0.1),
        "learning_rate": ("float", 0.1),
        "workers": ("int", 40),
        "flip_batch": ("int", 40),
        "iters": ("int", 100),
        "fitness_batch": ("int", 64),
        "fitness": ("str", "neg_xent"),
        "optimizer": ("str", "sgd"),
        "independent": ("bool", False),
    },
    "gradcheck": {
        "lstm_steps": ("int", 5),
    },
    "bench": {
        "widths": ("ints", [128, 128]),
        "data_d": ("int", 32),
        "classes": ("int", 10),
        "mode": ("str", "multiplicative_gaussian"),
        "sigma": ("float", 1.0),
        "batch": ("int", 512),
        "reps": ("int", 50),
    },
}


def _convert(section, key_name, tag, raw):
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tag == "ints":
            return [int(v) for v in raw.split(",") if v.strip()]
        if tag == "strs":
            return [v.strip() for v in raw.split(",") if v.strip()]
        return raw.strip()
    except ValueError as e:
        raise CliError(f"bad value for [{section}] {key_name}: {raw!r}") from e


def load_config(path):
    """Strictly parse the config file; every section and key must be known."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as e:
        raise CliError(f"cannot read config: {e}") from e
    except configparser.Error as e:
        raise CliError(f"malformed config: {e}") from e
    out = {}
    for section in parser.sections():
        if section not in SCHEMAS:
            raise CliError(f"unknown config section [{section}]")
        schema = SCHEMAS[section]
        out[section] = {}
        for key_name, raw in parser.items(section):
            if key_name not in schema:
                raise CliError(f"unknown key {key_name!r} in section [{section}]")
            out[section][key_name] = _convert(section, key_name, schema[key_name][0], raw)
    return out


def resolve_config(command, file_cfg):
    cfg = {k: v for k, (_, v) in SCHEMAS[command].items()}
    cfg.update(file_cfg.get(command, {}))
    return cfg


def parse_grid(text):
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if lo < 1 or hi < lo:
            raise CliError(f"bad grid range {text!r}")
        grid, n = [], lo
        while n <= hi:
            grid.append(n)
            n *= 2
        return grid
    try:
        grid = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError as e:
        raise CliError(f"bad grid {text!r}") from e
    if not grid or grid[0] < 1:
        raise CliError(f"bad grid {text!r}")
    return grid


# ---------------------------------------------------------------------------
# shared pieces


def _build_dataset(cfg, seed):
    return datasets.make_synthetic(
        cfg["dataset"], cfg["data_n"], cfg["data_d"], seed,
        classes=cfg["classes"], noise=cfg["data_noise"], separation=cfg["separation"],
    )


def _build_net(cfg, data, seed):
    if cfg["mode"] not in MODES:
        raise CliError(f"unknown mode {cfg['mode']!r}")
    dims = (data.x.shape[1], *cfg["widths"], data.n_classes)
    return nets.build_mlp(rng.split(rng.key(seed), 1), dims, mode=cfg["mode"],
                          sigma=cfg["sigma"], hidden_activation=cfg["activation"])


def _frozen_net(cfg, data, seed):
    network = _build_net(cfg, data, seed)
    if cfg["pretrain_steps"] > 0:
        network = trainers.train_pointwise(
            network, data, cfg["pretrain_steps"], cfg["pretrain_lr"],
            cfg["pretrain_batch"], rng.split(rng.key(seed), 2))
    return network


def _git_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=10)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except OSError:
        return "unknown"


def write_manifest(out_dir, command, cfg, seed, threads):
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": seed,
        "threads": threads,
        "git_revision": _git_revision(),
        "package_version": __version__,
        "created_unix": time.time(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_variance_sweep(cfg, args):
    grid = parse_grid(args.grid or cfg["grid"])
    strategies = args.strategies.split(",") if args.strategies else cfg["strategies"]
    for s in strategies:
        if s not in STRATEGIES:
            raise CliError(f"unknown strategy {s!r}")
    data = _build_dataset(cfg, args.seed)
    network = _frozen_net(cfg, data, args.seed)
    root = rng.key(args.seed)
    stats = []
    for si, strategy in enumerate(sorted(strategies)):
        for ni, n in enumerate(grid):
            cell_key = rng.split(rng.split(rng.split(root, 3), si), ni)
            stats.extend(variance_lab.estimate_variance(
                network, data, strategy, n, cfg["repeats"], cfg["runs"], cell_key,
                freeze_batch=args.freeze_batch, replace=cfg["replace"],
                threads=args.threads))
    variance_lab.write_variance_csv(os.path.join(args.out, "variance.csv"), stats, args.seed)
    return 0


def cmd_decompose(cfg, args):
    data = _build_dataset(cfg, args.seed)
    network = _frozen_net(cfg, data, args.seed)
    d = variance_lab.estimate_decomposition(
        network, data, cfg["layer"], cfg["n_outer"], cfg["n_inner"], cfg["n_pairs"],
        rng.split(rng.key(args.seed), 4), inner=cfg["inner"])
    budgets = {k: cfg[k] for k in ("n_outer", "n_inner", "n_pairs", "inner")}
    variance_lab.write_decomposition_json(
        os.path.join(args.out, "decomposition.json"), d, budgets, args.seed)
    return 0


def cmd_train_bbb(cfg, args):
    data = _build_dataset(cfg, args.seed)
    dims = (data.x.shape[1], *cfg["widths"], data.n_classes)
    network = trainers.build_bbb_mlp(rng.split(rng.key(args.seed), 1), dims,
                                     sigma0_factor=cfg["sigma0_factor"],
                                     hidden_activation=cfg["activation"])
    bcfg = trainers.BbbConfig(
        prior_std=cfg["prior_std"], kl_scale=cfg["kl_scale"],
        batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
        strategy=cfg["strategy"], steps=cfg["steps"], dataset_size=len(data),
        optimizer=cfg["optimizer"])
    records, trained = trainers.bbb_train(
        network, data, bcfg, rng.split(rng.key(args.seed), 2),
        log_path=os.path.join(args.out, "bbb_log.jsonl"))
    nll, err = trainers.evaluate_deterministic(trained, data)
    with open(os.path.join(args.out, "bbb_final.json"), "w") as fh:
        json.dump({"train_nll": nll, "train_error": err, "iters": len(records)},
                  fh, sort_keys=True)
        fh.write("\n")
    checkpoint.save_params(os.path.join(args.out, "bbb_params.ckpt"),
                           nets.get_params(trained))
    return 0


def cmd_train_es(cfg, args):
    data = _build_dataset(cfg, args.seed)
    dims = (data.x.shape[1], *cfg["widths"], data.n_classes)
    network = nets.build_mlp(rng.split(rng.key(args.seed), 1), dims, sigma=0.0,
                             hidden_activation=cfg["activation"])
    ecfg = trainers.EsConfig(
        sigma=cfg["sigma"], learning_rate=cfg["learning_rate"],
        workers=cfg["workers"], flip_batch=cfg["flip_batch"], iters=cfg["iters"],
        fitness_batch=cfg["fitness_batch"], fitness=cfg["fitness"],
        optimizer=cfg["optimizer"])
    records, trained = trainers.es_train(
        network, data, ecfg, rng.split(rng.key(args.seed), 2),
        independent=cfg["independent"],
        log_path=os.path.join(args.out, "es_log.jsonl"), threads=args.threads)
    nll, err = trainers.evaluate_deterministic(trained, data)
    with open(os.path.join(args.out, "es_final.json"), "w") as fh:
        json.dump({"train_nll": nll, "train_error": err, "iters": len(records)},
                  fh, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_gradcheck(cfg, args):
    records = gradcheck.run_default_audit(seed=args.seed, steps=cfg["lstm_steps"])
    worst = max(r["max_rel_error"] for r in records)
    ok = all(r["max_rel_error"] < r["tolerance"] for r in records)
    with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
        json.dump({"records": records, "max_rel_error": worst, "passed": ok},
                  fh, sort_keys=True, indent=2)
        fh.write("\n")
    for r in records:
        status = "ok" if r["max_rel_error"] < r["tolerance"] else "FAIL"
        print(f"{status} {r['case']:28s} {r['strategy']:12s} "
              f"max_rel_error={r['max_rel_error']:.3e}")
    print(f"gradcheck max relative error: {worst:.3e}")
    return 0 if ok else 3


def cmd_bench(cfg, args):
    from .perturb import count_matmuls

    k = rng.key(args.seed)
    dims = (cfg["data_d"], *cfg["widths"], cfg["classes"])
    network = nets.build_mlp(rng.split(k, 1), dims, mode=cfg["mode"], sigma=cfg["sigma"])
    x = rng.sample_gaussian(rng.split(k, 2), (cfg["batch"], cfg["data_d"]))

    def time_strategy(strategy):
        best = []
        for rep in range(cfg["reps"]):
            t0 = time.perf_counter()
            nets.net_forward(network, x, strategy, rng.split(k, 100 + rep))
            best.append(time.perf_counter() - t0)
        return float(np.median(best) * 1e3)

    time_strategy(SHARED)  # warm the BLAS threads before timing
    shared_ms = time_strategy(SHARED)
    flip_ms = time_strategy(FLIPOUT)
    with count_matmuls() as c:
        nets.net_forward(network, x, FLIPOUT, rng.split(k, 5))
    flip_mm = c.count
    with count_matmuls() as c:
        nets.net_forward(network, x, SHARED, rng.split(k, 5))
    shared_mm = c.count
    report = {
        "shared_ms": shared_ms,
        "flipout_ms": flip_ms,
        "ratio": flip_ms / shared_ms,
        "matmuls_flipout": flip_mm,
        "matmuls_shared": shared_mm,
        "layers": len(network.layers),
        "batch": cfg["batch"],
    }
    with open(os.path.join(args.out, "bench.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"flipout/shared forward wall-time ratio: {report['ratio']:.2f} "
          f"({flip_mm} vs {shared_mm} matmuls)")
    return 0


COMMANDS = {
    "variance-sweep": cmd_variance_sweep,
    "decompose": cmd_decompose,
    "train-bbb": cmd_train_bbb,
    "train-es": cmd_train_es,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="flipout",
                                     description="flipout experiment runner")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--freeze-batch", action="store_true",
                        help="freeze the mini-batch within each variance run")
    parser.add_argument("--strategies", default=None,
                        help="comma list overriding the config strategies")
    parser.add_argument("--grid", default=None,
                        help="batch-size grid, e.g. 1..1024 or 1,8,64")
    args = parser.parse_args(argv)
    try:
        if not 0 <= args.seed < 2**64:
            raise CliError("seed must be a 64-bit unsigned integer")
        file_cfg = load_config(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_cfg)
        args.out = args.out or os.path.join("runs", args.command)
        os.makedirs(args.out, exist_ok=True)
        code = COMMANDS[args.command](cfg, args)
        write_manifest(args.out, args.command, cfg, args.seed, args.threads)
        return code
    except (CliError, ValueError) as e:
        record = {"error": type(e).__name__, "detail": str(e)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
