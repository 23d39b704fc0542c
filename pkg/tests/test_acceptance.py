"""End-to-end acceptance suite.

Each test exercises one numbered acceptance criterion at its stated
tolerance and prints one PASS/FAIL line (run pytest with -s to see them).
The expensive experiment artifacts (frozen net, variance sweep, training
runs) are shared through session fixtures.
"""

import itertools
import json
import time

import numpy as np
import pytest

from flipout import cli, datasets, gradcheck, perturb, rng, trainers, variance_lab
from flipout import net as nets
from flipout.net import DenseLayer, Network
from flipout.perturb import ADDITIVE, DROPCONNECT, MULTIPLICATIVE, WeightDist
from flipout.trainers import BbbConfig, EsConfig
from flipout.variance_lab import estimate_decomposition, estimate_variance

SEED = 42

# desk-scale variance experiment: partially trained relu net on offset blobs
DESK_DATA = dict(kind="blobs", n=8192, d=32, classes=10, noise=1.5,
                 separation=5.0, offset=1.0)
DESK_WIDTHS = (128, 128)
DESK_PRETRAIN = dict(steps=200, lr=0.003, batch=128)
GRID = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]
SWEEP_REPEATS, SWEEP_RUNS = 100, 15


def _report(num, ok, detail):
    print(f"\n[criterion {num:02d}] {'PASS' if ok else 'FAIL'}: {detail}")


def _overlap(a, b):
    return a.ci_low <= b.ci_high and b.ci_low <= a.ci_high


# ---------------------------------------------------------------------------
# shared fixtures


@pytest.fixture(scope="session")
def desk_net_and_data():
    data = datasets.make_synthetic(DESK_DATA["kind"], DESK_DATA["n"], DESK_DATA["d"],
                                   SEED, classes=DESK_DATA["classes"],
                                   noise=DESK_DATA["noise"],
                                   separation=DESK_DATA["separation"],
                                   offset=DESK_DATA["offset"])
    k = rng.key(SEED)
    network = nets.build_mlp(rng.split(k, 1), (DESK_DATA["d"], *DESK_WIDTHS,
                                                DESK_DATA["classes"]),
                             mode=MULTIPLICATIVE, sigma=1.0, hidden_activation="relu")
    network = trainers.train_pointwise(network, data, DESK_PRETRAIN["steps"],
                                       DESK_PRETRAIN["lr"], DESK_PRETRAIN["batch"],
                                       rng.split(k, 2))
    return network, data


@pytest.fixture(scope="session")
def desk_sweep(desk_net_and_data):
    t0 = time.perf_counter()
    network, data = desk_net_and_data
    k = rng.key(SEED)
    stats = {}
    for si, strategy in enumerate(("flipout", "lrt", "shared")):
        for ni, n in enumerate(GRID):
            cell_key = rng.split(rng.split(rng.split(k, 3), si), ni)
            for st in estimate_variance(network, data, strategy, n,
                                        SWEEP_REPEATS, SWEEP_RUNS, cell_key):
                stats[(st.layer_name, strategy, n)] = st
    decomp = estimate_decomposition(network, data, 0, 60, 24, 96, rng.split(k, 4))
    return stats, decomp, time.perf_counter() - t0


@pytest.fixture(scope="session")
def dropconnect_lab():
    data = datasets.make_synthetic("blobs", 256, 2, SEED, classes=2, noise=0.6,
                                   separation=2.0)
    k = rng.key(SEED)
    layer = DenseLayer(
        WeightDist(nets.glorot_uniform(rng.split(k, 1), 2, 2), None, DROPCONNECT),
        np.zeros(2), "softmax_logits")
    return Network([layer], "softmax_cross_entropy"), data


# ---------------------------------------------------------------------------
# criteria


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    records = gradcheck.run_default_audit(seed=SEED, steps=5)
    elapsed = time.perf_counter() - t0
    worst_dense = max(r["max_rel_error"] for r in records if not r["case"].startswith("lstm"))
    worst_lstm = max(r["max_rel_error"] for r in records if r["case"].startswith("lstm"))
    ok = worst_dense < 1e-5 and worst_lstm < 1e-4 and elapsed < 60
    _report(1, ok, f"dense max rel err {worst_dense:.2e} (<1e-5), "
                   f"lstm {worst_lstm:.2e} (<1e-4), {elapsed:.0f}s (<60s), "
                   f"{len(records)} net/strategy cases")
    assert worst_dense < 1e-5
    assert worst_lstm < 1e-4
    assert elapsed < 60


def test_criterion_02_unbiasedness_across_strategies():
    t0 = time.perf_counter()
    k = rng.key(SEED)
    network = nets.build_mlp(rng.split(k, 1), (3, 4, 2), mode=ADDITIVE, sigma=0.4,
                             hidden_activation="tanh")
    x = rng.sample_gaussian(rng.split(k, 2), (16, 3))
    y = np.tile([0, 1], 8)
    reps = 10_000

    def mean_grads(strategy, tag):
        sums = sqs = None
        for i in range(reps):
            _, cache = nets.net_forward(network, x, strategy,
                                        rng.split(rng.split(k, tag), i))
            _, grads = nets.net_backward(network, cache, y)
            flat = np.concatenate([np.concatenate([g.d_mean.ravel(), g.d_bias])
                                   for g in grads])
            if sums is None:
                sums, sqs = np.zeros_like(flat), np.zeros_like(flat)
            sums += flat
            sqs += flat**2
        m = sums / reps
        se = np.sqrt(np.maximum(sqs / reps - m**2, 0.0) / reps)
        return m, se

    results = {s: mean_grads(s, 10 + i)
               for i, s in enumerate(("shared", "flipout", "independent"))}
    worst = 0.0
    for a, b in itertools.combinations(results, 2):
        ma, sa = results[a]
        mb, sb = results[b]
        z = np.abs(ma - mb) / np.sqrt(sa**2 + sb**2 + 1e-300)
        worst = max(worst, float(z.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 3.0 and elapsed < 120
    _report(2, ok, f"max |z| over strategy pairs, entrywise: {worst:.2f} (<3), "
                   f"{reps} replicates, N=16, {elapsed:.0f}s (<120s)")
    assert worst < 3.0
    assert elapsed < 120


def test_criterion_03_exact_sign_enumeration_oracle(dropconnect_lab):
    t0 = time.perf_counter()
    network, data = dropconnect_lab
    k = rng.split(rng.key(SEED), 5)
    exact = estimate_decomposition(network, data, 0, 300, 2, 192, k, inner="enumerate")
    mc = estimate_decomposition(network, data, 0, 300, 32, 192, k, inner="mc")
    zs = {}
    for name in ("alpha", "beta", "gamma"):
        se = np.hypot(getattr(exact, f"{name}_se"), getattr(mc, f"{name}_se"))
        zs[name] = abs(getattr(exact, name) - getattr(mc, name)) / se
    inner_ok = all(z < 3 for z in zs.values())

    worst_pred = 0.0
    for n in (1, 2, 4, 8):
        for si, strategy in enumerate(("shared", "flipout", "independent")):
            st = estimate_variance(network, data, strategy, n, 200, 50,
                                   rng.split(rng.split(rng.key(SEED), 6), 10 * n + si))[0]
            pred = variance_lab.predict_variance(exact, n, strategy)
            pred_se = variance_lab.predict_variance_se(exact, n, strategy)
            meas_se = (st.ci_high - st.ci_low) / 2 / 1.6766  # t(49) 90% halfwidth
            z = abs(st.mean_variance - pred) / np.hypot(pred_se, meas_se)
            worst_pred = max(worst_pred, float(z))
    elapsed = time.perf_counter() - t0
    ok = inner_ok and worst_pred < 3 and elapsed < 120
    _report(3, ok, f"enumeration vs MC z: alpha {zs['alpha']:.2f}, beta {zs['beta']:.2f}, "
                   f"gamma {zs['gamma']:.2f} (<3 each); predicted-vs-measured "
                   f"max |z| {worst_pred:.2f} over N in {{1,2,4,8}} x 3 strategies (<3); "
                   f"{elapsed:.0f}s (<120s)")
    assert inner_ok
    assert worst_pred < 3
    assert elapsed < 120


def test_criterion_04_variance_curve_shape(desk_sweep):
    stats, decomp, sweep_seconds = desk_sweep
    layers = sorted({key[0] for key in stats})
    details = [f"sweep {sweep_seconds:.0f}s (<900s)"]

    # flipout log-log slope over the full grid, every layer
    slopes = {}
    for layer in layers:
        pts = [(n, stats[(layer, "flipout", n)].mean_variance) for n in GRID]
        slopes[layer] = variance_lab.fit_loglog_slope(pts)
    slope_ok = all(-1.15 < s < -0.85 for s in slopes.values())
    details.append("flipout slopes " + ", ".join(f"{l}:{s:.3f}" for l, s in slopes.items()))

    # shared curve flattens over the largest decade once alpha/N < beta
    n_star = decomp.alpha / decomp.beta if decomp.beta > 0 else np.inf
    window = [n for n in GRID if n >= GRID[-1] / 10 and n > n_star]
    flat_ok = len(window) >= 2
    if flat_ok:
        pts = [(n, stats[("layer0", "shared", n)].mean_variance) for n in window]
        if len(pts) >= 3:
            local = variance_lab.fit_loglog_slope(pts)
        else:
            local = (np.log(pts[-1][1]) - np.log(pts[0][1])) / (
                np.log(pts[-1][0]) - np.log(pts[0][0]))
        flat_ok = local > -0.3
        details.append(f"shared local slope {local:.3f} (>-0.3) over N {window}, "
                       f"transition N*={n_star:.0f}")

    # N=1: shared and flipout measure the same distribution
    overlap_ok = all(_overlap(stats[(l, "shared", 1)], stats[(l, "flipout", 1)])
                     for l in layers)
    details.append(f"N=1 CI overlap {overlap_ok}")

    # LRT never above flipout
    lrt_ok = all(stats[(l, "lrt", n)].mean_variance
                 <= stats[(l, "flipout", n)].mean_variance
                 for l in layers for n in GRID)
    details.append(f"lrt<=flipout at every N {lrt_ok}")

    ok = slope_ok and flat_ok and overlap_ok and lrt_ok and sweep_seconds < 900
    _report(4, ok, "; ".join(details))
    assert slope_ok
    assert flat_ok
    assert overlap_ok
    assert lrt_ok
    assert sweep_seconds < 900


def test_criterion_05_flipout_dominates_shared(desk_sweep):
    stats, _, _ = desk_sweep
    layers = sorted({key[0] for key in stats})
    violations = []
    for layer in layers:
        for n in GRID:
            if n == 1:
                continue
            flip = stats[(layer, "flipout", n)]
            shared = stats[(layer, "shared", n)]
            if flip.mean_variance > shared.mean_variance and not _overlap(flip, shared):
                violations.append((layer, n))
    ok = not violations
    _report(5, ok, f"flipout <= shared (CI-overlap tolerance) at every N>1 "
                   f"across {len(layers)} layers; violations: {violations}")
    assert ok


def test_criterion_06_bbb_large_batch_speedup():
    t0 = time.perf_counter()
    data = datasets.make_synthetic("blobs", 20_000, 32, SEED, classes=10, noise=1.5,
                                   separation=5.0, offset=1.0)
    steps, eval_every = 400, 10

    def run(strategy, seed):
        k = rng.key(seed)
        network = trainers.build_bbb_mlp(rng.split(k, 1), (32, *DESK_WIDTHS, 10),
                                         sigma0_factor=0.5)
        cfg = BbbConfig(strategy=strategy, batch_size=1024, steps=steps,
                        dataset_size=len(data))
        opt_params = {}
        p = nets.get_params(network)
        for l in range(len(network.layers)):
            opt_params[f"layer{l}/mean"] = p[f"layer{l}/mean"]
            opt_params[f"layer{l}/rho"] = trainers.softplus_inv(p[f"layer{l}/scale"])
            opt_params[f"layer{l}/bias"] = p[f"layer{l}/bias"]
        opt = trainers.init_optimizer("adam", opt_params, cfg.learning_rate)
        curve = []
        for it in range(steps):
            kt = rng.split(rng.split(k, 2), it)
            batch = datasets.sample_batch(data, cfg.batch_size, rng.split(kt, 0))
            network, opt, _ = trainers.bbb_step(network, batch, cfg, opt,
                                                rng.split(kt, 1))
            if (it + 1) % eval_every == 0:
                nll, _ = trainers.evaluate_deterministic(network, data)
                curve.append((it + 1, nll))
        return curve

    ratios, lrt_iters, flip_iters = [], [], []
    for seed in (1, 2, 3, 4, 5):
        shared_final = run("shared", seed)[-1][1]
        flip_curve = run("flipout", seed)
        lrt_curve = run("lrt", seed)
        it_flip = next((it for it, nll in flip_curve if nll <= shared_final),
                       np.inf)
        it_lrt = next((it for it, nll in lrt_curve if nll <= shared_final), np.inf)
        ratios.append(it_flip / steps)
        flip_iters.append(it_flip)
        lrt_iters.append(it_lrt)
    med_ratio = float(np.median(ratios))
    med_flip, med_lrt = float(np.median(flip_iters)), float(np.median(lrt_iters))
    rel = med_lrt / med_flip
    elapsed = time.perf_counter() - t0
    ok = med_ratio <= 0.6 and 0.8 <= rel <= 1.2 and elapsed < 600
    _report(6, ok, f"median flipout-reaches-shared-final at {med_ratio:.2f}x of "
                   f"{steps} iters (<=0.6); lrt/flipout iters {rel:.2f} "
                   f"(within 0.8..1.2); per-seed ratios "
                   f"{[f'{r:.2f}' for r in ratios]}; {elapsed:.0f}s (<600s)")
    assert med_ratio <= 0.6
    assert 0.8 <= rel <= 1.2
    assert elapsed < 600


def test_criterion_07_flip_es_matches_ideal_es():
    t0 = time.perf_counter()
    data = datasets.make_synthetic("blobs", 4000, 8, 7, classes=2, noise=1.2,
                                   separation=2.2)

    def run(seed, independent):
        k = rng.key(seed)
        network = nets.build_mlp(rng.split(k, 1), (8, 16, 2), sigma=0.0,
                                 hidden_activation="tanh")
        cfg = EsConfig(sigma=0.1, learning_rate=0.1, workers=40, flip_batch=40,
                       iters=150, fitness_batch=128, optimizer="sgd")
        _, trained = trainers.es_train(network, data, cfg, rng.split(k, 2),
                                       independent=independent)
        _, err = trainers.evaluate_deterministic(trained, data)
        return err

    flips = [run(seed, False) for seed in (1, 2, 3, 4, 5)]
    ideals = [run(seed, True) for seed in (1, 2, 3, 4, 5)]
    gap_pp = abs(np.median(flips) - np.median(ideals)) * 100
    elapsed = time.perf_counter() - t0
    ok = gap_pp <= 1.0 and elapsed < 600
    _report(7, ok, f"1600 samples/update: median error flipES "
                   f"{np.median(flips):.4f} vs idealES {np.median(ideals):.4f}, "
                   f"gap {gap_pp:.2f}pp (<=1pp), 5 seeds; {elapsed:.0f}s (<600s)")
    assert gap_pp <= 1.0
    assert elapsed < 600


def test_criterion_08_es_estimator_sanity():
    # linear fitness via 1e6 samples
    k = rng.key(SEED)
    a, w, sigma = 1.7, 0.5, 1.0
    eps = sigma * rng.sample_gaussian(rng.split(k, 0), (1_000_000,))
    est = float(np.mean(a * (w + eps) * eps) / sigma**2)
    lin_err = abs(est - a) / a

    # quadratic 1-D task, reference run frozen as a golden file
    import pathlib
    golden = json.loads((pathlib.Path(__file__).parent / "goldens" /
                         "es_quadratic.json").read_text())
    cfg = EsConfig(sigma=golden["sigma"], learning_rate=golden["learning_rate"],
                   workers=golden["samples_per_update"], flip_batch=1,
                   iters=golden["iters"])
    w_final = trainers.es_train_function(
        lambda v: -float((v[0] - golden["target"]) ** 2), np.array([0.0]), cfg,
        rng.key(golden["seed"]))
    dist = abs(float(w_final[0]) - golden["target"])
    golden_drift = abs(float(w_final[0]) - golden["final_w"])
    ok = lin_err < 0.01 and dist < 0.05 and golden_drift < 1e-12
    _report(8, ok, f"linear-fitness gradient rel err {lin_err:.4%} (<1%) at 1e6 "
                   f"samples; quadratic |w-3| = {dist:.4f} (<0.05), golden drift "
                   f"{golden_drift:.1e}")
    assert lin_err < 0.01
    assert dist < 0.05
    assert golden_drift < 1e-12


def test_criterion_09_cost_model(desk_net_and_data):
    network, _ = desk_net_and_data
    k = rng.key(SEED)
    x = rng.sample_gaussian(rng.split(k, 7), (512, DESK_DATA["d"]))
    with perturb.count_matmuls() as c:
        nets.net_forward(network, x, "flipout", rng.split(k, 8))
    flip_mm = c.count
    with perturb.count_matmuls() as c:
        nets.net_forward(network, x, "shared", rng.split(k, 8))
    shared_mm = c.count
    structural_ok = flip_mm == 2 * len(network.layers) and shared_mm == len(network.layers)

    def timed(strategy, reps=80):
        out = []
        for rep in range(reps):
            t0 = time.perf_counter()
            nets.net_forward(network, x, strategy, rng.split(k, 100 + rep))
            out.append(time.perf_counter() - t0)
        return float(np.median(out))

    timed("shared", 10)  # warm-up
    ratio = timed("flipout") / timed("shared")
    ok = structural_ok and ratio <= 2.5
    _report(9, ok, f"flipout {flip_mm} matmuls vs shared {shared_mm} for "
                   f"{len(network.layers)} layers (exactly 2x); wall-time ratio "
                   f"{ratio:.2f} (<=2.5) at batch 512")
    assert structural_ok
    assert ratio <= 2.5


def test_criterion_10_byte_reproducibility(tmp_path):
    sweep_cfg = tmp_path / "sweep.ini"
    sweep_cfg.write_text(
        "[variance-sweep]\ndata_n = 512\ndata_d = 8\nclasses = 3\nwidths = 16\n"
        "pretrain_steps = 30\ngrid = 1,8\nstrategies = shared,flipout,lrt\n"
        "repeats = 20\nruns = 5\n")
    dec_cfg = tmp_path / "dec.ini"
    dec_cfg.write_text(
        "[decompose]\ndata_n = 512\ndata_d = 8\nclasses = 3\nwidths = 16\n"
        "pretrain_steps = 20\nn_outer = 8\nn_inner = 6\nn_pairs = 12\n")
    csvs, jsons = [], []
    for name, threads in (("r1", 1), ("r2", 1), ("r8", 8)):
        out = tmp_path / ("sweep_" + name)
        assert cli.main(["variance-sweep", "--config", str(sweep_cfg), "--out",
                         str(out), "--threads", str(threads)]) == 0
        csvs.append((out / "variance.csv").read_bytes())
    for name in ("d1", "d2"):
        out = tmp_path / ("dec_" + name)
        assert cli.main(["decompose", "--config", str(dec_cfg), "--out",
                         str(out)]) == 0
        jsons.append((out / "decomposition.json").read_bytes())
    csv_ok = csvs[0] == csvs[1] == csvs[2]
    json_ok = jsons[0] == jsons[1]
    ok = csv_ok and json_ok
    _report(10, ok, f"variance CSV byte-identical across two runs and "
                    f"--threads 1 vs 8: {csv_ok}; decomposition JSON "
                    f"byte-identical: {json_ok}")
    assert csv_ok
    assert json_ok
