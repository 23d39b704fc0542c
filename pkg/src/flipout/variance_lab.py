"""Gradient-variance measurement and its (alpha, beta, gamma) decomposition.

``estimate_variance`` measures, for a frozen network, the per-weight
variance of mini-batch gradients under a perturbation strategy: each of
`repeats` passes redraws the mini-batch and the perturbation (so the
measurement includes both the data and the estimation term), per-weight
variances are averaged within a layer, and `runs` independent repetitions
give a Student-t confidence interval.

``estimate_decomposition`` estimates the three scalars that determine how
that variance scales with batch size N:

* alpha : variance of a single example's gradient (data + estimation),
* beta  : cross-example gradient covariance caused by sharing the sign
          vectors (this is the part flipout removes),
* gamma : cross-example covariance caused by sharing the base
          perturbation (flipout keeps this),

giving the closed-form curves evaluated by ``predict_variance``:

* independent : alpha / N
* shared      : alpha / N + (N - 1) / N * (beta + gamma)
* flipout     : alpha / N + (N - 1) / N * gamma

On small layers the inner expectation over sign vectors can be computed
exactly by enumerating every sign combination (``inner="enumerate"``),
which is the oracle the Monte-Carlo path is tested against.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import net as nets
from . import perturb, rng
from .datasets import sample_batch
from .perturb import ADDITIVE, DROPCONNECT, FLIPOUT, INDEPENDENT, MULTIPLICATIVE, NONE, SHARED


@dataclass
class GradStats:
    """Layer-averaged gradient variance with a 90% confidence interval."""

    layer_name: str
    strategy: str
    batch_size: int
    mean_variance: float
    ci_low: float
    ci_high: float
    repeats: int
    runs: int


@dataclass
class Decomposition:
    """Layer-averaged variance decomposition with jackknife standard errors."""

    alpha: float
    beta: float
    gamma: float
    alpha_se: float
    beta_se: float
    gamma_se: float
    source_layer: str


# ---------------------------------------------------------------------------
# variance estimator


def _one_run(network, data, strategy, batch_size, repeats, run_key, freeze_batch, replace):
    layer_idx = nets.perturbable_layers(network)
    samples = None
    bkey = rng.split(run_key, 0)
    if freeze_batch:
        bx, by = sample_batch(data, batch_size, bkey, replace=replace)
    for i in range(repeats):
        if not freeze_batch:
            bx, by = sample_batch(data, batch_size, rng.split(bkey, i), replace=replace)
        _, cache = nets.net_forward(network, bx, strategy, rng.split(rng.split(run_key, 1), i))
        _, grads = nets.net_backward(network, cache, by)
        if samples is None:
            samples = [np.empty((repeats, grads[l].d_mean.size)) for l in layer_idx]
        for j, l in enumerate(layer_idx):
            samples[j][i] = grads[l].d_mean.ravel()
    return [float(s.var(axis=0, ddof=0).mean()) for s in samples]


def estimate_variance(network, data, strategy, batch_size, repeats, runs, key,
                      freeze_batch=False, replace=True, threads=1):
    """Measure layer-averaged gradient variance; one GradStats per layer.

    Each run redraws everything from its own split key, so results do not
    depend on execution order or thread count.  With `freeze_batch` the
    mini-batch is drawn once per run and only the perturbations resample,
    isolating the estimation term.
    """
    if repeats < 2 or runs < 2:
        raise ValueError("repeats and runs must both be at least 2")
    if not replace and batch_size > len(data):
        raise ValueError("batch size exceeds dataset size (and replace=False)")
    run_keys = [rng.split(key, r) for r in range(runs)]

    def work(rk):
        return _one_run(network, data, strategy, batch_size, repeats, rk,
                        freeze_batch, replace)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            per_run = list(ex.map(work, run_keys))
    else:
        per_run = [work(rk) for rk in run_keys]

    values = np.asarray(per_run)  # [runs, layers]
    tcrit = stats.t.ppf(0.95, runs - 1)
    out = []
    for j, l in enumerate(nets.perturbable_layers(network)):
        v = values[:, j]
        mean = float(v.mean())
        half = float(tcrit * v.std(ddof=1) / np.sqrt(runs))
        out.append(GradStats(
            layer_name=f"layer{l}",
            strategy=strategy,
            batch_size=batch_size,
            mean_variance=mean,
            ci_low=mean - half,
            ci_high=mean + half,
            repeats=repeats,
            runs=runs,
        ))
    return out


# ---------------------------------------------------------------------------
# per-example gradients (dense layers)


def per_example_mean_grads(network, cache, targets, layer):
    """Per-example gradients of layer's mean weights: [N, d_in, d_out].

    Row n is the gradient of example n's own (unnormalized) loss, so the
    batch-mean gradient is the row average.  Includes the weight path
    through the sampled delta in the multiplicative and dropconnect
    modes.  Dense layers only.
    """
    c = cache["layers"][layer]
    if c["kind"] != "dense":
        raise ValueError("per-example gradients are implemented for dense layers")
    if "dpre" not in c:
        nets.net_backward(network, cache, targets, save_dpre=True)
    x = c["x"]
    n = x.shape[0]
    dpre = c["dpre"] * n
    g = np.einsum("ni,no->nio", x, dpre)
    dist = network.layers[layer].dist
    strategy = c["strategy"]
    if strategy == NONE or dist.mode == ADDITIVE:
        return g
    if strategy == SHARED:
        base = c["base"]
        factor = dist.scale * base.noise if dist.mode == MULTIPLICATIVE else base.noise
        return g * (1.0 + factor)
    if strategy == FLIPOUT:
        base, signs = c["base"], c["signs"]
        factor = dist.scale * base.noise if dist.mode == MULTIPLICATIVE else base.noise
        extra = np.einsum("ni,no->nio", x * signs.s, dpre * signs.r)
        return g + extra * factor
    if strategy == INDEPENDENT:
        noises = c["noises"]
        factor = dist.scale * noises if dist.mode == MULTIPLICATIVE else noises
        return g * (1.0 + factor)
    raise ValueError(f"per-example gradients unavailable for strategy {strategy!r}")


# ---------------------------------------------------------------------------
# decomposition


def _grad_blocks(network, x_rows, y_rows, layer, sign_key, base_key, signs):
    _, cache = nets.net_forward(network, x_rows, FLIPOUT, sign_key,
                                base_key=base_key, signs=signs)
    return per_example_mean_grads(network, cache, y_rows, layer)


def estimate_decomposition(network, data, layer, n_outer, n_inner, n_pairs, key,
                           inner="mc", n_groups=10, max_bytes=1 << 30):
    """Nested Monte-Carlo estimate of (alpha, beta, gamma) for one layer.

    Outer loop over base-perturbation draws, inner loop over sign draws
    (or exact enumeration with ``inner="enumerate"``), example pairs
    drawn once, i.i.d. with replacement.  Standard errors come from a
    delete-one-group jackknife over the outer draws.
    """
    if n_outer < 2 or n_pairs < 2 or (inner == "mc" and n_inner < 2):
        raise ValueError("decomposition budgets must be at least 2")
    if inner not in ("mc", "enumerate"):
        raise ValueError("inner must be 'mc' or 'enumerate'")
    dist = network.layers[layer].dist
    d_in, d_out = dist.shape
    n_entries = d_in * d_out
    if inner == "enumerate":
        if len(network.layers) != 1:
            raise ValueError("exact sign enumeration needs a single-layer network")
        enum = perturb.enumerate_sign_pairs(d_in, d_out)
        k_inner = enum.r.shape[0]
    else:
        enum = None
        k_inner = n_inner
    n_groups = max(2, min(n_groups, n_outer))
    need = 3 * n_groups * n_pairs * n_entries * 8
    if need > max_bytes:
        raise ValueError(f"gamma accumulators would need {need} bytes; "
                         "reduce n_pairs or the layer size")

    gx = rng.generator(rng.split(key, 0))
    idx1 = gx.integers(0, len(data), size=n_pairs)
    idx2 = gx.integers(0, len(data), size=n_pairs)
    x1, y1 = data.x[idx1], data.y[idx1]
    x2, y2 = data.x[idx2], data.y[idx2]
    rows_x1 = np.repeat(x1, k_inner, axis=0)
    rows_x2 = np.repeat(x2, k_inner, axis=0)
    rows_y1 = np.repeat(y1, k_inner, axis=0)
    rows_y2 = np.repeat(y2, k_inner, axis=0)
    if enum is not None:
        big_signs = [perturb.SignPair(r=np.tile(enum.r, (n_pairs, 1)),
                                      s=np.tile(enum.s, (n_pairs, 1)))]
        alpha_signs = [perturb.SignPair(r=np.tile(enum.r, (n_pairs, 1)),
                                        s=np.tile(enum.s, (n_pairs, 1)))]
    else:
        big_signs = alpha_signs = None

    # accumulators, indexed by jackknife group over outer draws; the pair
    # dimension is kept so pair-sampling noise enters the standard errors
    a_sum = np.zeros((n_groups, n_entries))
    a_sum2 = np.zeros((n_groups, n_entries))
    a_count = np.zeros(n_groups)
    beta_op = np.empty((n_outer, n_pairs))
    g_s1 = np.zeros((n_groups, n_pairs, n_entries))
    g_s2 = np.zeros((n_groups, n_pairs, n_entries))
    g_s12 = np.zeros((n_groups, n_pairs, n_entries))
    g_count = np.zeros(n_groups)

    group_of = (np.arange(n_outer) * n_groups) // n_outer
    for o in range(n_outer):
        ko = rng.split(rng.split(key, 1), o)
        base_key = rng.split(ko, 0)
        j = group_of[o]

        g1 = _grad_blocks(network, rows_x1, rows_y1, layer,
                          rng.split(ko, 1), base_key, big_signs)
        g1 = g1.reshape(n_pairs, k_inner, n_entries)
        g2a = _grad_blocks(network, rows_x2, rows_y2, layer,
                           rng.split(ko, 1), base_key, big_signs)
        g2a = g2a.reshape(n_pairs, k_inner, n_entries)

        m1 = g1.mean(axis=1)
        m2a = g2a.mean(axis=1)
        if enum is not None:
            cov = (g1 * g2a).mean(axis=1) - m1 * m2a  # exact population moments
            m2 = m2a
        else:
            cov = ((g1 - m1[:, None, :]) * (g2a - m2a[:, None, :])).sum(axis=1) / (k_inner - 1)
            # independent sign draws for the gamma means, so the two
            # inner-MC errors are uncorrelated
            g2b = _grad_blocks(network, rows_x2, rows_y2, layer,
                               rng.split(ko, 2), base_key, None)
            m2 = g2b.reshape(n_pairs, k_inner, n_entries).mean(axis=1)
        beta_op[o] = cov.mean(axis=1)
        g_s1[j] += m1
        g_s2[j] += m2
        g_s12[j] += m1 * m2
        g_count[j] += 1

        # fresh examples for the single-example variance
        xa, ya = sample_batch(data, n_pairs, rng.split(ko, 3), replace=True)
        if enum is not None:
            rows_xa = np.repeat(xa, k_inner, axis=0)
            rows_ya = np.repeat(ya, k_inner, axis=0)
            ga = _grad_blocks(network, rows_xa, rows_ya, layer,
                              rng.split(ko, 4), base_key, alpha_signs)
            ga = ga.reshape(n_pairs, k_inner, n_entries)
            a_sum[j] += ga.mean(axis=1).sum(axis=0)
            a_sum2[j] += (ga**2).mean(axis=1).sum(axis=0)
            a_count[j] += n_pairs
        else:
            ga = _grad_blocks(network, xa, ya, layer, rng.split(ko, 4), base_key, None)
            ga = ga.reshape(n_pairs, n_entries)
            a_sum[j] += ga.sum(axis=0)
            a_sum2[j] += (ga**2).sum(axis=0)
            a_count[j] += n_pairs

    def alpha_from(mask):
        n = a_count[mask].sum()
        s1 = a_sum[mask].sum(axis=0)
        s2 = a_sum2[mask].sum(axis=0)
        return float(((s2 - s1**2 / n) / (n - 1)).mean())

    def beta_from(outer_mask, pair_mask):
        return float(beta_op[np.ix_(outer_mask, pair_mask)].mean())

    def gamma_from(mask, pair_mask):
        n = g_count[mask].sum()
        s1 = g_s1[mask].sum(axis=0)[pair_mask]
        s2 = g_s2[mask].sum(axis=0)[pair_mask]
        s12 = g_s12[mask].sum(axis=0)[pair_mask]
        return float(((s12 - s1 * s2 / n) / (n - 1)).mean())

    all_groups = np.ones(n_groups, dtype=bool)
    all_outer = np.ones(n_outer, dtype=bool)
    all_pairs = np.ones(n_pairs, dtype=bool)
    alpha = alpha_from(all_groups)
    beta = beta_from(all_outer, all_pairs)
    gamma = gamma_from(all_groups, all_pairs)

    def jack_se(vals):
        v = np.asarray(vals)
        return float(np.sqrt((len(v) - 1) / len(v) * ((v - v.mean()) ** 2).sum()))

    # delete-one-group jackknife over outer draws ...
    a_jack, b_jack, c_jack = [], [], []
    for j in range(n_groups):
        gmask = all_groups.copy()
        gmask[j] = False
        omask = group_of != j
        a_jack.append(alpha_from(gmask))
        b_jack.append(beta_from(omask, all_pairs))
        c_jack.append(gamma_from(gmask, all_pairs))
    alpha_se = jack_se(a_jack)
    beta_se_outer = jack_se(b_jack)
    gamma_se_outer = jack_se(c_jack)

    # ... plus over pair groups, since the pairs are drawn once and held
    # fixed while the outer loop runs
    n_pgroups = max(2, min(n_groups, n_pairs))
    pair_group = (np.arange(n_pairs) * n_pgroups) // n_pairs
    b_jack, c_jack = [], []
    for j in range(n_pgroups):
        pmask = pair_group != j
        b_jack.append(beta_from(all_outer, pmask))
        c_jack.append(gamma_from(all_groups, pmask))
    beta_se = float(np.hypot(beta_se_outer, jack_se(b_jack)))
    gamma_se = float(np.hypot(gamma_se_outer, jack_se(c_jack)))

    return Decomposition(
        alpha=alpha, beta=beta, gamma=gamma,
        alpha_se=alpha_se, beta_se=beta_se, gamma_se=gamma_se,
        source_layer=f"layer{layer}",
    )


def predict_variance(d: Decomposition, batch_size, strategy):
    """Closed-form variance of the batch-averaged gradient at size N."""
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    n = float(batch_size)
    if strategy == INDEPENDENT:
        return d.alpha / n
    if strategy == SHARED:
        return d.alpha / n + (n - 1) / n * (d.beta + d.gamma)
    if strategy == FLIPOUT:
        return d.alpha / n + (n - 1) / n * d.gamma
    raise ValueError(f"no variance prediction for strategy {strategy!r}")


def predict_variance_se(d: Decomposition, batch_size, strategy):
    """Standard error of the prediction, propagated from the component SEs."""
    n = float(batch_size)
    if strategy == INDEPENDENT:
        return d.alpha_se / n
    if strategy == SHARED:
        return float(np.sqrt((d.alpha_se / n) ** 2
                             + ((n - 1) / n) ** 2 * (d.beta_se**2 + d.gamma_se**2)))
    if strategy == FLIPOUT:
        return float(np.sqrt((d.alpha_se / n) ** 2 + ((n - 1) / n) ** 2 * d.gamma_se**2))
    raise ValueError(f"no variance prediction for strategy {strategy!r}")


def fit_loglog_slope(points):
    """Least-squares slope of log(variance) against log(N)."""
    points = list(points)
    if len(points) < 3:
        raise ValueError("need at least 3 points")
    n = np.array([p[0] for p in points], dtype=np.float64)
    v = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(n <= 0) or np.any(v <= 0):
        raise ValueError("batch sizes and variances must be positive")
    return float(np.polyfit(np.log(n), np.log(v), 1)[0])


# ---------------------------------------------------------------------------
# machine-readable outputs


def format_float(x):
    return repr(float(x))


def write_variance_csv(path, stats_list, seed):
    """CSV, one row per (layer, strategy, N), sorted, LF endings."""
    rows = sorted(stats_list, key=lambda s: (s.layer_name, s.strategy, s.batch_size))
    lines = ["layer,strategy,N,variance,ci_low,ci_high,repeats,runs,seed"]
    for s in rows:
        lines.append(",".join([
            s.layer_name, s.strategy, str(s.batch_size),
            format_float(s.mean_variance), format_float(s.ci_low),
            format_float(s.ci_high), str(s.repeats), str(s.runs), str(seed),
        ]))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))


def write_decomposition_json(path, d: Decomposition, budgets, seed):
    record = {
        "layer": d.source_layer,
        "alpha": d.alpha, "alpha_se": d.alpha_se,
        "beta": d.beta, "beta_se": d.beta_se,
        "gamma": d.gamma, "gamma_se": d.gamma_se,
        "budgets": budgets,
        "seed": seed,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
                 .encode("ascii"))
