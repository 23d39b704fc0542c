"""Central finite-difference audit of the manual backward passes.

Because every forward is a deterministic function of its RngKey, the
loss is a smooth function of the parameters at a fixed key, and the
analytic gradients can be checked entry by entry against central
differences.  Relative error uses max(1, |a|, |b|) in the denominator so
near-zero entries are judged on absolute error.
"""

from __future__ import annotations

import numpy as np

from . import net as nets
from . import rng
from .perturb import ADDITIVE, DROPCONNECT, FLIPOUT, INDEPENDENT, LRT, MULTIPLICATIVE, NONE, SHARED

DENSE_TOL = 1e-5
LSTM_TOL = 1e-4


def rel_error(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def numeric_grad(f, x0, eps=1e-5):
    """Central-difference gradient of scalar f at array x0, entry by entry."""
    x = x0.copy()
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * eps)
        it.iternext()
    return g


def check_network_gradients(network, x, targets, strategy, key, eps=1e-5, skip=()):
    """Max relative error of every parameter gradient vs central differences.

    Returns a dict name -> max relative error.  `skip` names parameters
    that have no gradient in the given configuration (e.g. scale under
    strategy none or dropconnect).
    """
    out, cache = nets.net_forward(network, x, strategy, key)
    _, grads = nets.net_backward(network, cache, targets)
    params = {k: v.copy() for k, v in nets.get_params(network).items()}

    analytic = {}
    for l, g in enumerate(grads):
        analytic[f"layer{l}/mean"] = g.d_mean
        analytic[f"layer{l}/scale"] = g.d_scale
        analytic[f"layer{l}/bias"] = g.d_bias
        if g.d_wx is not None:
            analytic[f"layer{l}/wx"] = g.d_wx

    def loss_at(pdict):
        m = nets.set_params(network, pdict)
        o, _ = nets.net_forward(m, x, strategy, key)
        return nets.loss_and_grad(m.loss, o, targets)[0]

    report = {}
    for name, a in analytic.items():
        if name in skip:
            continue

        def f(arr, _name=name):
            trial = dict(params)
            trial[_name] = arr
            return loss_at(trial)

        n = numeric_grad(f, params[name], eps=eps)
        report[name] = float(rel_error(a, n).max()) if a.size else 0.0
    return report


def _dense_cases(seed):
    k = rng.key(seed)
    x = rng.sample_gaussian(rng.split(k, 100), (5, 3))
    labels = np.array([0, 2, 1, 2, 0])
    targets_mse = rng.sample_gaussian(rng.split(k, 101), (5, 2))
    cases = []
    for mode, sigma in ((ADDITIVE, 0.3), (MULTIPLICATIVE, 0.4), (DROPCONNECT, 0.0)):
        ce = nets.build_mlp(rng.split(k, 1), (3, 4, 3), mode=mode, sigma=sigma)
        cases.append(("dense_ce_" + mode, ce, x, labels))
        ms = nets.build_mlp(rng.split(k, 2), (3, 4, 2), mode=mode, sigma=sigma,
                            loss="mean_squared_error")
        cases.append(("dense_mse_" + mode, ms, x, targets_mse))
    return cases


def run_default_audit(seed=42, steps=5):
    """Gradcheck the stock small networks under every applicable strategy.

    Returns a list of records {case, strategy, max_rel_error, tolerance}.
    """
    records = []
    k = rng.key(seed)
    for case_name, network, x, targets in _dense_cases(seed):
        mode = network.layers[0].dist.mode
        strategies = [NONE, SHARED, FLIPOUT, INDEPENDENT]
        if mode != DROPCONNECT:
            strategies.append(LRT)
        for strategy in strategies:
            skip = ()
            if strategy == NONE or mode == DROPCONNECT:
                skip = tuple(f"layer{l}/scale" for l in range(len(network.layers)))
            rep = check_network_gradients(network, x, targets, strategy,
                                          rng.split(k, 7), skip=skip)
            records.append({
                "case": case_name,
                "strategy": strategy,
                "max_rel_error": max(rep.values()),
                "tolerance": DENSE_TOL,
            })
    lstm = nets.build_lstm_classifier(rng.split(k, 3), d_in=3, d_h=4, n_classes=2,
                                      mode=MULTIPLICATIVE, sigma=0.4)
    x_seq = rng.sample_gaussian(rng.split(k, 102), (4, steps, 3))
    labels = np.array([0, 1, 1, 0])
    for strategy in (NONE, SHARED, FLIPOUT, INDEPENDENT):
        skip = ["layer1/scale"]
        if strategy == NONE:
            skip.append("layer0/scale")
        rep = check_network_gradients(lstm, x_seq, labels, strategy,
                                      rng.split(k, 8), skip=tuple(skip))
        records.append({
            "case": f"lstm_{steps}step",
            "strategy": strategy,
            "max_rel_error": max(rep.values()),
            "tolerance": LSTM_TOL,
        })
    return records
