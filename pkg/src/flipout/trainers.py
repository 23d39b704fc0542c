"""End-to-end trainers: variational Bayes-by-Backprop and evolution strategies.

Both trainers consume the perturbation machinery: BBB backpropagates
through the strategy's forward rule to train a factorial-Gaussian weight
posterior; ES estimates gradients from fitness evaluations of perturbed
weights, either one fresh perturbation per sample (the "ideal" baseline)
or a batch of sign-flipped variants of one base perturbation per worker,
which turns a worker's whole batch into matrix multiplications.

Biases are never perturbed; under ES they receive no update signal and
stay at their initial values.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import net as nets
from . import perturb, rng
from .datasets import sample_batch
from .net import DenseLayer, Network, _activate, loss_and_grad, predict_labels
from .perturb import ADDITIVE, FLIPOUT, NONE, BasePerturbation, SignPair, WeightDist

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    lr: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_optimizer(kind, params, lr):
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    state = OptimizerState(kind=kind, lr=lr)
    if kind == "adam":
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
    return state


def opt_step(state, params, grads):
    """One descent step; returns (new_state, new_params), inputs untouched."""
    new = {}
    if state.kind == "sgd":
        for k in params:
            new[k] = params[k] - state.lr * grads[k]
        return OptimizerState(kind="sgd", lr=state.lr, step=state.step + 1), new
    t = state.step + 1
    m, v = {}, {}
    for k in params:
        m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * grads[k]
        v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * grads[k] ** 2
        mhat = m[k] / (1 - state.beta1**t)
        vhat = v[k] / (1 - state.beta2**t)
        new[k] = params[k] - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    out = OptimizerState(kind="adam", lr=state.lr, step=t, m=m, v=v,
                         beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return out, new


# ---------------------------------------------------------------------------
# softplus parameterization of sigma


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inv needs positive input")
    return y + np.log1p(-np.exp(-y))


# ---------------------------------------------------------------------------
# Bayes by Backprop


@dataclass
class BbbConfig:
    prior_std: float = 1.0
    kl_scale: float = 0.1
    batch_size: int = 128
    learning_rate: float = 0.003
    strategy: str = FLIPOUT
    steps: int = 200
    dataset_size: int = None
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0.0 < self.kl_scale <= 1.0:
            raise ValueError("kl_scale must lie in (0, 1]")
        if self.prior_std <= 0 or self.learning_rate <= 0:
            raise ValueError("prior_std and learning_rate must be positive")


def kl_factorial_gaussian(dist: WeightDist, prior_std):
    """KL(q || p) between factorial Gaussians q = N(mean, scale^2) and
    p = N(0, prior_std^2), summed over entries."""
    if dist.mode != ADDITIVE:
        raise ValueError("KL is defined for the additive-Gaussian posterior")
    if prior_std <= 0:
        raise ValueError("prior_std must be positive")
    if np.any(dist.scale <= 0):
        raise ValueError("posterior scale must be positive")
    s2, ps2 = dist.scale**2, prior_std**2
    return float(np.sum(np.log(prior_std / dist.scale) + (s2 + dist.mean**2) / (2 * ps2) - 0.5))


def kl_grads(dist: WeightDist, prior_std):
    ps2 = prior_std**2
    return dist.mean / ps2, -1.0 / dist.scale + dist.scale / ps2


def build_bbb_mlp(key, dims, sigma0_factor=0.05, hidden_activation="relu"):
    """Additive-Gaussian posterior net; sigma starts at a small fraction
    of each layer's weight-init standard deviation."""
    network = nets.build_mlp(key, dims, mode=ADDITIVE, sigma=0.0,
                             hidden_activation=hidden_activation)
    for layer in network.layers:
        d_in, d_out = layer.dist.shape
        init_std = np.sqrt(2.0 / (d_in + d_out))
        layer.dist.scale = np.full((d_in, d_out), sigma0_factor * init_std)
    return network


def bbb_step(network, batch, cfg: BbbConfig, opt: OptimizerState, key):
    """One optimizer step on the negative evidence bound.

    Objective: dataset_size * mean_nll + kl_scale * KL(q || prior), with
    gradients flowing to mean and scale through the strategy's forward
    rule; scale is trained as softplus of an unconstrained parameter.
    """
    bx, by = batch
    n_data = cfg.dataset_size if cfg.dataset_size is not None else len(bx)
    out, cache = nets.net_forward(network, bx, cfg.strategy, key)
    nll, grads = nets.net_backward(network, cache, by)

    params, pgrads = {}, {}
    kl_total = 0.0
    for l, layer in enumerate(network.layers):
        dist = layer.dist
        kl_total += kl_factorial_gaussian(dist, cfg.prior_std)
        km, ks = kl_grads(dist, cfg.prior_std)
        d_mean = n_data * grads[l].d_mean + cfg.kl_scale * km
        d_scale = n_data * grads[l].d_scale + cfg.kl_scale * ks
        rho = softplus_inv(dist.scale)
        params[f"layer{l}/mean"] = dist.mean
        params[f"layer{l}/rho"] = rho
        params[f"layer{l}/bias"] = layer.bias
        pgrads[f"layer{l}/mean"] = d_mean
        pgrads[f"layer{l}/rho"] = d_scale * (1.0 - np.exp(-dist.scale))
        pgrads[f"layer{l}/bias"] = n_data * grads[l].d_bias
    opt2, new_params = opt_step(opt, params, pgrads)

    new_layers = []
    for l, layer in enumerate(network.layers):
        dist = WeightDist(new_params[f"layer{l}/mean"],
                          softplus(new_params[f"layer{l}/rho"]), ADDITIVE)
        new_layers.append(DenseLayer(dist, new_params[f"layer{l}/bias"], layer.activation))
    new_net = Network(new_layers, network.loss)
    loss = n_data * nll + cfg.kl_scale * kl_total
    err = float(np.mean(predict_labels(out) != by)) if network.loss == "softmax_cross_entropy" else float("nan")
    return new_net, opt2, {"loss": loss, "nll": nll, "kl": kl_total, "batch_error": err}


def train_pointwise(network, data, steps, lr, batch_size, key, optimizer="adam"):
    """Plain maximum-likelihood training of mean weights and biases.

    No perturbations anywhere, so the result is a deterministic function
    of (network, data, key); used to produce frozen, partially trained
    nets for variance measurements.
    """
    network = copy.deepcopy(network)
    for layer in network.layers:
        if not isinstance(layer, DenseLayer):
            raise ValueError("pointwise pretraining supports dense networks")
    params = {}
    for l, layer in enumerate(network.layers):
        params[f"layer{l}/mean"] = layer.dist.mean
        params[f"layer{l}/bias"] = layer.bias
    opt = init_optimizer(optimizer, params, lr)
    for it in range(steps):
        kt = rng.split(key, it)
        bx, by = sample_batch(data, batch_size, rng.split(kt, 0))
        _, cache = nets.net_forward(network, bx, NONE, rng.split(kt, 1))
        _, grads = nets.net_backward(network, cache, by)
        pgrads = {}
        for l in range(len(network.layers)):
            pgrads[f"layer{l}/mean"] = grads[l].d_mean
            pgrads[f"layer{l}/bias"] = grads[l].d_bias
        opt, params = opt_step(opt, params, pgrads)
        for l, layer in enumerate(network.layers):
            layer.dist.mean = params[f"layer{l}/mean"]
            layer.bias = params[f"layer{l}/bias"]
    return network


def evaluate_deterministic(network, data):
    """(mean nll, error rate) of the net at its mean weights, no sampling."""
    out, _ = nets.net_forward(network, data.x, NONE, rng.key(0))
    nll, _ = loss_and_grad(network.loss, out, data.y)
    if network.loss == "softmax_cross_entropy":
        err = float(np.mean(predict_labels(out) != data.y))
    else:
        err = float("nan")
    return float(nll), err


def bbb_train(network, data, cfg: BbbConfig, key, log_path=None):
    """Run BBB for cfg.steps; returns (records, trained net).

    One record per iteration following the run-log schema; wall_ms is the
    only nondeterministic field.
    """
    cfg_size = cfg.dataset_size if cfg.dataset_size is not None else len(data)
    cfg = BbbConfig(**{**cfg.__dict__, "dataset_size": cfg_size})
    params = nets.get_params(network)
    opt_params = {}
    for l in range(len(network.layers)):
        opt_params[f"layer{l}/mean"] = params[f"layer{l}/mean"]
        opt_params[f"layer{l}/rho"] = softplus_inv(params[f"layer{l}/scale"])
        opt_params[f"layer{l}/bias"] = params[f"layer{l}/bias"]
    opt = init_optimizer(cfg.optimizer, opt_params, cfg.learning_rate)
    records = []
    for it in range(cfg.steps):
        t0 = time.perf_counter()
        kt = rng.split(key, it)
        batch = sample_batch(data, cfg.batch_size, rng.split(kt, 0))
        network, opt, metrics = bbb_step(network, batch, cfg, opt, rng.split(kt, 1))
        records.append({
            "iter": it,
            "loss": metrics["loss"],
            "error_rate": metrics["batch_error"],
            "samples_used": (it + 1) * cfg.batch_size,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
            "strategy": cfg.strategy,
            "seed": key.root_seed,
        })
    if log_path:
        write_runlog(log_path, records)
    return records, network


# ---------------------------------------------------------------------------
# evolution strategies


@dataclass
class EsConfig:
    sigma: float = 0.1
    learning_rate: float = 0.05
    workers: int = 40
    flip_batch: int = 40
    samples_per_update: int = None
    iters: int = 100
    fitness_batch: int = 64
    fitness: str = "neg_xent"
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.samples_per_update is None:
            self.samples_per_update = self.workers * self.flip_batch
        if self.samples_per_update != self.workers * self.flip_batch:
            raise ValueError("samples_per_update must equal workers * flip_batch")


def es_gradient(fitness, perturbations, cfg: EsConfig):
    """Plain fitness-weighted estimator: mean_m F_m eps_m / sigma^2.

    `perturbations` is a list of dicts (or arrays) of noise with entries
    of standard deviation sigma; the result matches their structure.
    """
    fitness = np.asarray(fitness, dtype=np.float64)
    if len(fitness) != len(perturbations):
        raise ValueError("need exactly one fitness value per perturbation")
    inv = 1.0 / (len(fitness) * cfg.sigma**2)
    if isinstance(perturbations[0], dict):
        out = {k: np.zeros_like(v) for k, v in perturbations[0].items()}
        for f, eps in zip(fitness, perturbations):
            for k in out:
                out[k] += f * eps[k]
        return {k: v * inv for k, v in out.items()}
    acc = np.zeros_like(np.asarray(perturbations[0], dtype=np.float64))
    for f, eps in zip(fitness, perturbations):
        acc = acc + f * np.asarray(eps, dtype=np.float64)
    return acc * inv


def es_gradient_flipout(fitness, bases, signs, cfg: EsConfig):
    """Fitness-weighted estimator over sign-flipped variants of each base.

    fitness : [workers, flip_batch],
    bases   : per-worker dict name -> base noise matrix,
    signs   : per-worker dict name -> SignPair with flip_batch rows.
    Returns dict name -> mean_mn F_mn * base_m * outer(s_mn, r_mn) / sigma^2.
    """
    fitness = np.asarray(fitness, dtype=np.float64)
    m_workers, n_flips = fitness.shape
    if len(bases) != m_workers or len(signs) != m_workers:
        raise ValueError("need one base and one sign set per worker")
    out = {k: np.zeros_like(v) for k, v in bases[0].items()}
    for m in range(m_workers):
        f = fitness[m]
        for name, base in bases[m].items():
            sp = signs[m][name]
            out[name] += base * (sp.s.T @ (f[:, None] * sp.r))
    inv = 1.0 / (m_workers * n_flips * cfg.sigma**2)
    return {k: v * inv for k, v in out.items()}


def _es_weight_names(network):
    for layer in network.layers:
        if not isinstance(layer, DenseLayer):
            raise ValueError("ES training supports dense networks")
    return [f"layer{l}/mean" for l in range(len(network.layers))]


def _fitness_from_logits(network, logits, by, cfg):
    if cfg.fitness == "neg_xent":
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, by[..., None], axis=-1)[..., 0]
        return picked.mean(axis=-1)
    if cfg.fitness == "neg_error":
        pred = np.argmax(logits, axis=-1)
        return -(pred != by).mean(axis=-1)
    raise ValueError(f"unknown fitness {cfg.fitness!r}")


def _es_worker_fitness_flipout(network, bx, by, base, signs, cfg):
    """Fitness of flip_batch sign-flipped perturbations on one batch.

    The data batch is tiled once per perturbation and the per-row sign
    trick evaluates all of them in two matmuls per layer.
    """
    n_flips = cfg.flip_batch
    d = bx.shape[0]
    h = np.tile(bx, (n_flips, 1))
    for l, layer in enumerate(network.layers):
        sp = signs[f"layer{l}/mean"]
        big = SignPair(r=np.repeat(sp.r, d, axis=0), s=np.repeat(sp.s, d, axis=0))
        pre = perturb.forward_flipout(
            h, layer.dist, BasePerturbation(delta=base[f"layer{l}/mean"], noise=None), big
        ) + layer.bias
        h = _activate(layer.activation, pre)
    logits = h.reshape(n_flips, d, -1)
    return _fitness_from_logits(network, logits, np.tile(by, (n_flips, 1)), cfg)


def _es_fitness_independent(network, bx, by, eps_stacks, cfg):
    """Fitness of K fully independent perturbations, batched by einsum."""
    k_samples = next(iter(eps_stacks.values())).shape[0]
    h = bx
    for l, layer in enumerate(network.layers):
        w = layer.dist.mean + eps_stacks[f"layer{l}/mean"]
        if h.ndim == 2:
            pre = np.einsum("bi,kio->kbo", h, w)
        else:
            pre = np.einsum("kbi,kio->kbo", h, w)
        h = _activate(layer.activation, pre + layer.bias)
    return _fitness_from_logits(network, h, np.tile(by, (k_samples, 1)), cfg)


def es_train(network, data, cfg: EsConfig, key, independent=False, log_path=None,
             threads=1):
    """Maximize fitness by iterated perturb-evaluate-update.

    With `independent` every sample draws its own perturbation (the
    variance gold standard); otherwise each of `workers` bases is
    decorrelated into `flip_batch` sign-flipped variants.  The update is
    applied with the configured optimizer as an ascent step.
    """
    network = copy.deepcopy(network)
    names = _es_weight_names(network)
    records = []
    for it in range(cfg.iters):
        t0 = time.perf_counter()
        kt = rng.split(key, it)
        bx, by = sample_batch(data, cfg.fitness_batch, rng.split(kt, 0))
        if independent:
            k_samples = cfg.samples_per_update
            eps = {}
            for j, name in enumerate(names):
                shape = (k_samples,) + network.layers[j].dist.shape
                eps[name] = cfg.sigma * rng.sample_gaussian(
                    rng.split(rng.split(kt, 1), j), shape)
            fitness = _es_fitness_independent(network, bx, by, eps, cfg)
            direction = {
                name: np.einsum("k,kio->io", fitness, eps[name])
                / (k_samples * cfg.sigma**2)
                for name in names
            }
            fit_mean = float(fitness.mean())
        else:
            bases, signs, rows = [], [], []
            for m in range(cfg.workers):
                km = rng.split(rng.split(kt, 1), m)
                base_m, sign_m = {}, {}
                for j, name in enumerate(names):
                    shape = network.layers[j].dist.shape
                    base_m[name] = cfg.sigma * rng.sample_gaussian(rng.split(km, 2 * j), shape)
                    sign_m[name] = perturb.sample_sign_pair(
                        rng.split(km, 2 * j + 1), cfg.flip_batch, *shape)
                bases.append(base_m)
                signs.append(sign_m)
            if threads > 1:
                from concurrent.futures import ThreadPoolExecutor

                with ThreadPoolExecutor(max_workers=threads) as ex:
                    rows = list(ex.map(
                        lambda ms: _es_worker_fitness_flipout(network, bx, by, ms[0], ms[1], cfg),
                        zip(bases, signs)))
            else:
                rows = [_es_worker_fitness_flipout(network, bx, by, b, s, cfg)
                        for b, s in zip(bases, signs)]
            fitness = np.stack(rows)
            direction = es_gradient_flipout(fitness, bases, signs, cfg)
            fit_mean = float(fitness.mean())
        params = {name: network.layers[j].dist.mean for j, name in enumerate(names)}
        if it == 0:
            opt = init_optimizer(cfg.optimizer, params, cfg.learning_rate)
        opt, new_params = opt_step(opt, params, {n: -direction[n] for n in names})
        for j, name in enumerate(names):
            network.layers[j].dist.mean = new_params[name]
        out, _ = nets.net_forward(network, bx, NONE, rng.key(0))
        err = float(np.mean(predict_labels(out) != by))
        records.append({
            "iter": it,
            "loss": -fit_mean,
            "error_rate": err,
            "samples_used": (it + 1) * cfg.samples_per_update,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
            "strategy": "independent" if independent else "flipout",
            "seed": key.root_seed,
        })
    if log_path:
        write_runlog(log_path, records)
    return records, network


def es_train_function(fitness_fn, w0, cfg: EsConfig, key):
    """Maximize a black-box fitness over a flat parameter array.

    Plain fitness-weighted sampling (no sign flips): one perturbation per
    sample, cfg.samples_per_update samples per iteration.
    """
    w = np.asarray(w0, dtype=np.float64).copy()
    for it in range(cfg.iters):
        eps = cfg.sigma * rng.sample_gaussian(rng.split(rng.split(key, 0), it),
                                              (cfg.samples_per_update,) + w.shape)
        fitness = np.asarray([fitness_fn(w + e) for e in eps], dtype=np.float64)
        direction = np.einsum("k,k...->...", fitness, eps) / (
            cfg.samples_per_update * cfg.sigma**2)
        w = w + cfg.learning_rate * direction
    return w


def write_runlog(path, records):
    """JSON-lines run log, one record per iteration."""
    with open(path, "wb") as fh:
        for r in records:
            fh.write((json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")
                     .encode("ascii"))
