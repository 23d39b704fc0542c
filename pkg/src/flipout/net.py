"""Minimal layer stack with manual backpropagation.

Dense layers and an LSTM cell, each owning a :class:`WeightDist` for its
perturbable weight matrix.  The forward pass applies the requested
perturbation strategy from :mod:`flipout.perturb`, then the activation;
the backward pass produces exact gradients of the loss at the sampled
perturbation (strategy ``none`` gives the plain deterministic gradients).

Biases are never perturbed, only weight matrices.  LSTM input-to-hidden
weights are deterministic; the hidden-to-hidden matrix is the perturbable
one.  The LSTM gate blocks are ordered (i, f, o, g) -- input, forget,
output, candidate -- and this order is fixed: stored parameter files and
reference outputs depend on it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import perturb, rng
from .perturb import (
    ADDITIVE,
    FLIPOUT,
    INDEPENDENT,
    LRT,
    MULTIPLICATIVE,
    NONE,
    SHARED,
    STRATEGIES,
    WeightDist,
)

ACTIVATIONS = ("identity", "relu", "tanh", "softmax_logits")
LOSSES = ("softmax_cross_entropy", "mean_squared_error")

# purpose tags for per-layer key derivation
_K_BASE = 0
_K_SIGNS = 1
_K_INDEP = 3
_K_LRT = 4


@dataclass
class DenseLayer:
    dist: WeightDist
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not np.all(np.isfinite(self.bias)):
            raise ValueError("bias must be finite")


@dataclass
class LstmCell:
    """LSTM cell; only the hidden-to-hidden matrix is perturbable.

    w_x    : [d_in, 4*d_h] deterministic input weights.
    dist_h : WeightDist over [d_h, 4*d_h].
    bias   : [4*d_h], gate blocks ordered (i, f, o, g).
    """

    w_x: np.ndarray
    dist_h: WeightDist
    bias: np.ndarray

    def __post_init__(self):
        self.w_x = np.asarray(self.w_x, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d_h = self.dist_h.shape[0]
        if self.dist_h.shape[1] != 4 * d_h:
            raise ValueError("hidden-to-hidden weights must be [d_h, 4*d_h]")
        if self.w_x.shape[1] != 4 * d_h or self.bias.shape != (4 * d_h,):
            raise ValueError("input weights/bias do not conform to 4*d_h gates")

    @property
    def d_h(self):
        return self.dist_h.shape[0]


@dataclass
class Network:
    layers: list
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class LayerGrads:
    """Per-layer gradients mirroring parameter shapes."""

    d_mean: np.ndarray
    d_scale: np.ndarray
    d_bias: np.ndarray
    d_wx: np.ndarray = None


# ---------------------------------------------------------------------------
# activations and losses


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(name, pre):
    if name in ("identity", "softmax_logits"):
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _activate_grad(name, pre, post, dpost):
    if name in ("identity", "softmax_logits"):
        return dpost
    if name == "relu":
        return dpost * (pre > 0.0)
    return dpost * (1.0 - post**2)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(loss_name, out, targets):
    """Mean loss over the batch and its gradient w.r.t. the network output."""
    n = out.shape[0]
    if loss_name == "softmax_cross_entropy":
        targets = np.asarray(targets)
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(n), targets].mean()
        dout = np.exp(logp)
        dout[np.arange(n), targets] -= 1.0
        return loss, dout / n
    t = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    diff = out - t
    return 0.5 * np.sum(diff**2) / n, diff / n


def predict_labels(out):
    return np.argmax(out, axis=1)


# ---------------------------------------------------------------------------
# dense layer forward/backward


def _dense_forward(layer, x, strategy, lkey, base_key, signs_in):
    c = {"kind": "dense", "strategy": strategy, "x": x, "layer": layer}
    dist = layer.dist
    if strategy == NONE:
        pre = x @ dist.mean
    elif strategy == SHARED:
        base = perturb.sample_base(dist, rng.split(base_key, _K_BASE))
        pre = perturb.forward_shared(x, dist, base)
        c["base"] = base
    elif strategy == FLIPOUT:
        base = perturb.sample_base(dist, rng.split(base_key, _K_BASE))
        signs = signs_in
        if signs is None:
            signs = perturb.sample_sign_pair(rng.split(lkey, _K_SIGNS), x.shape[0], *dist.shape)
        pre = perturb.forward_flipout(x, dist, base, signs)
        c["base"], c["signs"] = base, signs
    elif strategy == INDEPENDENT:
        kn = rng.split(lkey, _K_INDEP)
        keys = [rng.split(kn, i) for i in range(x.shape[0])]
        pre, deltas, noises = perturb.forward_independent(x, dist, keys)
        c["deltas"], c["noises"] = deltas, noises
    elif strategy == LRT:
        pre, eps, var_act = perturb.forward_lrt(x, dist, rng.split(lkey, _K_LRT))
        c["eps"], c["var_act"] = eps, var_act
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    pre = pre + layer.bias
    post = _activate(layer.activation, pre)
    c["pre"], c["post"] = pre, post
    return post, c


def _dense_backward(c, dpost, save_dpre=False):
    layer, x = c["layer"], c["x"]
    dist, strategy = layer.dist, c["strategy"]
    dpre = _activate_grad(layer.activation, c["pre"], c["post"], dpost)
    if save_dpre:
        c["dpre"] = dpre
    d_bias = dpre.sum(axis=0)
    if strategy == NONE:
        d_mean = x.T @ dpre
        d_scale = np.zeros_like(dist.scale)
        dx = dpre @ dist.mean.T
    elif strategy == SHARED:
        gm, gd, dx = perturb.backward_shared(dpre, x, dist, c["base"])
        em, d_scale = perturb.chain_base_grad(dist, c["base"].noise, gd)
        d_mean = gm + em
    elif strategy == FLIPOUT:
        gm, gd, dx = perturb.backward_flipout(dpre, x, dist, c["base"], c["signs"])
        em, d_scale = perturb.chain_base_grad(dist, c["base"].noise, gd)
        d_mean = gm + em
    elif strategy == INDEPENDENT:
        d_mean, d_scale, dx = perturb.backward_independent(dpre, x, dist, c["deltas"], c["noises"])
    else:
        d_mean, d_scale, dx = perturb.backward_lrt(dpre, x, dist, c["eps"], c["var_act"])
    return LayerGrads(d_mean=d_mean, d_scale=d_scale, d_bias=d_bias), dx


# ---------------------------------------------------------------------------
# LSTM cell


def _hidden_route_forward(dist, h_prev, strategy, base, signs):
    if strategy == NONE:
        return h_prev @ dist.mean
    if strategy == SHARED:
        return perturb.forward_shared(h_prev, dist, base)
    if strategy == FLIPOUT:
        return perturb.forward_flipout(h_prev, dist, base, signs)
    if strategy == INDEPENDENT:
        deltas, _ = base
        return h_prev @ dist.mean + np.einsum("ni,nio->no", h_prev, deltas)
    raise ValueError(f"strategy {strategy!r} is not valid for an LSTM cell")


def lstm_step(cell, x_t, h_prev, c_prev, strategy, base=None, signs=None):
    """One LSTM step with the perturbed hidden-to-hidden matrix.

    `base` and `signs` are sampled once per sequence batch and reused at
    every timestep, so each sequence sees one consistent weight sample:
    mean + delta * outer(s_n, r_n) held constant across time.  For the
    independent strategy, pass `base` as the (deltas, noises) stack.
    """
    d_h = cell.d_h
    pre = x_t @ cell.w_x + _hidden_route_forward(cell.dist_h, h_prev, strategy, base, signs)
    pre = pre + cell.bias
    i = _sigmoid(pre[:, 0:d_h])
    f = _sigmoid(pre[:, d_h : 2 * d_h])
    o = _sigmoid(pre[:, 2 * d_h : 3 * d_h])
    g = np.tanh(pre[:, 3 * d_h :])
    c_t = f * c_prev + i * g
    tanh_c = np.tanh(c_t)
    h_t = o * tanh_c
    cache = {
        "x": x_t,
        "h_prev": h_prev,
        "c_prev": c_prev,
        "i": i,
        "f": f,
        "o": o,
        "g": g,
        "tanh_c": tanh_c,
    }
    return h_t, c_t, cache


def _lstm_forward(cell, x_seq, strategy, lkey, base_key):
    if x_seq.ndim != 3:
        raise ValueError("LSTM input must be [batch, time, features]")
    n, t_len, _ = x_seq.shape
    d_h = cell.d_h
    base = signs = None
    if strategy in (SHARED, FLIPOUT):
        base = perturb.sample_base(cell.dist_h, rng.split(base_key, _K_BASE))
    if strategy == FLIPOUT:
        signs = perturb.sample_sign_pair(rng.split(lkey, _K_SIGNS), n, d_h, 4 * d_h)
    if strategy == INDEPENDENT:
        kn = rng.split(lkey, _K_INDEP)
        base = perturb.sample_independent(cell.dist_h, [rng.split(kn, i) for i in range(n)])
    if strategy == LRT:
        raise ValueError("lrt is only valid for dense layers")
    h = np.zeros((n, d_h))
    c_state = np.zeros((n, d_h))
    steps = []
    h_seq = np.empty((n, t_len, d_h))
    for t in range(t_len):
        h, c_state, sc = lstm_step(cell, x_seq[:, t, :], h, c_state, strategy, base, signs)
        steps.append(sc)
        h_seq[:, t, :] = h
    return h_seq, {
        "kind": "lstm",
        "strategy": strategy,
        "layer": cell,
        "steps": steps,
        "base": base,
        "signs": signs,
        "x_shape": x_seq.shape,
    }


def _lstm_backward(c, dh_seq):
    cell, strategy = c["layer"], c["strategy"]
    dist, steps = cell.dist_h, c["steps"]
    base, signs = c["base"], c["signs"]
    n, t_len, _ = c["x_shape"]
    d_mean = np.zeros_like(dist.mean)
    d_scale = np.zeros_like(dist.scale)
    grad_delta = np.zeros_like(dist.mean)
    d_wx = np.zeros_like(cell.w_x)
    d_bias = np.zeros_like(cell.bias)
    dx_seq = np.empty(c["x_shape"])
    dh_carry = np.zeros((n, cell.d_h))
    dc_carry = np.zeros((n, cell.d_h))
    for t in reversed(range(t_len)):
        sc = steps[t]
        i, f, o, g, tanh_c = sc["i"], sc["f"], sc["o"], sc["g"], sc["tanh_c"]
        dh = dh_seq[:, t, :] + dh_carry
        dc = dc_carry + dh * o * (1.0 - tanh_c**2)
        do = dh * tanh_c
        di = dc * g
        df = dc * sc["c_prev"]
        dg = dc * i
        dpre = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g**2)], axis=1
        )
        d_wx += sc["x"].T @ dpre
        d_bias += dpre.sum(axis=0)
        dx_seq[:, t, :] = dpre @ cell.w_x.T
        h_prev = sc["h_prev"]
        if strategy == NONE:
            d_mean += h_prev.T @ dpre
            dh_carry = dpre @ dist.mean.T
        elif strategy == SHARED:
            gm, gd, dh_carry = perturb.backward_shared(dpre, h_prev, dist, base)
            d_mean += gm
            grad_delta += gd
        elif strategy == FLIPOUT:
            gm, gd, dh_carry = perturb.backward_flipout(dpre, h_prev, dist, base, signs)
            d_mean += gm
            grad_delta += gd
        else:
            deltas, noises = base
            gm, gs, dh_carry = perturb.backward_independent(dpre, h_prev, dist, deltas, noises)
            d_mean += gm
            d_scale += gs
        dc_carry = dc * f
    if strategy in (SHARED, FLIPOUT):
        em, d_scale = perturb.chain_base_grad(dist, base.noise, grad_delta)
        d_mean = d_mean + em
    return LayerGrads(d_mean=d_mean, d_scale=d_scale, d_bias=d_bias, d_wx=d_wx), dx_seq


# ---------------------------------------------------------------------------
# network forward/backward


def net_forward(net, x, strategy, key, base_key=None, signs=None):
    """Run the network under a perturbation strategy.

    `key` drives all randomness; `base_key`, when given, decouples the
    base-perturbation draws from the sign/per-example draws so callers
    can hold the base fixed while resampling signs.  `signs` optionally
    injects an explicit SignPair per layer (list entries may be None).

    Returns (output, cache); the cache is consumed by net_backward.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 1:
        raise ValueError("need at least one example")
    if base_key is None:
        base_key = key
    h = x
    caches = []
    for l, layer in enumerate(net.layers):
        lkey = rng.split(key, l)
        lbase = rng.split(base_key, l)
        layer_signs = signs[l] if signs is not None else None
        if isinstance(layer, LstmCell):
            h, c = _lstm_forward(layer, h, strategy, lkey, lbase)
        else:
            took_last = h.ndim == 3
            if took_last:
                h_full_shape = h.shape
                h = h[:, -1, :]
            h, c = _dense_forward(layer, h, strategy, lkey, lbase, layer_signs)
            c["took_last"] = took_last
            if took_last:
                c["seq_shape"] = h_full_shape
        caches.append(c)
    if h.ndim == 3:
        h = h[:, -1, :]
        caches.append({"kind": "seq_tail"})
    return h, {"layers": caches, "out": h, "strategy": strategy}


def net_backward(net, cache, targets, save_dpre=False):
    """Loss and exact parameter gradients at the sampled perturbation.

    With `save_dpre`, each dense layer cache keeps the gradient of the
    mean batch loss w.r.t. its pre-activations (used by the variance lab
    to form per-example gradients).
    """
    loss, dout = loss_and_grad(net.loss, cache["out"], targets)
    grads = [None] * len(net.layers)
    d = dout
    caches = cache["layers"]
    if caches and caches[-1].get("kind") == "seq_tail":
        caches = caches[:-1]
    for l in reversed(range(len(net.layers))):
        c = caches[l]
        if c["kind"] == "dense":
            g, d = _dense_backward(c, d, save_dpre=save_dpre)
            if c.get("took_last"):
                full = np.zeros(c["seq_shape"])
                full[:, -1, :] = d
                d = full
        else:
            if d.ndim == 2:
                full = np.zeros((d.shape[0], len(c["steps"]), c["layer"].d_h))
                full[:, -1, :] = d
                d = full
            g, d = _lstm_backward(c, d)
        grads[l] = g
    return loss, grads


# ---------------------------------------------------------------------------
# construction and parameter access


def glorot_uniform(k, d_in, d_out):
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.sample_uniform(k, (d_in, d_out)) * 2 * limit - limit


def build_mlp(
    k,
    dims,
    mode=ADDITIVE,
    sigma=0.0,
    hidden_activation="tanh",
    loss="softmax_cross_entropy",
):
    """Dense stack with constant per-entry scale `sigma` on every layer."""
    layers = []
    for l in range(len(dims) - 1):
        d_in, d_out = dims[l], dims[l + 1]
        mean = glorot_uniform(rng.split(k, l), d_in, d_out)
        scale = np.full((d_in, d_out), float(sigma))
        act = hidden_activation if l < len(dims) - 2 else (
            "softmax_logits" if loss == "softmax_cross_entropy" else "identity"
        )
        layers.append(DenseLayer(WeightDist(mean, scale, mode), np.zeros(d_out), act))
    return Network(layers, loss)


def build_lstm_classifier(k, d_in, d_h, n_classes, mode=MULTIPLICATIVE, sigma=0.0,
                          loss="softmax_cross_entropy"):
    """LSTM cell followed by a dense readout of the final hidden state.

    Forget-gate bias starts at +1; the readout weights are deterministic
    (scale 0) so the hidden-to-hidden matrix is the only perturbed one.
    """
    w_x = glorot_uniform(rng.split(k, 0), d_in, 4 * d_h)
    w_h = glorot_uniform(rng.split(k, 1), d_h, 4 * d_h)
    bias = np.zeros(4 * d_h)
    bias[d_h : 2 * d_h] = 1.0
    cell = LstmCell(w_x, WeightDist(w_h, np.full((d_h, 4 * d_h), float(sigma)), mode), bias)
    head_mean = glorot_uniform(rng.split(k, 2), d_h, n_classes)
    head = DenseLayer(WeightDist(head_mean, np.zeros((d_h, n_classes)), mode), np.zeros(n_classes),
                      "softmax_logits")
    return Network([cell, head], loss)


def get_params(net):
    """Flat name -> array view of every trainable parameter."""
    out = {}
    for l, layer in enumerate(net.layers):
        if isinstance(layer, LstmCell):
            out[f"layer{l}/wx"] = layer.w_x
            out[f"layer{l}/mean"] = layer.dist_h.mean
            out[f"layer{l}/scale"] = layer.dist_h.scale
            out[f"layer{l}/bias"] = layer.bias
        else:
            out[f"layer{l}/mean"] = layer.dist.mean
            out[f"layer{l}/scale"] = layer.dist.scale
            out[f"layer{l}/bias"] = layer.bias
    return out


def set_params(net, params):
    """Return a new network with parameters replaced from the flat dict."""
    new = copy.deepcopy(net)
    for l, layer in enumerate(new.layers):
        dist = layer.dist_h if isinstance(layer, LstmCell) else layer.dist
        dist.mean = np.array(params[f"layer{l}/mean"], dtype=np.float64)
        dist.scale = np.array(params[f"layer{l}/scale"], dtype=np.float64)
        layer.bias = np.array(params[f"layer{l}/bias"], dtype=np.float64)
        if isinstance(layer, LstmCell):
            layer.w_x = np.array(params[f"layer{l}/wx"], dtype=np.float64)
    return new


def perturbable_layers(net):
    """Indices of layers whose weight matrix gets perturbed."""
    return list(range(len(net.layers)))
