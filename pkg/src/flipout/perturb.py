"""Perturbation distributions over weight matrices and sampling strategies.

A layer's stochastic weights are W = mean + delta, where delta is drawn
from one of three symmetric, per-entry-independent families:

* ``additive_gaussian``        delta = scale * eps,            eps ~ N(0,1)
* ``multiplicative_gaussian``  delta = mean * scale * eps,     eps ~ N(0,1)
* ``dropconnect_half``         delta = mean * E,               E uniform signs
  (mean holds the halved raw weights, so mean + delta is 0 or twice the
  raw weight per entry, i.e. a 50% drop rate)

Four ways to apply the perturbation across a mini-batch:

* shared       one delta for every example
* flipout      one base delta, decorrelated per example by rank-one sign
               flips: row n sees delta * outer(s_n, r_n)
* independent  a fresh delta per example (the variance gold standard)
* lrt          sample the pre-activations instead of the weights
               (dense Gaussian layers only)

All forwards return pre-activations; activation functions live in
:mod:`flipout.net`.  Matrix products in these forwards go through
:func:`_mm` so tests can count them structurally (flipout costs exactly
two products per layer, shared costs one).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import rng

ADDITIVE = "additive_gaussian"
MULTIPLICATIVE = "multiplicative_gaussian"
DROPCONNECT = "dropconnect_half"
MODES = (ADDITIVE, MULTIPLICATIVE, DROPCONNECT)

NONE = "none"
SHARED = "shared"
FLIPOUT = "flipout"
INDEPENDENT = "independent"
LRT = "lrt"
STRATEGIES = (NONE, SHARED, FLIPOUT, INDEPENDENT, LRT)


# ---------------------------------------------------------------------------
# matmul accounting (test instrumentation)

_counters = threading.local()


class MatmulCounter:
    def __init__(self):
        self.count = 0
        self.shapes = []

    def record(self, shape_a, shape_b):
        self.count += 1
        self.shapes.append((tuple(shape_a), tuple(shape_b)))


@contextmanager
def count_matmuls():
    """Context manager counting matrix products executed by forwards."""
    stack = getattr(_counters, "stack", None)
    if stack is None:
        stack = _counters.stack = []
    c = MatmulCounter()
    stack.append(c)
    try:
        yield c
    finally:
        stack.pop()


def _mm(a, b):
    stack = getattr(_counters, "stack", None)
    if stack:
        for c in stack:
            c.record(a.shape, b.shape)
    return a @ b


# ---------------------------------------------------------------------------
# domain types


@dataclass
class WeightDist:
    """Perturbation distribution over one weight matrix.

    mean  : [d_in, d_out] center of the distribution.
    scale : [d_in, d_out] nonnegative per-entry scale (sigma); unused and
            forced to zeros for dropconnect_half, where mean stores the
            halved raw weights.
    mode  : one of MODES.
    """

    mean: np.ndarray
    scale: np.ndarray = None
    mode: str = ADDITIVE

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scale is None or self.mode == DROPCONNECT:
            self.scale = np.zeros_like(self.mean)
        else:
            self.scale = np.asarray(self.scale, dtype=np.float64)
            if self.scale.shape != self.mean.shape:
                raise ValueError("scale shape must match mean shape")
            if np.any(self.scale < 0):
                raise ValueError("scale entries must be nonnegative")

    @property
    def shape(self):
        return self.mean.shape


@dataclass
class BasePerturbation:
    """One delta sample, shared by a mini-batch before sign flipping.

    delta : the sampled perturbation.
    noise : the primitive randomness behind delta (eps for the Gaussian
            modes, the sign matrix for dropconnect); kept so gradients
            can be chained back to mean/scale.
    """

    delta: np.ndarray
    noise: np.ndarray


@dataclass
class SignPair:
    """Per-example sign vectors realizing the rank-one flips.

    r : [N, d_out] output-side signs, row n is r_n.
    s : [N, d_in]  input-side signs, row n is s_n.
    """

    r: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        if self.r.shape[0] != self.s.shape[0]:
            raise ValueError("r and s must have one row per example")


def sample_sign_pair(k: rng.RngKey, n: int, d_in: int, d_out: int) -> SignPair:
    """Draw a fresh SignPair for a batch of n examples."""
    return SignPair(
        r=rng.sample_signs(rng.split(k, 0), (n, d_out)),
        s=rng.sample_signs(rng.split(k, 1), (n, d_in)),
    )


def enumerate_sign_pairs(d_in: int, d_out: int) -> SignPair:
    """All 2**(d_in+d_out) sign-vector combinations, one per row.

    Used as an exact oracle for expectations over (r, s) on small layers.
    """
    n_r, n_s = 1 << d_out, 1 << d_in
    r = np.empty((n_r, d_out))
    for i in range(n_r):
        r[i] = [1.0 if (i >> j) & 1 else -1.0 for j in range(d_out)]
    s = np.empty((n_s, d_in))
    for i in range(n_s):
        s[i] = [1.0 if (i >> j) & 1 else -1.0 for j in range(d_in)]
    big_r = np.repeat(r, n_s, axis=0)
    big_s = np.tile(s, (n_r, 1))
    return SignPair(r=big_r, s=big_s)


# ---------------------------------------------------------------------------
# sampling


def sample_base(dist: WeightDist, k: rng.RngKey) -> BasePerturbation:
    """Draw one base perturbation from the distribution.

    In every mode the entries are independent and symmetric about 0,
    which is what licenses the sign-flip decorrelation.
    """
    if dist.mode == ADDITIVE:
        eps = rng.sample_gaussian(k, dist.shape)
        return BasePerturbation(delta=dist.scale * eps, noise=eps)
    if dist.mode == MULTIPLICATIVE:
        eps = rng.sample_gaussian(k, dist.shape)
        return BasePerturbation(delta=dist.mean * dist.scale * eps, noise=eps)
    e = rng.sample_signs(k, dist.shape)
    return BasePerturbation(delta=dist.mean * e, noise=e)


def chain_base_grad(dist: WeightDist, noise: np.ndarray, grad_delta: np.ndarray):
    """Chain a gradient w.r.t. delta into (extra grad_mean, grad_scale).

    delta is itself a function of (mean, scale) in the multiplicative and
    dropconnect modes, so the full parameter gradient needs this term.
    """
    if dist.mode == ADDITIVE:
        return np.zeros_like(grad_delta), grad_delta * noise
    if dist.mode == MULTIPLICATIVE:
        return grad_delta * dist.scale * noise, grad_delta * dist.mean * noise
    return grad_delta * noise, np.zeros_like(grad_delta)


# ---------------------------------------------------------------------------
# forward rules (pre-activations only)


def _check_x(x, dist):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dist.shape[0]:
        raise ValueError(f"input shape {x.shape} does not match weights {dist.shape}")
    return x


def forward_shared(x, dist: WeightDist, base: BasePerturbation):
    """Every example sees the same perturbed weights: X (mean + delta)."""
    x = _check_x(x, dist)
    if base.delta.shape != dist.shape:
        raise ValueError("base perturbation shape mismatch")
    return _mm(x, dist.mean + base.delta)


def forward_flipout(x, dist: WeightDist, base: BasePerturbation, signs: SignPair):
    """Rank-one sign decorrelation of a shared base perturbation.

    Row n of the result equals x_n @ (mean + delta * outer(s_n, r_n)),
    vectorized as X mean + ((X * S) delta) * R -- two matrix products.
    """
    x = _check_x(x, dist)
    n = x.shape[0]
    if signs.r.shape != (n, dist.shape[1]) or signs.s.shape != (n, dist.shape[0]):
        raise ValueError("sign matrices do not conform to batch/weight shapes")
    return _mm(x, dist.mean) + _mm(x * signs.s, base.delta) * signs.r


def sample_independent(dist: WeightDist, keys) -> tuple:
    """Stack one fresh base perturbation per example: ([N,i,o], [N,i,o])."""
    deltas = np.empty((len(keys),) + dist.shape)
    noises = np.empty_like(deltas)
    for i, k in enumerate(keys):
        b = sample_base(dist, k)
        deltas[i] = b.delta
        noises[i] = b.noise
    return deltas, noises


def forward_independent(x, dist: WeightDist, keys):
    """A fresh weight sample per example: y_n = x_n @ (mean + delta_n)."""
    x = _check_x(x, dist)
    if len(keys) != x.shape[0]:
        raise ValueError("need exactly one key per example")
    deltas, noises = sample_independent(dist, keys)
    out = x @ dist.mean + np.einsum("ni,nio->no", x, deltas)
    return out, deltas, noises


def lrt_effective_var(dist: WeightDist) -> np.ndarray:
    """Per-weight variance entering the pre-activation Gaussian."""
    if dist.mode == ADDITIVE:
        return dist.scale**2
    if dist.mode == MULTIPLICATIVE:
        return dist.scale**2 * dist.mean**2
    raise ValueError("lrt requires a Gaussian perturbation mode")


def forward_lrt(x, dist: WeightDist, k: rng.RngKey):
    """Sample pre-activations instead of weights (dense Gaussian layers).

    Row m, unit j is N(sum_i x_mi mean_ij, sum_i x_mi^2 var_ij) with
    independent noise across examples and units.  Returns
    (out, eps, act_var) so the backward pass can reuse the draw.
    """
    x = _check_x(x, dist)
    var = lrt_effective_var(dist)
    mu_act = _mm(x, dist.mean)
    var_act = _mm(x**2, var)
    eps = rng.sample_gaussian(k, mu_act.shape)
    return mu_act + np.sqrt(var_act) * eps, eps, var_act


# ---------------------------------------------------------------------------
# backward rules


def backward_shared(grad_out, x, dist: WeightDist, base: BasePerturbation):
    """Gradients of the shared forward: (grad_mean, grad_delta, grad_x)."""
    grad_mean = _mm(x.T, grad_out)
    return grad_mean, grad_mean.copy(), _mm(grad_out, (dist.mean + base.delta).T)


def backward_flipout(grad_out, x, dist: WeightDist, base: BasePerturbation, signs: SignPair):
    """Gradients of the flipout forward.

    grad_mean  = X^T grad_out
    grad_delta = (X * S)^T (grad_out * R)
    grad_x     = grad_out mean^T + ((grad_out * R) delta^T) * S

    grad_delta still has to be chained into mean/scale gradients by
    :func:`chain_base_grad` according to the distribution mode.
    """
    n = x.shape[0]
    if grad_out.shape != (n, dist.shape[1]):
        raise ValueError("grad_out shape does not match forward output")
    gr = grad_out * signs.r
    grad_mean = _mm(x.T, grad_out)
    grad_delta = _mm((x * signs.s).T, gr)
    grad_x = _mm(grad_out, dist.mean.T) + _mm(gr, base.delta.T) * signs.s
    return grad_mean, grad_delta, grad_x


def backward_independent(grad_out, x, dist: WeightDist, deltas, noises):
    """Gradients of the per-example forward.

    Returns (grad_mean, grad_scale, grad_x) with the mode chain already
    applied, since the per-example noises are consumed here.
    """
    grad_mean = _mm(x.T, grad_out)
    grad_delta_stack = np.einsum("ni,no->nio", x, grad_out)
    if dist.mode == ADDITIVE:
        grad_scale = np.einsum("nio,nio->io", grad_delta_stack, noises)
    elif dist.mode == MULTIPLICATIVE:
        gn = np.einsum("nio,nio->io", grad_delta_stack, noises)
        grad_scale = gn * dist.mean
        grad_mean = grad_mean + gn * dist.scale
    else:
        grad_mean = grad_mean + np.einsum("nio,nio->io", grad_delta_stack, noises)
        grad_scale = np.zeros_like(dist.scale)
    grad_x = grad_out @ dist.mean.T + np.einsum("no,nio->ni", grad_out, deltas)
    return grad_mean, grad_scale, grad_x


def backward_lrt(grad_out, x, dist: WeightDist, eps, var_act):
    """Gradients of the pre-activation sampling forward.

    The noise path is grad_out * eps / (2 sqrt(var_act)) per activation;
    rows with zero activation variance contribute nothing.
    """
    grad_mean = _mm(x.T, grad_out)
    with np.errstate(divide="ignore", invalid="ignore"):
        dvar_act = np.where(var_act > 0.0, grad_out * eps / (2.0 * np.sqrt(var_act)), 0.0)
    dvar = _mm((x**2).T, dvar_act)
    if dist.mode == ADDITIVE:
        grad_scale = dvar * 2.0 * dist.scale
    else:
        grad_scale = dvar * 2.0 * dist.scale * dist.mean**2
        grad_mean = grad_mean + dvar * 2.0 * dist.scale**2 * dist.mean
    var = lrt_effective_var(dist)
    grad_x = _mm(grad_out, dist.mean.T) + _mm(dvar_act, var.T) * 2.0 * x
    return grad_mean, grad_scale, grad_x
