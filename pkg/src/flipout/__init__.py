"""Flipout: rank-one sign decorrelation of weight perturbations.

Weight-perturbation methods (variational nets, evolution strategies,
DropConnect-style regularizers) usually share one perturbation across a
mini-batch, which caps the variance reduction from batching.  This
package decorrelates the perturbations per example by flipping a shared
base sample with rank-one sign matrices, at the cost of one extra matrix
multiplication per layer, and ships the diagnostics to verify what that
buys: a gradient-variance estimator, an (alpha, beta, gamma) variance
decomposition, finite-difference gradient audits, and two end-to-end
trainers (variational Bayes-by-Backprop and evolution strategies).
"""

from . import checkpoint, datasets, gradcheck, net, perturb, rng, trainers, variance_lab
from .net import DenseLayer, LstmCell, Network, build_lstm_classifier, build_mlp
from .perturb import (
    ADDITIVE,
    DROPCONNECT,
    FLIPOUT,
    INDEPENDENT,
    LRT,
    MODES,
    MULTIPLICATIVE,
    NONE,
    SHARED,
    STRATEGIES,
    BasePerturbation,
    SignPair,
    WeightDist,
)
from .rng import RngKey, key, split

__version__ = "0.1.0"
