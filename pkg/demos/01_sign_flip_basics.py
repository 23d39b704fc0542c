#!/usr/bin/env python3
"""What a rank-one sign flip does to a shared weight perturbation.

Walks through the core identity of the library on a tiny layer: every
example in a batch can get its own pseudo-independent weight sample from
ONE shared draw, by flipping it with per-example sign vectors, and the
vectorized forward pass needs just two matrix products.
"""

import numpy as np

from flipout import net as nets
from flipout import perturb, rng

k = rng.key(0)

print("=== one shared perturbation, decorrelated per example ===")
dist = perturb.WeightDist(
    mean=rng.sample_gaussian(rng.split(k, 0), (3, 2)),
    scale=np.full((3, 2), 0.5),
    mode=perturb.ADDITIVE,
)
base = perturb.sample_base(dist, rng.split(k, 1))
print("base delta (drawn once for the whole batch):\n", np.round(base.delta, 3))

x = rng.sample_gaussian(rng.split(k, 2), (4, 3))
signs = perturb.sample_sign_pair(rng.split(k, 3), 4, 3, 2)
print("\nper-example sign vectors r_n (outputs) and s_n (inputs):")
for n in range(4):
    print(f"  example {n}: r={signs.r[n]}, s={signs.s[n]}")

out = perturb.forward_flipout(x, dist, base, signs)
print("\nvectorized forward X*mean + ((X*S) delta)*R:\n", np.round(out, 4))

print("\nper-example check: row n equals x_n @ (mean + delta * outer(s_n, r_n))")
for n in range(4):
    w_n = dist.mean + base.delta * np.outer(signs.s[n], signs.r[n])
    print(f"  example {n}: max diff {np.abs(out[n] - x[n] @ w_n).max():.2e}")

print("\n=== the flip preserves the perturbation distribution ===")
reps = 200_000
flipped = np.empty(reps)
plain = np.empty(reps)
for i in range(reps // 1000):
    kb = rng.split(rng.split(k, 4), i)
    deltas = 0.5 * rng.sample_gaussian(rng.split(kb, 0), (1000,))
    ss = rng.sample_signs(rng.split(kb, 1), (1000,))
    rr = rng.sample_signs(rng.split(kb, 2), (1000,))
    flipped[i * 1000:(i + 1) * 1000] = deltas * ss * rr
    plain[i * 1000:(i + 1) * 1000] = 0.5 * rng.sample_gaussian(rng.split(kb, 3), (1000,))
print(f"flipped entry: mean {flipped.mean():+.4f}, std {flipped.std():.4f}")
print(f"plain entry:   mean {plain.mean():+.4f}, std {plain.std():.4f}")

print("\n=== cost: exactly two matrix products per layer ===")
network = nets.build_mlp(rng.split(k, 5), (32, 64, 10), mode=perturb.MULTIPLICATIVE,
                         sigma=1.0)
xb = rng.sample_gaussian(rng.split(k, 6), (128, 32))
for strategy in ("shared", "flipout"):
    with perturb.count_matmuls() as c:
        nets.net_forward(network, xb, strategy, rng.split(k, 7))
    print(f"{strategy:8s}: {c.count} matmuls for {len(network.layers)} layers")
