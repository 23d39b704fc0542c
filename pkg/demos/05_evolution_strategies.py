#!/usr/bin/env python3
"""Evolution strategies with batched sign-flipped perturbations.

ES estimates a gradient purely from fitness values of randomly perturbed
parameters.  The flipped variant lets one worker evaluate a whole batch
of pseudo-independent perturbations with two matrix products per layer,
instead of one forward pass per perturbation; on a supervised task it
matches the fully independent baseline's sample efficiency.
"""

import numpy as np

from flipout import datasets, rng, trainers
from flipout import net as nets
from flipout.trainers import EsConfig

print("=== 1-D sanity: maximize F(w) = -(w - 3)^2 ===")
cfg = EsConfig(sigma=0.1, learning_rate=0.05, workers=64, flip_batch=1, iters=500)
w = trainers.es_train_function(lambda v: -float((v[0] - 3.0) ** 2),
                               np.array([0.0]), cfg, rng.key(42))
print(f"after {cfg.iters} iterations of {cfg.samples_per_update} samples: "
      f"w = {w[0]:.4f} (target 3)")

print("\n=== supervised task: flipped vs fully independent perturbations ===")
data = datasets.make_synthetic("blobs", 4000, 8, 7, classes=2, noise=1.2,
                               separation=2.2)
for independent in (False, True):
    name = "idealES" if independent else "flipES "
    k = rng.key(1)
    network = nets.build_mlp(rng.split(k, 1), (8, 16, 2), sigma=0.0,
                             hidden_activation="tanh")
    cfg = EsConfig(sigma=0.1, learning_rate=0.1, workers=40, flip_batch=40,
                   iters=100, fitness_batch=128)
    records, trained = trainers.es_train(network, data, cfg, rng.split(k, 2),
                                         independent=independent)
    nll, err = trainers.evaluate_deterministic(trained, data)
    used = records[-1]["samples_used"]
    print(f"{name}: {cfg.iters} updates x {cfg.samples_per_update} samples "
          f"({used} total) -> train error {err:.4f}")
print("\nboth see 1600 perturbations per update; flipES materializes only 40")
