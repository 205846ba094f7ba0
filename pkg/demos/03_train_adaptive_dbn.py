"""Adaptive DBN training on the synthetic crack set.

Generates a small balanced set of 64x64 crack and crack-free patches,
trains an adaptive DBN with the shipped defaults and prints a per-category
accuracy table. Pass a number to change the patches per class (default 1000).
"""

import sys

import numpy as np

from adaptive_dbn.data import generate_synthetic_crack_set, to_patch_set
from adaptive_dbn.dbn import evaluate, train_adaptive_dbn

per_class = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
train = to_patch_set(generate_synthetic_crack_set(per_class, seed=1)).shuffled(
    np.random.default_rng(0))
test = to_patch_set(generate_synthetic_crack_set(max(1, per_class // 5), seed=2))

model = train_adaptive_dbn(train)
print("hidden layers:", " -> ".join(map(str, model.hidden_sizes)))
kinds = [e.kind for e in model.structure_log]
print("structure events:", {k: kinds.count(k) for k in sorted(set(kinds))})
print("test set:")
print(evaluate(model, test).table(["w/o cracks", "with cracks"]))
