"""Neuron generation and annihilation on toy data.

An RBM with 2 hidden neurons cannot represent 8 disjoint patterns, so its
walking distance stays high and it grows. An RBM with 32 hidden neurons
trained on 2 patterns has many neurons that never vary, and those are
annihilated.
"""

import numpy as np

from adaptive_dbn.dbn import TrainConfig, train_adaptive_rbm
from adaptive_dbn.structure import StructureThresholds

patterns = np.kron(np.eye(8), np.ones(2))
config = TrainConfig(learning_rate=0.1, batch_size=10, max_epochs_per_layer=20,
                     monitor_every=5, smoothing_window=20, seed=0)


def run(x, n_hidden, thresholds):
    result = train_adaptive_rbm(x, n_hidden, config, thresholds, np.random.default_rng(0))
    added = sum(len(e.indices) for e in result.events if e.kind == "generate")
    removed = sum(len(e.indices) for e in result.events if e.kind == "annihilate")
    print(f"  {n_hidden} hidden -> {result.params.n_hidden} hidden "
          f"({added} generated, {removed} annihilated)")
    return result


print("undersized RBM, generation enabled:")
quiet = run(np.repeat(patterns, 25, axis=0), 2,
            StructureThresholds(generation=1e9, annihilation=1e-12, min_epochs_before_edit=2))
threshold = 0.9 * float(quiet.monitor.smoothed_neuron_wd().max())
run(np.repeat(patterns, 25, axis=0), 2,
    StructureThresholds(generation=threshold, annihilation=1e-12, min_epochs_before_edit=2))

print("oversized RBM, annihilation enabled:")
run(np.repeat(patterns[:2], 50, axis=0), 32,
    StructureThresholds(generation=1e9, min_epochs_before_edit=2))
