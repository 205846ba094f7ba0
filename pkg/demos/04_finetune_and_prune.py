"""Fine-tuning followed by pruning of inactive neurons.

Trains a DBN on the synthetic crack set, fine-tunes it with extra weight on
misclassified samples, then removes neurons whose output is effectively
constant and folds their mean output into the next layer's bias.
"""

import numpy as np

from adaptive_dbn.data import generate_synthetic_crack_set, to_patch_set
from adaptive_dbn.dbn import evaluate, train_adaptive_dbn
from adaptive_dbn.finetune import collect_activation_stats, finetune_weights, prune_inactive_neurons

train = to_patch_set(generate_synthetic_crack_set(1000, seed=1)).shuffled(np.random.default_rng(0))
test = to_patch_set(generate_synthetic_crack_set(200, seed=2))

model = train_adaptive_dbn(train)
tuned = finetune_weights(model, train)
pruned, report = prune_inactive_neurons(tuned, collect_activation_stats(tuned, train), data=train)

for name, m in (("trained", model), ("fine-tuned", tuned), ("pruned", pruned)):
    print(f"{name:>10}: test accuracy {evaluate(m, test).accuracy:.4f}")
print("\n".join(report.lines()[:3]))
