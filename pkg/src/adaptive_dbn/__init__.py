"""Adaptive structural learning of deep belief networks for crack detection.

Layers grow and shrink their hidden units while contrastive divergence
runs, and new layers are stacked while the accumulated walking distance
and energy stay high. Modules:

- ``rbm``: Bernoulli RBM maths, exact enumeration oracles and CD updates.
- ``structure``: walking distance and the generation/annihilation rules.
- ``dbn``: stacked model, softmax head and the adaptive training driver.
- ``finetune``: activation statistics, supervised fine-tuning, pruning.
- ``data``: dataset loading, preprocessing and the synthetic crack set.
- ``serialize`` and ``bench``: model files and latency benchmarking.
- ``cli``: the ``adaptive-dbn`` command line.
"""

__version__ = "0.1.0"
