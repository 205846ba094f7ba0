"""Post-training fine-tuning and pruning of inactivated neurons.

Three steps, applied after adaptive training:

1. ``collect_activation_stats`` records, per layer and neuron, how often
   the neuron fires (activation > 0.5) and its activation mean and
   variance, separately for correctly and incorrectly classified samples.
2. ``finetune_weights`` runs supervised backpropagation through the whole
   stack, giving currently misclassified samples a larger weight, and
   returns the best checkpoint by training accuracy.
3. ``prune_inactive_neurons`` removes neurons whose output is effectively
   constant (always off or saturated on), folding their mean output into
   the next layer's bias so the network function is kept.

The optimiser, the sample weighting and the pruning thresholds are
choices of this package, calibrated on the synthetic crack set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import LabeledPatchSet
from .dbn import DbnModel, OutputHead, StructureEvent, evaluate, predict, softmax
from .rbm import RbmParams
from .structure import StructureThresholds


@dataclass
class LayerActivationStats:
    frequency: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    frequency_correct: np.ndarray
    frequency_incorrect: np.ndarray


@dataclass
class ActivationStats:
    layers: list
    n_correct: int
    n_incorrect: int

    @property
    def n_samples(self) -> int:
        return self.n_correct + self.n_incorrect


def _layer_activations(model: DbnModel, x: np.ndarray) -> list:
    acts, h = [], x
    for layer in model.layers:
        h = expit(h @ layer.W + layer.c)
        acts.append(h)
    return acts


def _split_frequency(fired: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return np.zeros(fired.shape[1])
    return fired[mask].mean(axis=0)


def collect_activation_stats(model: DbnModel, data: LabeledPatchSet) -> ActivationStats:
    if len(data) == 0:
        raise ValueError("activation statistics need at least one sample")
    acts = _layer_activations(model, data.features)
    correct = predict(model, data.features) == data.labels
    layers = []
    for a in acts:
        fired = a > 0.5
        layers.append(LayerActivationStats(
            frequency=fired.mean(axis=0),
            mean=a.mean(axis=0),
            variance=a.var(axis=0),
            frequency_correct=_split_frequency(fired, correct),
            frequency_incorrect=_split_frequency(fired, ~correct),
        ))
    return ActivationStats(layers, int(correct.sum()), int((~correct).sum()))


# --------------------------------------------------------------------------
# fine-tuning

@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 50
    learning_rate: float = 4.0
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 50
    misclassified_weight: float = 2.0
    layer_decay: float = 0.1
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and patience >= 1 required")
        if self.learning_rate <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("learning_rate must be > 0 and betas in [0, 1)")
        if not 0 < self.layer_decay <= 1:
            raise ValueError("layer_decay must lie in (0, 1]")
        if self.misclassified_weight < 1:
            raise ValueError("misclassified_weight must be >= 1")


def _accuracy(layers, head_w, head_b, x, y) -> float:
    h = x
    for W, c in layers:
        h = expit(h @ W + c)
    return float(np.mean(np.argmax(h @ head_w + head_b, axis=1) == y))


class _Adam:
    """In-place Adam updates for a fixed list of arrays, each with its own step scale."""

    def __init__(self, params, scale, config: FinetuneConfig):
        self.params = params
        self.scale = list(scale)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.lr, self.b1, self.b2 = config.learning_rate, config.beta1, config.beta2
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        lr = self.lr * np.sqrt(1 - self.b2 ** self.t) / (1 - self.b1 ** self.t)
        for p, g, m, v, k in zip(self.params, grads, self.m, self.v, self.scale):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (k * lr) * m / (np.sqrt(v) + 1e-8)


def loss_gradients(layers, head_w, head_b, x, onehot, weights) -> list:
    """Gradients of ``sum_n weights[n] * cross_entropy_n`` by backpropagation.

    ``layers`` is a list of ``(W, c)`` pairs. Returns gradients ordered as
    ``[W0, c0, W1, c1, ..., head_w, head_b]``.
    """
    acts = [x]
    for W, c in layers:
        acts.append(expit(acts[-1] @ W + c))
    dz = (softmax(acts[-1] @ head_w + head_b) - onehot) * weights[:, None]
    grads = [dz.sum(axis=0), acts[-1].T @ dz]   # built in reverse
    dh = dz @ head_w.T
    for k in range(len(layers) - 1, -1, -1):
        da = dh * acts[k + 1] * (1.0 - acts[k + 1])
        grads += [da.sum(axis=0), acts[k].T @ da]
        if k:
            dh = da @ layers[k][0].T
    return grads[::-1]


def sample_weights(wrong: np.ndarray, misclassified_weight: float) -> np.ndarray:
    """Weight ``misclassified_weight`` for misclassified samples, 1 otherwise."""
    return np.where(wrong, misclassified_weight, 1.0)


def _step_scales(layers, x, decay: float) -> list:
    """Per-array step multipliers for ``[W0, c0, W1, c1, ..., head_w, head_b]``.

    Adam moves every weight by roughly the same amount, so a unit's
    pre-activation shifts in proportion to the summed mean input it
    receives. Dividing by that input mass keeps the shift comparable
    across layers of very different width. Layers below the top hidden
    layer are further damped by ``decay`` per level, so low-level features
    change least.
    """
    h, scales, depth = x, [], len(layers)
    for k, (W, c) in enumerate(layers):
        mass = max(1.0, float(h.mean(axis=0).sum()))
        scales += [decay ** (depth - 1 - k) / mass] * 2
        h = expit(h @ W + c)
    scales += [1.0 / max(1.0, float(h.mean(axis=0).sum()))] * 2
    return scales


def finetune_weights(model: DbnModel, data: LabeledPatchSet,
                     config: FinetuneConfig = FinetuneConfig(),
                     rng: Optional[np.random.Generator] = None) -> DbnModel:
    """Backpropagate cross-entropy through every layer and the head.

    Samples the current model misclassifies (re-evaluated every epoch)
    weigh ``misclassified_weight`` times as much as the rest. The model
    with the best training accuracy seen is returned; with no strict
    improvement that is the input model itself.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    x, y = data.features, data.labels
    onehot = np.eye(model.n_classes)[y]

    layers = [(l.W.copy(), l.c.copy()) for l in model.layers]
    head_w, head_b = model.head.weights.copy(), model.head.bias.copy()
    params = [p for pair in layers for p in pair] + [head_w, head_b]
    adam = _Adam(params, _step_scales(layers, x, config.layer_decay), config)

    best_acc = _accuracy(layers, head_w, head_b, x, y)
    best = None
    stale = 0

    for _ in range(config.epochs):
        if best_acc == 1.0:
            break
        h = x
        for W, c in layers:
            h = expit(h @ W + c)
        sample_w = sample_weights(np.argmax(h @ head_w + head_b, axis=1) != y,
                                  config.misclassified_weight)

        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            w = sample_w[idx]
            adam.step(loss_gradients(layers, head_w, head_b, x[idx], onehot[idx], w / w.sum()))

        acc = _accuracy(layers, head_w, head_b, x, y)
        if acc > best_acc:
            best_acc, stale = acc, 0
            best = ([(W.copy(), c.copy()) for W, c in layers], head_w.copy(), head_b.copy())
        else:
            stale += 1
            if stale >= config.patience:
                break

    if best is None:
        return model
    best_layers, best_w, best_b = best
    new_layers = [RbmParams(old.b, c, W) for old, (W, c) in zip(model.layers, best_layers)]
    return DbnModel(new_layers, OutputHead(best_w, best_b), list(model.structure_log),
                    model.preprocess_digest)


# --------------------------------------------------------------------------
# pruning

@dataclass
class PruneReport:
    sizes_before: list
    sizes_after: list
    removed: list                      # per layer, sorted original indices
    accuracy_before: Optional[float] = None
    accuracy_after: Optional[float] = None
    latency_before_ms: Optional[float] = None
    latency_after_ms: Optional[float] = None

    @property
    def removed_counts(self) -> list:
        return [len(r) for r in self.removed]

    def removed_fractions(self) -> list:
        return [len(r) / n for r, n in zip(self.removed, self.sizes_before)]

    def lines(self) -> list:
        out = [f"sizes_before={arrow(self.sizes_before)}",
               f"sizes_after={arrow(self.sizes_after)}",
               "removed_counts=" + ",".join(str(n) for n in self.removed_counts)]
        for k, idx in enumerate(self.removed):
            out.append(f"removed_layer{k}=" + ",".join(str(i) for i in idx))
        for key in ("accuracy_before", "accuracy_after", "latency_before_ms", "latency_after_ms"):
            value = getattr(self, key)
            if value is not None:
                out.append(f"{key}={value!r}")
        return out


def arrow(sizes) -> str:
    return " -> ".join(str(s) for s in sizes)


def select_inactive(layer_stats: LayerActivationStats, prune_threshold: float,
                    variance_threshold: float) -> list:
    """Always-off or saturated neurons with near-constant output.

    Keeps the single highest-variance neuron if every neuron qualifies.
    """
    freq, var = layer_stats.frequency, layer_stats.variance
    extreme = (freq < prune_threshold) | (freq > 1.0 - prune_threshold)
    chosen = np.flatnonzero(extreme & (var < variance_threshold))
    if len(chosen) == len(freq):
        chosen = chosen[chosen != int(np.argmax(var))]
    return sorted(chosen.tolist())


def prune_inactive_neurons(model: DbnModel, stats: ActivationStats, prune_threshold: float = 0.01,
                           variance_threshold: float = StructureThresholds().annihilation,
                           data: Optional[LabeledPatchSet] = None):
    """Remove inactivated hidden neurons, folding their mean output downstream.

    For a removed neuron with mean activation ``m`` and outgoing weight row
    ``w``, the next layer (or the head) gets ``bias += m * w`` before the
    row is deleted, which is exact when the neuron's output is constant.
    Returns ``(pruned_model, PruneReport)``.
    """
    if not 0.0 <= prune_threshold <= 1.0:
        raise ValueError("prune_threshold must lie in [0, 1]")
    if len(stats.layers) != len(model.layers):
        raise ValueError("activation statistics do not match the model's layers")
    removed = [select_inactive(s, prune_threshold, variance_threshold) for s in stats.layers]

    new_layers = []
    for k, layer in enumerate(model.layers):
        W, b, c = layer.W, layer.b, layer.c
        if k > 0 and removed[k - 1]:
            rows = removed[k - 1]
            c = c + stats.layers[k - 1].mean[rows] @ W[rows]
            W = np.delete(W, rows, axis=0)
            b = np.delete(b, rows)
        W = np.delete(W, removed[k], axis=1)
        c = np.delete(c, removed[k])
        new_layers.append(RbmParams(b, c, W))

    head_w, head_b = model.head.weights, model.head.bias
    if removed[-1]:
        rows = removed[-1]
        head_b = head_b + stats.layers[-1].mean[rows] @ head_w[rows]
        head_w = np.delete(head_w, rows, axis=0)

    events = list(model.structure_log)
    for k, rows in enumerate(removed):
        if rows:
            events.append(StructureEvent("prune", k, 0, new_layers[k].n_hidden, tuple(rows)))
    pruned = DbnModel(new_layers, OutputHead(head_w, head_b), events, model.preprocess_digest)

    report = PruneReport(model.hidden_sizes, pruned.hidden_sizes, removed)
    if data is not None:
        report.accuracy_before = evaluate(model, data).accuracy
        report.accuracy_after = evaluate(pruned, data).accuracy
    return pruned, report
