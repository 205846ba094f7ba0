"""Deep belief network: stacked RBMs with a softmax head and the adaptive
greedy training driver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from . import structure as st
from .data import LabeledPatchSet
from .rbm import CdConfig, ContractError, RbmParams, _cd_step, energy, hidden_conditional

log = logging.getLogger(__name__)

EVENT_KINDS = ("layer-add", "generate", "annihilate", "prune", "warning")


@dataclass(frozen=True)
class StructureEvent:
    """One structural edit. ``size`` is the layer's hidden size after the edit."""

    kind: str
    layer: int
    epoch: int
    size: int
    indices: tuple = ()
    input_dim: int = 0
    note: str = ""

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def to_line(self) -> str:
        parts = [self.kind, f"layer={self.layer}", f"epoch={self.epoch}", f"size={self.size}"]
        if self.indices:
            parts.append("indices=" + ",".join(str(i) for i in self.indices))
        if self.kind == "layer-add":
            parts.append(f"input={self.input_dim}")
        if self.note:
            parts.append("note=" + self.note.replace("\t", " ").replace("\n", " "))
        return "\t".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "StructureEvent":
        kind, *rest = line.rstrip("\n").split("\t")
        kw = dict(part.split("=", 1) for part in rest)
        return cls(kind=kind, layer=int(kw["layer"]), epoch=int(kw["epoch"]),
                   size=int(kw["size"]),
                   indices=tuple(int(i) for i in kw["indices"].split(",")) if "indices" in kw else (),
                   input_dim=int(kw.get("input", 0)), note=kw.get("note", ""))


def replay_structure(events) -> tuple:
    """Rebuild ``(input_dim, hidden_sizes)`` from a structure log."""
    input_dim, sizes = 0, []
    for ev in events:
        if ev.kind == "layer-add":
            if ev.layer != len(sizes):
                raise ValueError(f"layer-add for layer {ev.layer} out of order")
            if ev.layer == 0:
                input_dim = ev.input_dim
            sizes.append(ev.size)
        elif ev.kind == "generate":
            sizes[ev.layer] += 1
        elif ev.kind in ("annihilate", "prune"):
            sizes[ev.layer] -= len(ev.indices)
        if ev.kind != "warning" and sizes[ev.layer] != ev.size:
            raise ValueError(f"structure log inconsistent at {ev.to_line()!r}")
    return input_dim, sizes


@dataclass(frozen=True, eq=False)
class OutputHead:
    weights: np.ndarray  # (top hidden, M)
    bias: np.ndarray     # (M,)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, order="C")
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ContractError("head weights must be (hidden, M) with a length-M bias")
        if w.shape[1] < 2:
            raise ContractError("classification head needs at least two classes")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self) -> int:
        return self.bias.size


@dataclass(eq=False)
class DbnModel:
    layers: list
    head: OutputHead
    structure_log: list = field(default_factory=list)
    preprocess_digest: str = ""

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        """Verify the dimension chain from input through the head."""
        if not self.layers:
            raise ContractError("a DBN needs at least one layer")
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.n_visible != lower.n_hidden:
                raise ContractError(
                    f"layer input {upper.n_visible} does not match previous hidden {lower.n_hidden}")
        if self.head.weights.shape[0] != self.layers[-1].n_hidden:
            raise ContractError("head input does not match top hidden layer")

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_visible

    @property
    def hidden_sizes(self) -> list:
        return [layer.n_hidden for layer in self.layers]

    @property
    def n_classes(self) -> int:
        return self.head.n_classes

    def n_parameters(self) -> int:
        return sum(l.W.size + l.b.size + l.c.size for l in self.layers) + \
            self.head.weights.size + self.head.bias.size


def propagate_layer(layer: RbmParams, h_prev) -> np.ndarray:
    """Mean-field activation of the next layer."""
    return hidden_conditional(layer, h_prev)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def top_features(model: DbnModel, v) -> np.ndarray:
    h = np.asarray(v, dtype=np.float64)
    for layer in model.layers:
        h = propagate_layer(layer, h)
    return h


def forward(model: DbnModel, v) -> np.ndarray:
    """Class probabilities for one input vector or a batch of rows."""
    h = top_features(model, v)
    return softmax(h @ model.head.weights + model.head.bias)


def predict(model: DbnModel, v) -> np.ndarray:
    return np.argmax(forward(model, v), axis=-1)


def forward_fast(model: DbnModel, v: np.ndarray) -> np.ndarray:
    """Single-vector forward pass with no validation, for timing loops."""
    h = v
    for layer in model.layers:
        h = expit(h @ layer.W + layer.c)
    z = h @ model.head.weights + model.head.bias
    e = np.exp(z - z.max())
    return e / e.sum()


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    upper_learning_rate: float = 0.5   # layers above the first see low-variance inputs
    cd_steps: int = 1
    batch_size: int = 20
    initial_hidden: int = 16
    max_epochs_per_layer: int = 30
    monitor_every: int = 10        # batches between structural checks
    smoothing_window: int = 50     # batches
    noise_scale: float = 0.01
    wd_floor: float = 1e-3
    patience: int = 2              # epochs below wd_floor
    monitor_samples: int = 500
    head_epochs: int = 100
    head_learning_rate: float = 0.5
    head_batch_size: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.initial_hidden < 1 or self.max_epochs_per_layer < 1:
            raise ValueError("initial_hidden and max_epochs_per_layer must be >= 1")
        if self.monitor_every < 1 or self.monitor_samples < 1 or self.patience < 1:
            raise ValueError("monitor_every, monitor_samples and patience must be >= 1")
        if self.head_epochs < 0 or self.head_learning_rate <= 0 or self.head_batch_size < 1:
            raise ValueError("invalid head training settings")
        self.cd_config(0), self.cd_config(1)  # validates the CD fields

    def cd_config(self, layer_index: int = 0) -> CdConfig:
        lr = self.learning_rate if layer_index == 0 else self.upper_learning_rate
        return CdConfig(lr, self.cd_steps, self.batch_size, self.seed)


@dataclass
class LayerResult:
    params: RbmParams
    events: list
    walking_distance: float   # smoothed c + W WD at the end of training
    energy: float             # shifted recent energy, >= 0
    converged: bool
    epochs: int
    monitor: st.WdMonitor = None


def train_adaptive_rbm(x: np.ndarray, n_hidden: int, config: TrainConfig,
                       thresholds: st.StructureThresholds, rng: np.random.Generator,
                       layer_index: int = 0) -> LayerResult:
    """CD training of one RBM with neuron generation and annihilation.

    Every ``monitor_every`` batches the per-neuron WD is checked for a
    split and the activation variance over a fixed monitoring subset for
    removals. Training stops at the epoch budget or once the smoothed WD
    stays below ``wd_floor`` for ``patience`` epochs.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("no training data")
    cd = config.cd_config(layer_index)
    # WD is proportional to the step size, so the generation bound follows it
    if cd.learning_rate != config.learning_rate and config.learning_rate > 0:
        thresholds = replace(thresholds, generation=thresholds.generation
                             * cd.learning_rate / config.learning_rate)
    params = RbmParams.for_data(x, n_hidden, rng)
    monitor = st.WdMonitor(config.smoothing_window, layer_index)
    energies = st.EnergyTracker(config.smoothing_window)
    x_mon = x[:config.monitor_samples]
    events = [StructureEvent("layer-add", layer_index, 0, n_hidden, input_dim=x.shape[1])]

    calm_epochs = 0
    converged = False
    step = 0
    epoch = 0
    for epoch in range(config.max_epochs_per_layer):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cd.batch_size):
            batch = x[order[start:start + cd.batch_size]]
            new, delta, neg = _cd_step(params, batch, cd, rng)
            energies.record(float(energy(params, neg.v_neg, neg.h_neg).mean()))
            params = new
            monitor.record(*st.walking_distance(delta))
            monitor.record_neurons(st.per_neuron_walking_distance(delta))
            step += 1
            if step % config.monitor_every:
                continue

            parent = st.neuron_generation_check(monitor.smoothed_neuron_wd(), thresholds, epoch)
            if parent is not None:
                params = st.generate_neuron(params, parent, config.noise_scale, rng)
                events.append(StructureEvent("generate", layer_index, epoch, params.n_hidden,
                                             (parent + 1,)))
                monitor.reset_neurons()
            if epoch >= thresholds.min_epochs_before_edit:
                variance = hidden_conditional(params, x_mon).var(axis=0)
                doomed = st.neuron_annihilation_check(variance, thresholds)
                if doomed:
                    params = st.annihilate_neurons(params, doomed)
                    events.append(StructureEvent("annihilate", layer_index, epoch,
                                                 params.n_hidden, tuple(sorted(doomed))))
                    monitor.reset_neurons()

        calm_epochs = calm_epochs + 1 if monitor.moving_mean() < config.wd_floor else 0
        if calm_epochs >= config.patience:
            converged = True
            break

    return LayerResult(params, events, monitor.moving_mean(), energies.shifted(),
                       converged, epoch + 1, monitor)


def train_head(features: np.ndarray, labels: np.ndarray, n_classes: int, config: TrainConfig,
               rng: np.random.Generator, head: Optional[OutputHead] = None):
    """Softmax regression on fixed features by minibatch gradient descent.

    Descent runs on standardized features and the scaling is folded back
    into the returned weights, so the head still acts on raw activations.
    Returns ``(head, losses)`` where ``losses`` holds the full-data
    cross-entropy before training and after each epoch.
    """
    n, d = features.shape
    mu = features.mean(axis=0)
    sd = features.std(axis=0) + 1e-8
    z = (features - mu) / sd
    if head is None:
        W, b = np.zeros((d, n_classes)), np.zeros(n_classes)
    else:
        W, b = head.weights * sd[:, None], head.bias + mu @ head.weights
    onehot = np.eye(n_classes)[labels]

    def loss():
        p = softmax(z @ W + b)
        return float(-np.log(np.clip(p[np.arange(n), labels], 1e-300, None)).mean())

    losses = [loss()]
    for _ in range(config.head_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.head_batch_size):
            idx = order[start:start + config.head_batch_size]
            err = softmax(z[idx] @ W + b) - onehot[idx]
            W -= config.head_learning_rate * z[idx].T @ err / len(idx)
            b -= config.head_learning_rate * err.mean(axis=0)
        losses.append(loss())
    return OutputHead(W / sd[:, None], b - (mu / sd) @ W), losses


def train_adaptive_dbn(data: LabeledPatchSet, config: TrainConfig = TrainConfig(),
                       thresholds: st.StructureThresholds = st.StructureThresholds(),
                       rng: Optional[np.random.Generator] = None) -> DbnModel:
    """Greedy layer-wise adaptive training followed by head training.

    Each new layer is trained on the mean-field outputs of the frozen
    layers below it. After each layer the summed WD and shifted energy of
    all layers so far decide whether another layer is stacked.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(config.seed) if rng is None else rng

    layers, events, results = [], [], []
    x = data.features
    while True:
        result = train_adaptive_rbm(x, config.initial_hidden, config, thresholds, rng,
                                    layer_index=len(layers))
        layers.append(result.params)
        events.extend(result.events)
        results.append(result)
        log.info("layer %d: %d hidden after %d epochs (WD %.4g, E %.4g)", len(layers) - 1,
                 result.params.n_hidden, result.epochs, result.walking_distance, result.energy)
        x = propagate_layer(result.params, x)
        wd_sum = sum(r.walking_distance for r in results)
        energy_sum = sum(r.energy for r in results)
        if not st.layer_generation_check(wd_sum, energy_sum, thresholds, len(layers)):
            break

    if not any(r.converged for r in results):
        events.append(StructureEvent("warning", len(layers) - 1, results[-1].epochs - 1,
                                     layers[-1].n_hidden,
                                     note="epoch budget exhausted before any layer converged"))

    head, _ = train_head(x, data.labels, data.n_classes, config, rng)
    return DbnModel(layers, head, events, data.provenance)


# --------------------------------------------------------------------------
# evaluation

@dataclass
class Metrics:
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / max(self.total, 1))

    def class_totals(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    def class_incorrect(self) -> np.ndarray:
        return self.class_totals() - np.diag(self.confusion)

    def class_accuracy(self) -> np.ndarray:
        totals = self.class_totals()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(totals > 0, np.diag(self.confusion) / totals, np.nan)

    def table(self, class_names=None) -> str:
        """Per-class lines in the form ``name  96.5% (64/1834)``."""
        names = class_names or [str(k) for k in range(len(self.confusion))]
        lines = []
        for k, name in enumerate(names):
            lines.append(f"{name:<24}{format_ratio(self.class_incorrect()[k], self.class_totals()[k])}")
        lines.append(f"{'overall':<24}{format_ratio(self.total - np.trace(self.confusion), self.total)}")
        return "\n".join(lines)


def format_ratio(incorrect: int, total: int) -> str:
    acc = 100.0 * (total - incorrect) / total if total else float("nan")
    return f"{acc:.1f}% ({int(incorrect)}/{int(total)})"


def evaluate(model: DbnModel, data: LabeledPatchSet) -> Metrics:
    if len(data) and data.labels.max() >= model.n_classes:
        raise ValueError("data contains labels outside the model's classes")
    pred = predict(model, data.features) if len(data) else np.zeros(0, dtype=int)
    confusion = np.zeros((model.n_classes, model.n_classes), dtype=np.int64)
    np.add.at(confusion, (data.labels, pred), 1)
    return Metrics(confusion)


def with_head(model: DbnModel, head: OutputHead) -> DbnModel:
    return replace(model, head=head, structure_log=list(model.structure_log))
