"""Walking-distance monitoring and the structural decision rules.

Walking distance (WD) measures how far the hidden-side parameters
(``c`` and ``W``) move per update; ``b`` is deliberately left out. A
hidden neuron whose own parameters keep moving after warm-up spawns a
sibling, a neuron whose activation barely varies over the monitoring
batch is removed, and a new layer is stacked while the accumulated WD
and energy of all layers stay above their thresholds.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rbm import ContractError, ParamDelta, RbmParams


@dataclass(frozen=True)
class StructureThresholds:
    generation: float = 0.015      # per-neuron smoothed WD
    annihilation: float = 1e-5     # activation variance
    layer_wd: float = 0.05         # bound on sum of per-layer WD
    layer_energy: float = 0.5      # bound on sum of per-layer shifted energy
    min_epochs_before_edit: int = 3
    max_hidden: int = 256
    max_layers: int = 3

    def __post_init__(self):
        if not (self.generation > 0 and self.annihilation > 0):
            raise ValueError("generation and annihilation thresholds must be > 0")
        # zero is allowed here: with strict inequalities it means "always stack"
        if self.layer_wd < 0 or self.layer_energy < 0:
            raise ValueError("layer-generation thresholds must be >= 0")
        if self.min_epochs_before_edit < 1 or self.max_hidden < 1 or self.max_layers < 1:
            raise ValueError("epoch and size bounds must be >= 1")


def walking_distance(delta: ParamDelta) -> tuple:
    """(||dc||_2, ||dW||_F). The visible bias change is ignored."""
    dc = np.asarray(delta.dc)
    dW = np.asarray(delta.dW)
    if dW.ndim != 2 or dW.shape[1] != dc.size:
        raise ContractError("delta shapes are inconsistent")
    return float(np.linalg.norm(dc)), float(np.linalg.norm(dW))


def per_neuron_walking_distance(delta: ParamDelta) -> np.ndarray:
    """Norm of each hidden neuron's (dc_j, dW[:, j]) concatenation."""
    return np.sqrt(np.asarray(delta.dc) ** 2 + (np.asarray(delta.dW) ** 2).sum(axis=0))


def _moving(series, window: int):
    recent = np.asarray(series[-window:], dtype=np.float64)
    if recent.size == 0:
        return 0.0, 0.0
    return float(recent.mean()), float(recent.std())


@dataclass
class WdMonitor:
    """Raw WD series for ``c`` and ``W`` of one layer plus moving statistics.

    Statistics use the last ``smoothing_window`` values, or every value
    recorded so far when fewer are available.
    """

    smoothing_window: int = 10
    layer_index: int = 0
    wd_c: list = field(default_factory=list)
    wd_W: list = field(default_factory=list)
    _neurons: deque = field(default=None, repr=False)

    def __post_init__(self):
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")
        self._neurons = deque(maxlen=self.smoothing_window)

    def record(self, wd_c: float, wd_W: float) -> "WdMonitor":
        if not (wd_c >= 0 and wd_W >= 0 and np.isfinite(wd_c) and np.isfinite(wd_W)):
            raise ValueError("walking distances must be finite and non-negative")
        self.wd_c.append(float(wd_c))
        self.wd_W.append(float(wd_W))
        return self

    def moving_mean(self, group: str = "total") -> float:
        return _moving(self._series(group), self.smoothing_window)[0]

    def moving_std(self, group: str = "total") -> float:
        return _moving(self._series(group), self.smoothing_window)[1]

    def _series(self, group: str):
        if group == "c":
            return self.wd_c
        if group == "W":
            return self.wd_W
        if group == "total":
            return [a + b for a, b in zip(self.wd_c[-self.smoothing_window:],
                                          self.wd_W[-self.smoothing_window:])]
        raise KeyError(group)

    def record_neurons(self, per_neuron: np.ndarray) -> None:
        self._neurons.append(np.asarray(per_neuron, dtype=np.float64))

    def smoothed_neuron_wd(self) -> Optional[np.ndarray]:
        """Mean per-neuron WD over the window, or None if nothing recorded."""
        if not self._neurons:
            return None
        return np.mean(self._neurons, axis=0)

    def reset_neurons(self) -> None:
        """Forget per-neuron history; needed whenever the hidden layer changes size."""
        self._neurons.clear()


def record_and_smooth(monitor: WdMonitor, wd_c: float, wd_W: float) -> WdMonitor:
    return monitor.record(wd_c, wd_W)


@dataclass
class EnergyTracker:
    """Batch-mean energies of one layer's training run."""

    window: int = 10
    energies: list = field(default_factory=list)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def record(self, value: float) -> None:
        if not np.isfinite(value):
            raise ValueError("energy must be finite")
        self.energies.append(float(value))

    def recent_mean(self) -> float:
        return _moving(self.energies, self.window)[0]

    def shifted(self) -> float:
        """Recent mean minus the lowest batch energy seen; always >= 0."""
        if not self.energies:
            return 0.0
        return max(self.recent_mean() - min(self.energies), 0.0)


def neuron_generation_check(per_neuron_wd, thresholds: StructureThresholds,
                            epoch: int) -> Optional[int]:
    """Index of the neuron to split, or None.

    The candidate is the neuron with the largest smoothed WD (lowest index
    on ties). It is split only after warm-up, when its WD exceeds the
    generation threshold, and while the layer is below ``max_hidden``.
    """
    if per_neuron_wd is None:
        return None
    wd = np.asarray(per_neuron_wd, dtype=np.float64)
    if wd.size == 0 or epoch < thresholds.min_epochs_before_edit:
        return None
    if wd.size >= thresholds.max_hidden:
        return None
    parent = int(np.argmax(wd))  # argmax returns the first maximum
    return parent if wd[parent] > thresholds.generation else None


def generate_neuron(params: RbmParams, parent: int, noise_scale: float,
                    rng: np.random.Generator) -> RbmParams:
    """Insert a copy of hidden neuron ``parent`` right after it.

    The copy keeps the parent's bias; its weights get i.i.d. Gaussian
    noise with std ``noise_scale``.
    """
    if not 0 <= parent < params.n_hidden:
        raise IndexError(f"parent index {parent} out of range for {params.n_hidden} neurons")
    column = params.W[:, parent] + rng.normal(0.0, noise_scale, size=params.n_visible)
    return RbmParams(params.b,
                     np.insert(params.c, parent + 1, params.c[parent]),
                     np.insert(params.W, parent + 1, column, axis=1))


def neuron_annihilation_check(activation_variance, thresholds: StructureThresholds) -> set:
    """Neurons whose activation variance is below the annihilation threshold.

    At least one neuron always survives: if every neuron qualifies, the
    one with the largest variance (lowest index on ties) is kept.
    """
    var = np.asarray(activation_variance, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("variances must be non-negative")
    doomed = set(np.flatnonzero(var < thresholds.annihilation).tolist())
    if len(doomed) == var.size and var.size:
        doomed.discard(int(np.argmax(var)))
    return doomed


def annihilate_neurons(params: RbmParams, indices) -> RbmParams:
    """Remove hidden neurons, preserving the order of the rest."""
    indices = sorted(set(int(i) for i in indices))
    if not indices:
        return params
    if indices[0] < 0 or indices[-1] >= params.n_hidden:
        raise IndexError("neuron index out of range")
    if len(indices) >= params.n_hidden:
        raise ValueError("cannot remove every hidden neuron")
    return RbmParams(params.b, np.delete(params.c, indices), np.delete(params.W, indices, axis=1))


def layer_generation_check(wd_sum: float, energy_sum: float,
                           thresholds: StructureThresholds, n_layers: int) -> bool:
    """Stack another layer iff both sums strictly exceed their bounds and room remains."""
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    return (wd_sum > thresholds.layer_wd and energy_sum > thresholds.layer_energy
            and n_layers < thresholds.max_layers)
