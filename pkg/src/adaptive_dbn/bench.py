"""Inference latency benchmarking.

Latency is measured per image with a monotonic clock, after a number of
discarded warm-up passes, with BLAS limited to one thread. By default a
timed pass covers preprocessing plus the forward pass, since a deployed
detector consumes raw camera frames; ``forward_only`` isolates the network.
"""

from __future__ import annotations

import os
import platform
import time
import warnings
from dataclasses import dataclass, field
from itertools import cycle, islice
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (SDNET_SIDE, ImagePatch, PreprocessConfig, SynthConfig, load_dataset,
                   preprocess, render_crack_pair)
from .dbn import DbnModel, OutputHead, forward_fast
from .rbm import RbmParams

# Published layer sizes of a crack detector before and after pruning; the
# first entry is read as a hidden layer fed by the 1024 preprocessed inputs.
BEFORE_PRUNE_SIZES = (629, 402, 350, 301, 152, 105)
AFTER_PRUNE_SIZES = (629, 402, 349, 259, 101, 89)


# --------------------------------------------------------------------------
# frame sources

@dataclass
class FrameStream:
    """A replayable sequence of camera-sized frames.

    ``source`` is ``"synthetic"`` (a pool of generated frames) or
    ``"directory"`` (images found under ``path``). Frames are produced
    ahead of timing and cycled, so frame creation never enters a
    measurement. ``rate`` is the nominal capture rate; the benchmark runs
    as fast as it can and does not pace itself to it.
    """

    source: str = "synthetic"
    path: Optional[str] = None
    frame_size: int = SDNET_SIDE
    rate: float = 30.0
    pool_size: int = 16
    seed: int = 0
    _frames: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.source not in ("synthetic", "directory"):
            raise ValueError(f"unknown frame source {self.source!r}")
        if self.source == "directory" and not self.path:
            raise ValueError("a directory stream needs a path")
        if self.rate <= 0 or self.pool_size < 1 or self.frame_size < 16:
            raise ValueError("rate must be > 0, pool_size >= 1 and frame_size >= 16")

    def frames(self) -> list:
        if self._frames is None:
            self._frames = self._load()
        return self._frames

    def _load(self) -> list:
        if self.source == "directory":
            result = load_dataset(self.path)
            if not result.patches:
                raise ValueError(f"no readable frames under {self.path}")
            return result.patches
        rng = np.random.default_rng(self.seed)
        config = SynthConfig(side=self.frame_size)
        frames = []
        for k in range(self.pool_size):
            background, cracked = render_crack_pair(config, rng)
            pixels = cracked if k % 2 else background
            frames.append(ImagePatch(pixels, k % 2, "synthetic", f"frame-{k}"))
        return frames

    def __iter__(self) -> Iterator[ImagePatch]:
        return cycle(self.frames())

    def describe(self) -> str:
        where = self.path if self.source == "directory" else f"seed={self.seed}"
        return f"{self.source}:{where}:{self.frame_size}px@{self.rate:g}fps"


# --------------------------------------------------------------------------
# reports

def machine_descriptor() -> str:
    return (f"{platform.system()} {platform.machine()} | {platform.processor() or 'cpu'} | "
            f"{os.cpu_count()} logical cpus | python {platform.python_version()} | "
            f"numpy {np.__version__}")


@dataclass
class BenchReport:
    model_id: str
    samples_ms: np.ndarray
    warmup: int
    machine: str = ""
    mode: str = "end-to-end"
    stream: str = ""

    def __post_init__(self):
        self.samples_ms = np.asarray(self.samples_ms, dtype=np.float64)
        if self.samples_ms.ndim != 1 or self.samples_ms.size < 1:
            raise ValueError("a report needs at least one latency sample")

    @property
    def iterations(self) -> int:
        return int(self.samples_ms.size)

    @property
    def mean_ms(self) -> float:
        return float(self.samples_ms.mean())

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms

    def summary_lines(self) -> list:
        return [f"model_id={self.model_id}", f"mode={self.mode}", f"stream={self.stream}",
                f"machine={self.machine}", f"warmup={self.warmup}",
                f"iterations={self.iterations}", f"mean_ms={self.mean_ms!r}",
                f"median_ms={float(np.median(self.samples_ms))!r}", f"fps={self.fps!r}"]


def write_report(report: BenchReport, path) -> tuple:
    """Write ``<path>`` (key=value lines) and ``<path>.csv`` (raw samples)."""
    path = Path(path)
    csv_path = path.with_name(path.name + ".csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("iteration,latency_ms\n")
        for k, value in enumerate(report.samples_ms):
            fh.write(f"{k},{float(value)!r}\n")
    lines = report.summary_lines() + [f"samples_csv={csv_path.name}"]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path, csv_path


def read_report(path) -> BenchReport:
    path = Path(path)
    kv = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key] = value
    rows = (path.parent / kv["samples_csv"]).read_text(encoding="utf-8").splitlines()[1:]
    samples = [float(row.split(",")[1]) for row in rows if row]
    if len(samples) != int(kv["iterations"]):
        raise ValueError("sample count does not match the recorded iteration count")
    return BenchReport(kv["model_id"], np.array(samples), int(kv["warmup"]),
                       kv.get("machine", ""), kv.get("mode", "end-to-end"), kv.get("stream", ""))


# --------------------------------------------------------------------------
# measurement

def benchmark_inference(model: DbnModel, stream: FrameStream, warmup: int = 50,
                        iterations: int = 1000, forward_only: bool = False,
                        config: PreprocessConfig = PreprocessConfig(),
                        model_id: str = "model") -> BenchReport:
    """Time ``iterations`` single-image inferences after ``warmup`` discarded ones."""
    if iterations < 1 or warmup < 0:
        raise ValueError("iterations must be >= 1 and warmup >= 0")
    frames = list(islice(iter(stream), warmup + iterations))
    if forward_only:
        inputs = [preprocess(f, config) for f in frames]

        def run(k):
            forward_fast(model, inputs[k])
    else:
        def run(k):
            forward_fast(model, preprocess(frames[k], config))

    samples = np.empty(iterations)
    clock = time.perf_counter
    with threadpool_limits(limits=1):
        for k in range(warmup):
            run(k)
        for k in range(iterations):
            start = clock()
            run(warmup + k)
            samples[k] = (clock() - start) * 1000.0
    return BenchReport(model_id, samples, warmup, machine_descriptor(),
                       "forward-only" if forward_only else "end-to-end", stream.describe())


def paired_benchmark(model_a: DbnModel, model_b: DbnModel, stream: FrameStream,
                     warmup: int = 50, iterations: int = 1000, rounds: int = 5,
                     forward_only: bool = False,
                     config: PreprocessConfig = PreprocessConfig(), ids=("a", "b")) -> tuple:
    """Benchmark two models in alternating rounds and pool each one's samples.

    Interleaving spreads slow drifts of the machine (frequency scaling,
    background load) evenly over both models. Each round runs
    ``iterations // rounds`` timed passes (at least one) after its own warm-up.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    per_round = max(1, iterations // rounds)
    pooled = ([], [])
    for _ in range(rounds):
        for k, model in enumerate((model_a, model_b)):
            r = benchmark_inference(model, stream, warmup, per_round, forward_only, config)
            pooled[k].append(r.samples_ms)
    mode = "forward-only" if forward_only else "end-to-end"
    return tuple(BenchReport(name, np.concatenate(samples), warmup, machine_descriptor(), mode,
                             stream.describe()) for name, samples in zip(ids, pooled))


@dataclass(frozen=True)
class Comparison:
    latency_delta_pct: float   # positive: b is faster than a
    fps_delta: float
    fps_delta_pct: float

    def lines(self) -> list:
        return [f"latency_speedup_pct={self.latency_delta_pct:+.1f}",
                f"fps_delta={self.fps_delta:+.2f}", f"fps_delta_pct={self.fps_delta_pct:+.1f}"]


def compare_means(mean_a: float, mean_b: float) -> Comparison:
    fps_a, fps_b = 1000.0 / mean_a, 1000.0 / mean_b
    return Comparison(100.0 * (mean_a - mean_b) / mean_a, fps_b - fps_a,
                      100.0 * (fps_b - fps_a) / fps_a)


def compare_models(report_a: BenchReport, report_b: BenchReport) -> Comparison:
    if report_a.machine != report_b.machine:
        warnings.warn("comparing reports from different machines", RuntimeWarning, stacklevel=2)
    if report_a.mode != report_b.mode:
        warnings.warn(f"comparing a {report_a.mode} report with a {report_b.mode} one",
                      RuntimeWarning, stacklevel=2)
    return compare_means(report_a.mean_ms, report_b.mean_ms)


def random_model(hidden_sizes, input_dim: int = 1024, n_classes: int = 2,
                 seed: int = 0) -> DbnModel:
    """A DBN of the given shape with small random weights, for timing only."""
    rng = np.random.default_rng(seed)
    layers, prev = [], input_dim
    for size in hidden_sizes:
        layers.append(RbmParams.random(prev, size, rng, std=0.05))
        prev = size
    head = OutputHead(rng.normal(0.0, 0.05, (prev, n_classes)), np.zeros(n_classes))
    return DbnModel(layers, head)
