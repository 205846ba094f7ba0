"""Acceptance suite: each test checks one criterion and prints one result line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they finish;
a normal ``pytest`` run repeats them in the terminal summary.
"""

import itertools
import subprocess
import sys

import numpy as np

import oracles
from acceptance_log import run_criterion
from capacity import baseline_wd, count, oversized_run, undersized_run
from adaptive_dbn.bench import (AFTER_PRUNE_SIZES, BEFORE_PRUNE_SIZES, FrameStream,
                                compare_means, paired_benchmark, random_model)
from adaptive_dbn.data import LabeledPatchSet, generate_synthetic_crack_set, to_patch_set
from adaptive_dbn.dbn import DbnModel, OutputHead, evaluate, forward, train_adaptive_dbn
from adaptive_dbn.finetune import (collect_activation_stats, finetune_weights,
                                   prune_inactive_neurons)
from adaptive_dbn.rbm import (CdConfig, RbmParams, all_binary, cd_update, exact_loglik_gradient,
                              hidden_conditional, joint_probability, log_likelihood,
                              visible_conditional)
from adaptive_dbn.serialize import model_from_bytes, model_to_bytes
from adaptive_dbn.structure import (StructureThresholds, annihilate_neurons, generate_neuron,
                                    layer_generation_check)


def test_criterion_1_oracle_equivalence():
    def check():
        worst_joint = worst_cond = worst_grad = 0.0
        shapes = [(i, j) for i in range(1, 6) for j in range(1, 6) if i + j <= 6]
        for (n_v, n_h), draw in itertools.product(shapes, range(20)):
            rng = np.random.default_rng(1000 * n_v + 100 * n_h + draw)
            p = RbmParams(rng.normal(size=n_v), rng.normal(size=n_h), rng.normal(size=(n_v, n_h)))
            vs, hs = all_binary(n_v), all_binary(n_h)
            total = sum(joint_probability(p, v, h) for v in vs for h in hs)
            worst_joint = max(worst_joint, abs(total - 1.0))
            for v in vs:
                ref = oracles.hidden_conditional_from_joint(p.b, p.c, p.W, v)
                worst_cond = max(worst_cond, np.abs(hidden_conditional(p, v) - ref).max())
            for h in hs:
                ref = oracles.visible_conditional_from_joint(p.b, p.c, p.W, h)
                worst_cond = max(worst_cond, np.abs(visible_conditional(p, h) - ref).max())
            data = rng.integers(0, 2, (5, n_v)).astype(float)
            grad = exact_loglik_gradient(p, data)
            fd = oracles.finite_difference_gradient(p.b, p.c, p.W, data)
            for ours, ref in zip((grad.db, grad.dc, grad.dW), fd):
                ref = np.asarray(ref)
                rel = np.abs(ours - ref) / np.maximum(np.abs(ref), 1e-2)
                worst_grad = max(worst_grad, rel.max())
        assert worst_joint <= 1e-9, f"joint sums off by {worst_joint:.2e}"
        assert worst_cond <= 1e-9, f"conditionals off by {worst_cond:.2e}"
        assert worst_grad <= 1e-6, f"gradient relative error {worst_grad:.2e}"
        return (f"{len(shapes) * 20} RBMs; |sum-1| {worst_joint:.1e}, conditional error "
                f"{worst_cond:.1e}, gradient relative error {worst_grad:.1e}")
    run_criterion(1, "oracle equivalence", 10, check)


FOUR_PATTERNS = np.array([[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0], [1, 1, 1, 0]], dtype=float)


def test_criterion_2_cd_learning_sanity():
    def check():
        rng = np.random.default_rng(0)
        p = RbmParams.random(4, 3, rng)
        start = log_likelihood(p, FOUR_PATTERNS)
        config = CdConfig(learning_rate=0.1, cd_steps=1)
        for _ in range(2000):
            p, _ = cd_update(p, FOUR_PATTERNS, config, rng)
        end = log_likelihood(p, FOUR_PATTERNS)
        assert end > start, f"log-likelihood {start:.4f} -> {end:.4f}"
        return f"exact log-likelihood {start:.4f} -> {end:.4f} after 2000 CD-1 steps"
    run_criterion(2, "CD learning sanity", 30, check)


def test_criterion_3_structure_adaptation():
    def check():
        grown = undersized_run(0.9 * baseline_wd())
        shrunk = oversized_run(StructureThresholds().annihilation)
        n_gen, n_ann = count(grown.events, "generate"), count(shrunk.events, "annihilate")
        assert n_gen >= 1, "undersized RBM generated no neuron"
        assert n_ann >= 1, "oversized RBM annihilated no neuron"
        rng = np.random.default_rng(0)
        p = RbmParams(rng.normal(size=6), rng.normal(size=4), rng.normal(size=(6, 4)))
        for parent in range(4):
            child = generate_neuron(p, parent, 0.05, np.random.default_rng(parent))
            assert annihilate_neurons(child, {parent + 1}).equals(p), "round trip not bitwise"
        return (f"undersized 2 -> {grown.params.n_hidden} ({n_gen} generated), oversized "
                f"32 -> {shrunk.params.n_hidden} ({n_ann} annihilated), round trip bitwise")
    run_criterion(3, "structure adaptation triggers", 60, check)


def test_criterion_4_layer_generation_logic():
    def check():
        grid = np.linspace(0.1, 1.0, 10)
        cases = 0
        for wd_t, e_t in itertools.product(grid, grid):
            t = StructureThresholds(layer_wd=wd_t, layer_energy=e_t, max_layers=4)
            assert not layer_generation_check(wd_t, e_t, t, 1), "equality accepted"
            assert not layer_generation_check(wd_t + 1, e_t, t, 1), "WD-only accepted"
            assert not layer_generation_check(wd_t, e_t + 1, t, 1), "energy-only accepted"
            assert not layer_generation_check(wd_t + 1, e_t + 1, t, 4), "layer bound ignored"
            assert layer_generation_check(wd_t + 1, e_t + 1, t, 3), "both conditions rejected"
            cases += 5
        return f"{cases} boundary cases over a 10x10 threshold grid"
    run_criterion(4, "layer generation logic", 1, check)


def test_criterion_5_desk_scale_end_to_end():
    def check():
        train = to_patch_set(generate_synthetic_crack_set(1000, seed=1)).shuffled(
            np.random.default_rng(0))
        test = to_patch_set(generate_synthetic_crack_set(200, seed=2))
        model = train_adaptive_dbn(train)
        tuned = finetune_weights(model, train)
        pruned, report = prune_inactive_neurons(tuned, collect_activation_stats(tuned, train))
        before, after = evaluate(model, test).accuracy, evaluate(pruned, test).accuracy
        fractions = report.removed_fractions()
        detail = (f"test accuracy {before:.4f} -> {after:.4f}, layers "
                  f"{model.hidden_sizes} -> {pruned.hidden_sizes}, removed fractions "
                  + ", ".join(f"{f:.3f}" for f in fractions))
        assert before >= 0.95, "pre-fine-tune accuracy below 0.95: " + detail
        assert after >= before, "fine-tuning lowered test accuracy: " + detail
        assert sum(report.removed_counts) >= 1, "nothing pruned: " + detail
        assert all(a <= b for a, b in zip(fractions, fractions[1:])), \
            "an earlier layer shrank more than a later one: " + detail
        return detail
    run_criterion(5, "desk-scale end-to-end", 15 * 60, check)


def unit_scale_model(sizes, seed):
    rng = np.random.default_rng(seed)
    layers = [RbmParams(np.zeros(a), rng.normal(size=b), rng.normal(0, a ** -0.5, (a, b)))
              for a, b in zip(sizes, sizes[1:])]
    return DbnModel(layers, OutputHead(rng.normal(size=(sizes[-1], 2)), rng.normal(size=2)))


def with_constant_neurons(model, picks):
    layers = list(model.layers)
    for k, j, on in picks:
        W, c = layers[k].W.copy(), layers[k].c.copy()
        W[:, j], c[j] = 0.0, (800.0 if on else -800.0)
        layers[k] = RbmParams(layers[k].b, c, W)
    return DbnModel(layers, model.head, model.structure_log)


def test_criterion_6_function_preserving_pruning():
    def check():
        model = with_constant_neurons(unit_scale_model([64, 40, 30, 20], seed=3),
                                      [(0, 2, True), (0, 17, False), (1, 5, False),
                                       (1, 29, True), (2, 0, True), (2, 11, False)])
        x = np.random.default_rng(4).random((100, 64))
        data = LabeledPatchSet(x, np.arange(100) % 2)
        # a tiny variance bound restricts removal to exactly constant neurons
        pruned, report = prune_inactive_neurons(model, collect_activation_stats(model, data),
                                                variance_threshold=1e-15)
        diff = float(np.abs(forward(pruned, x) - forward(model, x)).max())
        assert report.removed_counts == [2, 2, 2], f"removed {report.removed_counts}"
        assert diff < 1e-9, f"max output change {diff:.2e}"
        return f"removed {report.removed_counts}, max output change {diff:.1e} on 100 inputs"
    run_criterion(6, "function-preserving pruning", 5, check)


def test_criterion_7_benchmark_direction():
    def check():
        before, after = paired_benchmark(random_model(BEFORE_PRUNE_SIZES, seed=0),
                                         random_model(AFTER_PRUNE_SIZES, seed=0),
                                         FrameStream(pool_size=8), warmup=100, iterations=12000,
                                         rounds=60, forward_only=True, ids=("before", "after"))
        measured = compare_means(before.mean_ms, after.mean_ms).latency_delta_pct
        published = compare_means(88.51, 83.27).latency_delta_pct
        detail = (f"before {before.mean_ms:.4f} ms, after {after.mean_ms:.4f} ms "
                  f"({measured:+.1f}%); published pair gives {published:+.1f}%")
        assert after.mean_ms < before.mean_ms, "pruned shape is not faster: " + detail
        assert round(published, 1) == 5.9, detail
        return detail
    run_criterion(7, "benchmark direction of effect", 120, check)


def test_criterion_8_serialization_and_determinism(tmp_path):
    def check():
        model = random_model([50, 20], input_dim=64, seed=5)
        x = np.random.default_rng(6).random((100, 64))
        loaded = model_from_bytes(model_to_bytes(model))
        assert np.array_equal(forward(model, x).view(np.int64), forward(loaded, x).view(np.int64)), \
            "round trip changed outputs"
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / run
            subprocess.run([sys.executable, "-m", "adaptive_dbn.cli", "train", "--synthetic",
                            "--seed", "7", "--out-dir", str(out)],
                           check=True, capture_output=True)
            blobs.append((out / "model.adbn").read_bytes())
        assert blobs[0] == blobs[1], "two seeded runs wrote different model files"
        return f"0-ulp round trip; two `train --seed 7` runs wrote identical {len(blobs[0])}-byte files"
    run_criterion(8, "serialization and determinism", 5 * 60, check)
