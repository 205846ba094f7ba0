"""Inference latency of the published before/after pruning shapes.

Random weights are enough: latency depends on the shape only. The two
models are timed in alternating rounds on the same synthetic frame stream.
"""

from adaptive_dbn.bench import (AFTER_PRUNE_SIZES, BEFORE_PRUNE_SIZES, FrameStream,
                                compare_means, compare_models, paired_benchmark, random_model)

stream = FrameStream(pool_size=8)
for forward_only in (False, True):
    before, after = paired_benchmark(random_model(BEFORE_PRUNE_SIZES), random_model(AFTER_PRUNE_SIZES),
                                     stream, warmup=50, iterations=2000, rounds=10,
                                     forward_only=forward_only, ids=("before", "after"))
    print(f"{before.mode}: before {before.mean_ms:.4f} ms ({before.fps:.0f} fps), "
          f"after {after.mean_ms:.4f} ms ({after.fps:.0f} fps)")
    print("  " + ", ".join(compare_models(before, after).lines()))
print("published means 88.51 -> 83.27 ms:", compare_means(88.51, 83.27).lines()[0])
