"""Train on dense synthetic clouds, test on thinned copies.

A scaled-down version of the cross-density run in the acceptance suite:
smaller network, fewer clouds, two seeds. Runs in about a minute on one core.

    python3 demos/cross_density.py
"""

import time

from ascn import ModelConfig, decimate_dataset, default_class_specs, generate_dataset, run_crossdomain

train_set = generate_dataset(default_class_specs(20, 300), seed=10)
test_set = generate_dataset(default_class_specs(10, 300), seed=20)
tests = {"dense": test_set,
         "x2": decimate_dataset(test_set, 2),
         "x4": decimate_dataset(test_set, 4)}

print("points per cloud:", {tag: round(sum(len(it.cloud) for it in ds.items) / len(ds))
                            for tag, ds in tests.items()})

small = dict(widths=[8, 16, 16, 32, 32], hidden=32, supports=3)
variants = {
    "adaptive M, Str-Conv": ModelConfig(**small),
    "fixed M=3, Str-Conv": ModelConfig(**small, fixed_m=3),
    "adaptive M, dir only": ModelConfig(**small, mode="dir"),
}

for name, cfg in variants.items():
    t = time.perf_counter()
    res = run_crossdomain(train_set, tests, cfg, epochs=10, seeds=[0, 1])
    print(f"\n## {name}  ({time.perf_counter() - t:.0f}s)\n")
    print(res.to_markdown())
