"""Smoke test for the `spikedrive` extension module.

Build and install first:  pip install maturin && maturin develop -m crates/python/Cargo.toml
"""

import math
import random

import spikedrive as sd

# LIF: constant 0.6 with beta 0.5 charges 0.6, 0.9, 1.05 (fire, reset), 0.6.
assert sd.lif([[0.6], [0.6], [0.6], [0.6]]) == [[0], [0], [1], [0]]
assert sd.lif([[1.0, 0.99]]) == [[1, 0]]

assert sd.flops_conv(3, 224, 224, 3, 64) == 86_704_128
assert sd.flops_mlp(512, 2048) == 512 * 2048

e1 = sd.energy_vsa_layer(196, 512)
assert abs(e1 - 1.2e9) / 1.2e9 < 0.05, e1

assert sd.Model(8, 512).param_count() == 29_701_672

m = sd.Model(1, 16, num_classes=3, height=16, width=16, seed=1)
rng = random.Random(0)
imgs = [[[[rng.random() for _ in range(16)] for _ in range(16)] for _ in range(3)] for _ in range(2)]
logits = m.forward(imgs)
assert len(logits) == 2 and all(len(r) == 3 and all(math.isfinite(v) for v in r) for r in logits)
assert len(m.predict(imgs)) == 2

zero = m.energy(rate=0.0)
assert zero["total_pj"] == 0.0, zero["total_pj"]
traced = m.energy(imgs)
assert traced["total_pj"] > 0.0 and traced["ann_total_pj"] > 0.0

try:
    m.forward([[[[0.0]]]])
except ValueError:
    pass
else:
    raise AssertionError("geometry mismatch accepted")

print("python smoke ok:", m.config(), f"E1={e1:.3e} pJ")
