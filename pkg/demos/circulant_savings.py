"""First-stage weight counts for FC versus circulant banks.

Prints the percent reduction for each measurement rate and bank size, and
checks that a circulant layer agrees with its explicit matrix form.
"""

import numpy as np

from reconnet.models import ReconNetSpec, build_reconnet, first_layer_reduction, param_count
from reconnet.tensor import Prng

print("   mr  gamma  fc weights  circ weights  reduction")
for mr in (0.25, 0.10, 0.04, 0.01):
    fc = build_reconnet(ReconNetSpec(mr), Prng(0))
    for gamma in (1, 2, 4):
        circ = build_reconnet(ReconNetSpec(mr, first_stage="circulant", gamma=gamma), Prng(0))
        print(f" {mr:4.2f}  {gamma:5d}  {param_count(fc, False, 'first'):10d}"
              f"  {param_count(circ, False, 'first'):12d}  {first_layer_reduction(mr, gamma):8.2f}%")

# the FFT path against a dense circulant product
model = build_reconnet(ReconNetSpec(0.04, n_units=1, first_stage="circulant", gamma=1), Prng(1))
layer = model.first_stage
y = Prng(2).normal((3, model.m))
fast = layer.forward(y)
c = model.params["circ.c"][0]
n = c.size
dense = np.stack([np.roll(c, k) for k in range(n)], axis=1)
padded = np.concatenate([y, np.zeros((3, n - model.m))], axis=1)
print("max |fft - dense| =", np.abs(fast.reshape(3, -1) - padded @ dense.T).max())
