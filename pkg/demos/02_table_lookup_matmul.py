"""
Table-lookup ternary matmul
===========================

For every block of G activations we precompute all 3^G signed sums once.
The packed weight indices then pick entries out of those tables, so the
inner loop is only gathers and integer adds.
"""

import time

import numpy as np

from tellme.packing import pack_matrix
from tellme.tlmm import (QuantTensor, dequantize_output, half_table_setup, naive_ternary_matmul,
                         partial_table_matmul, table_setup, tl_matmul)

rng = np.random.default_rng(1)

# the table for one group of two activations
block = np.array([5, -2])
print("G=2 table for a=(5, -2):", table_setup(block, 2, 1)[0].tolist())
# the half table keeps 5 of those 9 entries and recovers the rest by sign
print("half table:            ", half_table_setup(block, 2, 1)[0].tolist())

m, n, k = 8, 768, 256
x = rng.standard_normal((m, n))
a_scale = np.abs(x).max() / 127
a = QuantTensor(np.rint(x / a_scale).astype(np.int8), a_scale)
w = rng.integers(-1, 2, size=(n, k))
packed = pack_matrix(w, 3, 32, scale=0.05)

for name, fn, arg in [("naive", naive_ternary_matmul, w), ("tl", tl_matmul, packed),
                      ("partial", partial_table_matmul, packed)]:
    t0 = time.perf_counter()
    acc = fn(a, arg)
    print(f"{name:8s} {time.perf_counter() - t0:7.4f} s  checksum {int(acc.sum())}")

# int32 accumulators are rescaled once at the end
y = dequantize_output(tl_matmul(a, packed), a.scale, packed.scale)
ref = x @ (w * 0.05)
print("max |quantized - float| :", float(np.abs(y - ref).max()))
