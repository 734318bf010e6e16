"""
Reverse-scheduled prefill attention
===================================

Queries are processed in batches of p starting from the last token.  A
batch only needs keys up to its highest query, and once a batch is done
the tokens above the next batch are evicted for good.  Every streamed
key/value pair is used, so no causal-mask work is wasted.
"""

import numpy as np

from tellme.prefill import PrefillBatch, dense_schedule_attention, naive_causal_attention, reverse_prefill_attention
from tellme.sched import closed_form

rng = np.random.default_rng(2)
h, n, d, p = 2, 8, 16, 4
q, k, v = (rng.integers(-127, 128, size=(h, n, d)).astype(np.int8) for _ in range(3))
batch = PrefillBatch(q, k, v, 0.01, 0.01, 0.01, p=p)

out, trace = reverse_prefill_attention(batch)
ref = naive_causal_attention(batch)
print("max |reverse - naive| :", float(np.abs(out - ref).max()))

# the event trace shows which keys each batch streams
for b in range(2):
    kv = [t for kind, bb, t in trace.events if kind == "kv" and bb == b]
    qs = [t for kind, bb, t in trace.events if kind == "q" and bb == b]
    print(f"batch {b}: queries {qs} stream keys {kv}")
print("kv loads:", trace.kv_loads, " closed form:", closed_form(n, p, "reverse").data_block_loads)

# the dense schedule computes every cell and throws half of them away
_, dense = dense_schedule_attention(batch)
print("dense iterations:", dense.iterations, " masked cells:", dense.masked_cells)
