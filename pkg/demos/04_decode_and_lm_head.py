"""
Decode attention and the LM head on one engine
==============================================

During decode a single query is scored against the whole KV cache.  The
scores, the softmax and the value sum run as separate steps.  The int8
matvec used for the scores is reused for the vocabulary projection.
"""

import numpy as np

from tellme.decode import DecodeEngine, KvCache, decode_attention, lm_head
from tellme.packing import pack_matrix

rng = np.random.default_rng(3)
heads, d = 4, 16
cache = KvCache(heads, d, capacity=64)
cache.append_real(rng.standard_normal((heads, 20, d)), rng.standard_normal((heads, 20, d)))
print("cached tokens:", cache.length, "of", cache.capacity)

engine = DecodeEngine()
q = rng.integers(-127, 128, size=(heads, d)).astype(np.int8)
out = decode_attention(q, 0.01, cache, engine)
print("attention output:", out.shape)
# one scan of K and V per step, plus the query
print("attention bytes read:", engine.bytes_read, "=", 2 * heads * cache.length * d + heads * d)

head = pack_matrix(rng.integers(-1, 2, size=(heads * d, 100)), 3, 8, scale=0.1)
logits = lm_head(out.reshape(-1), head, engine)
print("next token:", int(np.argmax(logits)))
print("engine calls by caller:", engine.callers)
