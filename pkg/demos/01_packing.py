"""
Packing ternary weights into base-3 group indices
=================================================

Each run of G consecutive trits down a column becomes one index in
[0, 3^G).  With G=3 that is 27 patterns, which fits in 5 bits.
"""

import numpy as np

from tellme.packing import decode_group, encode_group, index_bits, pack_matrix, unpack_matrix

# a single group, little-endian: idx = sum((t_i + 1) * 3^i)
print("encode (-1, 0, 1) ->", encode_group([-1, 0, 1]))
print("decode 13        ->", decode_group(13, 3))
print("bits per index for G=1..4:", [index_bits(g) for g in range(1, 5)])

# a small matrix; rows are padded up to a multiple of T*G with zeros
rng = np.random.default_rng(0)
w = rng.integers(-1, 2, size=(10, 4))
packed = pack_matrix(w, group_size=3, tables=2)
print("\nweights", w.shape, "-> indices", packed.indices.shape, "(super rows, cols, tables)")
print("padded rows:", packed.padded_rows)
print("round trip exact:", np.array_equal(unpack_matrix(packed), w))
