"""
Generating with a toy ternary model
===================================

A small random model goes through a save/load round trip.  It then runs
prefill followed by greedy decode, and the tokens are checked against the
straight-line float64 reference.
"""

import tempfile
from pathlib import Path

from tellme.reference import ReferenceModel
from tellme.runtime import GenerationRequest, Runtime, load_model, make_toy, save_model

model = make_toy(seed=7)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "toy.tlm"
    save_model(path, model)
    print("weight file:", path.stat().st_size, "bytes")
    model = load_model(path)

prompt = [12, 40, 7, 99, 3]
result = Runtime(model).generate(GenerationRequest(prompt, max_new_tokens=12))
print("generated:", result.generated)
print(f"prefill {result.prefill_seconds * 1e3:.1f} ms, decode {result.decode_tokens_per_second:.0f} tokens/s")
print("prefill kv loads per layer:", result.kv_loads)

ref, margin = ReferenceModel(model).generate(prompt, 12)
print("reference agrees:", ref == result.generated, f"(smallest logit margin {margin:.3g})")
