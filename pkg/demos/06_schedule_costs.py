"""
Attention schedule costs
========================

Closed-form load and iteration counts for the three prefill schedules,
checked against an event-level replay of the reverse schedule.  A second
table compares prefill and decode arithmetic intensity.
"""

from tellme.config import ModelConfig
from tellme.sched import closed_form, phase_profile, simulate_reverse

p = 4
print(f"{'N':>5} {'approach':>8} {'loads':>9} {'iters':>9} {'bw':>6} {'masked':>7}")
for n in (64, 256, 1024):
    for approach in ("reverse", "dense", "naive"):
        c = closed_form(n, p, approach)
        print(f"{n:5d} {approach:>8} {c.data_block_loads:9.0f} {c.iteration_count:9.0f} "
              f"{c.bandwidth_factor:6.2f} {c.redundant_masked_fraction:7.3f}")
    sim, _ = simulate_reverse(n, p)
    print(f"{'':5} {'replay':>8} {sim.data_block_loads:9.0f}")

cfg = ModelConfig(hidden=1536, heads=12, head_dim=128)
print("\nMACs per byte, prefill N tokens vs one decode step over M cached:")
for n in (16, 128, 1024):
    pre, dec = phase_profile(cfg, n, n)
    print(f"N=M={n:5d}  prefill {pre.arithmetic_intensity:7.2f}   decode {dec.arithmetic_intensity:5.2f}")
