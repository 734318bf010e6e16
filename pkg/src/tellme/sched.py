"""Cost accounting for the reverse, naive and dense attention schedules.

A data block is one token's per-head vector; an iteration that streams a
key/value pair charges one block (q loads are not counted).  Under that
convention the reverse schedule's closed form is exact whenever ``p | N``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .config import ModelConfig
from .prefill import ScheduleTrace

APPROACHES = ("reverse", "naive", "dense")
CSV_COLUMNS = ("approach", "N", "p", "loads", "iterations", "bandwidth_factor", "masked_fraction")


@dataclass(frozen=True)
class ScheduleCost:
    approach: str
    n_tokens: int
    p: int
    data_block_loads: float
    iteration_count: float
    bandwidth_factor: float
    redundant_masked_fraction: float


def masked_waste(n_tokens: int, p: int, approach: str) -> float:
    """Fraction of computed score cells that the causal mask throws away."""
    _check(n_tokens, p, approach)
    if approach == "reverse":
        return 0.0
    return (n_tokens - 1) / (2 * n_tokens)


def _check(n_tokens: int, p: int, approach: str) -> None:
    if approach not in APPROACHES:
        raise ValueError(f"unknown approach {approach!r}")
    if n_tokens < 1 or p < 1:
        raise ValueError("N and p must be >= 1")


def closed_form(n_tokens: int, p: int, approach: str) -> ScheduleCost:
    _check(n_tokens, p, approach)
    n = n_tokens
    if approach == "reverse":
        loads = iters = n * n / (2 * p) + n / 2
    elif approach == "naive":
        loads, iters = n * n + n, n * n / p
    else:
        loads, iters = n * n / p + n + p - 1, n * n / p + p - 1
    return ScheduleCost(approach, n, p, loads, iters, loads / iters, masked_waste(n, p, approach))


def simulate_reverse(n_tokens: int, p: int) -> tuple[ScheduleCost, ScheduleTrace]:
    """Event-level replay of the reverse schedule, without any arithmetic."""
    _check(n_tokens, p, "reverse")
    trace = ScheduleTrace("reverse", n_tokens, p)
    top = n_tokens
    for b, hi in enumerate(range(n_tokens, 0, -p)):
        lo = max(hi - p, 0)
        if b > 0:
            for t in range(hi + 1, top + 1):
                trace.record("evict", b, t)
            top = hi
        for t in range(hi, lo, -1):
            trace.record("q", b, t)
        trace.peak_q_slots = max(trace.peak_q_slots, hi - lo)
        for j in range(1, hi + 1):
            trace.record("kv", b, j)
            trace.computed_cells += sum(1 for i in range(lo + 1, hi + 1) if i >= j)
        trace.peak_kv_tokens = 1
    loads = trace.kv_loads
    cost = ScheduleCost("reverse", n_tokens, p, loads, trace.iterations, loads / trace.iterations, 0.0)
    return cost, trace


@dataclass(frozen=True)
class PhaseProfile:
    phase: str
    bytes_moved: int
    mac_ops: int

    @property
    def arithmetic_intensity(self) -> float:
        return self.mac_ops / self.bytes_moved


def phase_profile(config: ModelConfig, n_prompt: int, m_cached: int,
                  bytes_per_elem: int = 1) -> tuple[PhaseProfile, PhaseProfile]:
    """Analytic traffic and MACs of one attention invocation per phase.

    Prefill streams q, k, v once each (``3*N*h*d`` elements) and evaluates
    only the ``N(N+1)/2`` causal cells, each costing ``d`` MACs for the score
    and ``d`` for the value sum.  Decode reads one query plus the full key
    and value cache (``h*d + 2*M*h*d``) for ``2*M*h*d`` MACs.
    """
    if n_prompt < 1 or m_cached < 1:
        raise ValueError("N and M must be >= 1")
    hd = config.heads * config.head_dim
    prefill = PhaseProfile("prefill", 3 * n_prompt * hd * bytes_per_elem, n_prompt * (n_prompt + 1) * hd)
    decode = PhaseProfile("decode", (hd + 2 * m_cached * hd) * bytes_per_elem, 2 * m_cached * hd)
    return prefill, decode


def _fmt(x: float) -> str:
    if isinstance(x, int) or float(x).is_integer():
        return str(int(x))
    return repr(float(x))


def cost_rows(costs) -> list[list[str]]:
    return [[c.approach, str(c.n_tokens), str(c.p), _fmt(c.data_block_loads), _fmt(c.iteration_count),
             _fmt(c.bandwidth_factor), _fmt(c.redundant_masked_fraction)] for c in costs]


def emit_csv(costs, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(cost_rows(costs))


def read_csv(path) -> list[ScheduleCost]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns {reader.fieldnames}")
        return [
            ScheduleCost(r["approach"], int(r["N"]), int(r["p"]), float(r["loads"]), float(r["iterations"]),
                         float(r["bandwidth_factor"]), float(r["masked_fraction"]))
            for r in reader
        ]


def sweep(ns, p: int) -> list[ScheduleCost]:
    return [closed_form(n, p, a) for n in ns for a in APPROACHES]


def trace_to_csv(trace: ScheduleTrace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("kind", "batch", "token"))
        writer.writerows(trace.events)


def bandwidth_bound(n_tokens: int, p: int) -> float:
    """Upper bound ``1 + p/N`` on the near-constant schedules' load/iteration ratio."""
    return 1 + p / n_tokens


def naive_bandwidth_floor(n_tokens: int, p: int) -> float:
    return p * (1 - 1 / n_tokens)

