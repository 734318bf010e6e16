"""End-to-end ternary LLaMA-style model: prefill, then greedy decode."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ModelConfig
from .container import WeightRecord, read_weights, write_weights
from .decode import DecodeEngine, KvCache, ContextOverflowError, decode_attention, lm_head
from .packing import PackedTernaryMatrix, pack_matrix
from .prefill import PrefillBatch, ScheduleTrace, reverse_prefill_attention
from .special import (NormParams, RopeParams, absmax_quantize, rmsnorm, rmsnorm_quant_fused,
                      rope_apply, silu_fused)
from .tlmm import QuantTensor, dequantize_output, tl_matmul

PROJECTIONS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


@dataclass
class LayerWeights:
    wq: PackedTernaryMatrix
    wk: PackedTernaryMatrix
    wv: PackedTernaryMatrix
    wo: PackedTernaryMatrix
    w_gate: PackedTernaryMatrix
    w_up: PackedTernaryMatrix
    w_down: PackedTernaryMatrix
    attn_norm: NormParams
    ffn_norm: NormParams

    def check(self, cfg: ModelConfig) -> None:
        n, f = cfg.hidden, cfg.ffn
        want = {"wq": (n, n), "wk": (n, n), "wv": (n, n), "wo": (n, n),
                "w_gate": (n, f), "w_up": (n, f), "w_down": (f, n)}
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ConfigError(f"{name} has shape {got}, config implies {shape}")
        for norm in (self.attn_norm, self.ffn_norm):
            if np.shape(norm.gamma) != (n,):
                raise ConfigError("norm gamma length != hidden size")


@dataclass
class Model:
    config: ModelConfig
    embedding: np.ndarray  # (V, N) float32
    layers: list[LayerWeights]
    final_norm: NormParams
    head: PackedTernaryMatrix  # (N, V)
    rope: RopeParams = field(init=False, repr=False)

    def __post_init__(self):
        cfg = self.config
        if self.embedding.shape != (cfg.vocab, cfg.hidden):
            raise ConfigError(f"embedding shape {self.embedding.shape} != {(cfg.vocab, cfg.hidden)}")
        if len(self.layers) != cfg.layers:
            raise ConfigError(f"{len(self.layers)} layers given, config says {cfg.layers}")
        for layer in self.layers:
            layer.check(cfg)
        if self.head.shape != (cfg.hidden, cfg.vocab):
            raise ConfigError(f"lm head shape {self.head.shape} != {(cfg.hidden, cfg.vocab)}")
        self.rope = RopeParams(cfg.head_dim, cfg.capacity, cfg.rope_theta)

    def new_caches(self, scale_mode: str = "token") -> list[KvCache]:
        cfg = self.config
        return [KvCache(cfg.heads, cfg.head_dim, cfg.capacity, scale_mode) for _ in range(cfg.layers)]


def linear(xq: QuantTensor, w: PackedTernaryMatrix, cfg: ModelConfig, post=None) -> np.ndarray:
    acc = tl_matmul(xq, w, cfg.q_lanes)
    return dequantize_output(acc, xq.row_scale(), w.scale, post=post)


def _heads(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    # (t, h*d) -> (h, t, d)
    return x.reshape(x.shape[0], cfg.heads, cfg.head_dim).transpose(1, 0, 2)


def _quantize_tokens(x_htd: np.ndarray) -> QuantTensor:
    h, t, d = x_htd.shape
    return absmax_quantize(x_htd.transpose(1, 0, 2).reshape(t, h * d))


def forward_block(x, layer: LayerWeights, model: Model, phase: str, cache: KvCache,
                  engine: DecodeEngine | None = None, p: int | None = None,
                  traces: list | None = None, dtype=np.float64) -> np.ndarray:
    """One transformer block: ``y = x + attn(norm(x))``, ``z = y + ffn(norm(y))``.

    ``phase="prefill"`` expects an empty cache and runs the reverse-scheduled
    fused attention over all tokens; ``phase="decode"`` takes one token and
    runs decoupled attention against the cache.  Both append the block's
    keys/values to ``cache``.
    """
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.hidden:
        raise ConfigError(f"block input must be (tokens, {cfg.hidden}), got {x.shape}")
    t = x.shape[0]
    if phase == "decode":
        if t != 1:
            raise ConfigError("decode phase takes exactly one token")
    elif phase == "prefill":
        if cache.length != 0:
            raise ConfigError("prefill expects an empty cache")
    else:
        raise ConfigError(f"unknown phase {phase!r}")

    start = cache.length
    positions = np.arange(start, start + t)
    xn = rmsnorm_quant_fused(x, layer.attn_norm)
    q = rope_apply(_heads(linear(xn, layer.wq, cfg), cfg), positions, model.rope)
    k = rope_apply(_heads(linear(xn, layer.wk, cfg), cfg), positions, model.rope)
    v = _heads(linear(xn, layer.wv, cfg), cfg)
    cache.append_real(k, v)
    qq = _quantize_tokens(q)

    if phase == "prefill":
        batch = PrefillBatch(
            _heads(qq.data, cfg), cache.k[:, :t], cache.v[:, :t],
            qq.row_scale(), cache.k_scale[:t], cache.v_scale[:t],
            p=p or cfg.parallelism,
        )
        attn, trace = reverse_prefill_attention(batch, dtype=dtype)
        if traces is not None:
            traces.append(trace)
    else:
        attn = decode_attention(qq.data.reshape(cfg.heads, cfg.head_dim), float(qq.scale[0]),
                                cache, engine, dtype=dtype).reshape(1, -1)

    y = x + linear(absmax_quantize(attn), layer.wo, cfg)
    yn = rmsnorm_quant_fused(y, layer.ffn_norm)
    gate = linear(yn, layer.w_gate, cfg, post=silu_fused)
    gate *= linear(yn, layer.w_up, cfg)
    return y + linear(absmax_quantize(gate), layer.w_down, cfg)


@dataclass
class GenerationRequest:
    prompt_ids: list[int]
    max_new_tokens: int = 16


@dataclass
class GenerationResult:
    generated: list[int] = field(default_factory=list)
    prefill_seconds: float = 0.0
    decode_seconds: list[float] = field(default_factory=list)
    kv_loads: list[int] = field(default_factory=list)  # prefill, per layer
    quant_saturations: int = 0

    @property
    def decode_tokens_per_second(self) -> float:
        total = sum(self.decode_seconds)
        return len(self.decode_seconds) / total if total > 0 else 0.0

    def report(self) -> dict:
        return {
            "generated": list(self.generated),
            "prefill_seconds": self.prefill_seconds,
            "decode_tokens_per_second": self.decode_tokens_per_second,
            "kv_loads": list(self.kv_loads),
            "quant_saturations": self.quant_saturations,
        }


@dataclass
class PrefillOutput:
    first_token: int | None
    hidden: np.ndarray  # (t, N) after the last block
    layer_outputs: list[np.ndarray]
    caches: list[KvCache]
    traces: list[ScheduleTrace]
    seconds: float


class Runtime:
    """Prefill + greedy decode over a :class:`Model`."""

    def __init__(self, model: Model, p: int | None = None, kv_scale_mode: str = "token",
                 engine: DecodeEngine | None = None, dtype=np.float64):
        self.model = model
        self.p = p or model.config.parallelism
        self.kv_scale_mode = kv_scale_mode
        self.engine = engine or DecodeEngine()
        self.dtype = dtype

    def embed(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.model.config.vocab):
            raise ConfigError("token id outside the vocabulary")
        return self.model.embedding[ids].astype(np.float64)

    def logits(self, hidden_row) -> np.ndarray:
        return lm_head(rmsnorm(hidden_row, self.model.final_norm), self.model.head, self.engine)

    def next_token(self, hidden_row) -> int:
        return int(np.argmax(self.logits(hidden_row)))

    def prefill(self, prompt_ids, emit_token: bool = True) -> PrefillOutput:
        prompt_ids = list(prompt_ids)
        cfg = self.model.config
        if not prompt_ids:
            raise ConfigError("prompt must not be empty")
        if len(prompt_ids) > cfg.capacity:
            raise ContextOverflowError(f"prompt of {len(prompt_ids)} tokens exceeds capacity {cfg.capacity}")
        t0 = time.perf_counter()
        caches = self.model.new_caches(self.kv_scale_mode)
        traces: list[ScheduleTrace] = []
        x = self.embed(prompt_ids)
        outs = []
        for layer, cache in zip(self.model.layers, caches):
            x = forward_block(x, layer, self.model, "prefill", cache, self.engine, self.p, traces, self.dtype)
            outs.append(x)
        first = self.next_token(x[-1]) if emit_token else None
        return PrefillOutput(first, x, outs, caches, traces, time.perf_counter() - t0)

    def decode_step(self, token_id: int, caches: list[KvCache]) -> list[np.ndarray]:
        """Run one token through every block; returns each block's ``(N,)`` output."""
        x = self.embed([token_id])
        outs = []
        for layer, cache in zip(self.model.layers, caches):
            x = forward_block(x, layer, self.model, "decode", cache, self.engine, dtype=self.dtype)
            outs.append(x[0])
        return outs

    def generate(self, request: GenerationRequest) -> GenerationResult:
        cfg = self.model.config
        prompt = list(request.prompt_ids)
        result = GenerationResult()
        if request.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")
        pre = self.prefill(prompt, emit_token=False)
        result.prefill_seconds = pre.seconds
        result.kv_loads = [tr.kv_loads for tr in pre.traces]
        gen = result.generated
        hidden = pre.hidden[-1]
        while len(gen) < request.max_new_tokens and len(prompt) + len(gen) < cfg.capacity:
            if gen:
                t0 = time.perf_counter()
                hidden = self.decode_step(gen[-1], pre.caches)[-1]
                tok = self.next_token(hidden)
                result.decode_seconds.append(time.perf_counter() - t0)
            else:
                t0 = time.perf_counter()
                tok = self.next_token(hidden)
                result.prefill_seconds += time.perf_counter() - t0
            gen.append(tok)
        result.quant_saturations = sum(c.saturations for c in pre.caches)
        return result


def generate(model: Model, request: GenerationRequest, **kwargs) -> GenerationResult:
    return Runtime(model, **kwargs).generate(request)


# -- checkpoints -----------------------------------------------------------

def make_toy(seed: int = 0, config: ModelConfig | None = None, zero_prob: float = 1 / 3) -> Model:
    """Deterministic random ternary model.

    Weight scales are ``1/sqrt(fan_in * (1 - zero_prob))`` so each projection
    roughly preserves the RMS of a normalised input.
    """
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)

    def ternary(n_in, n_out):
        pm = (1 - zero_prob) / 2
        w = rng.choice(np.array([-1, 0, 1], dtype=np.int8), size=(n_in, n_out), p=[pm, zero_prob, pm])
        scale = 1.0 / np.sqrt(n_in * max(1 - zero_prob, 1e-3))
        return pack_matrix(w, cfg.group_size, cfg.tables, scale)

    def norm():
        return NormParams((1.0 + 0.1 * rng.standard_normal(cfg.hidden)).astype(np.float32), cfg.norm_eps)

    n, f = cfg.hidden, cfg.ffn
    layers = []
    for _ in range(cfg.layers):
        layers.append(LayerWeights(
            ternary(n, n), ternary(n, n), ternary(n, n), ternary(n, n),
            ternary(n, f), ternary(n, f), ternary(f, n), norm(), norm(),
        ))
    embedding = rng.standard_normal((cfg.vocab, n)).astype(np.float32)
    return Model(cfg, embedding, layers, norm(), ternary(n, cfg.vocab))


def model_to_record(model: Model) -> WeightRecord:
    tensors: dict = {"embedding": np.asarray(model.embedding, dtype=np.float32)}
    for i, layer in enumerate(model.layers):
        for name in PROJECTIONS:
            tensors[f"layers.{i}.{name}"] = getattr(layer, name)
        tensors[f"layers.{i}.attn_norm"] = np.asarray(layer.attn_norm.gamma, dtype=np.float32)
        tensors[f"layers.{i}.ffn_norm"] = np.asarray(layer.ffn_norm.gamma, dtype=np.float32)
    tensors["final_norm"] = np.asarray(model.final_norm.gamma, dtype=np.float32)
    tensors["lm_head"] = model.head
    return WeightRecord(model.config, tensors)


def model_from_record(record: WeightRecord) -> Model:
    cfg = record.config
    if cfg is None:
        raise ConfigError("weight file carries no model config")
    t = record.tensors
    try:
        layers = [
            LayerWeights(
                *(t[f"layers.{i}.{name}"] for name in PROJECTIONS),
                NormParams(t[f"layers.{i}.attn_norm"], cfg.norm_eps),
                NormParams(t[f"layers.{i}.ffn_norm"], cfg.norm_eps),
            )
            for i in range(cfg.layers)
        ]
        return Model(cfg, t["embedding"], layers, NormParams(t["final_norm"], cfg.norm_eps), t["lm_head"])
    except KeyError as exc:
        raise ConfigError(f"weight file is missing tensor {exc}") from exc


def save_model(path, model: Model) -> None:
    write_weights(path, model_to_record(model))


def load_model(path) -> Model:
    return model_from_record(read_weights(path))
