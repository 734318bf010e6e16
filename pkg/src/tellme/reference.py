"""Straight-line float64 reference of the toy model, used as an oracle.

Nothing here shares code with the kernels: weights are expanded to dense
trits, matmuls are plain integer products, attention materialises the full
masked score matrix, RoPE is done with complex rotation, and every token is
recomputed from scratch at each generation step (no cache).
"""

from __future__ import annotations

import numpy as np

from .runtime import PROJECTIONS, Model


def _quant(x):
    amax = np.abs(x).max(axis=-1, keepdims=True)
    live = amax >= np.finfo(np.float64).tiny * 127
    q = np.clip(np.rint(x * (127.0 / np.where(live, amax, 1.0))), -127, 127)
    q[np.broadcast_to(~live, q.shape)] = 0
    return q.astype(np.int64), np.where(live, amax / 127.0, 1.0)


def _norm(x, gamma, eps):
    gamma = np.asarray(gamma, dtype=np.float64)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * gamma / rms


class ReferenceModel:
    def __init__(self, model: Model):
        self.cfg = model.config
        self.emb = np.asarray(model.embedding, dtype=np.float64)
        self.layers = []
        for layer in model.layers:
            dense = {name: (getattr(layer, name).dense().astype(np.int64), getattr(layer, name).scale)
                     for name in PROJECTIONS}
            dense["attn_norm"] = layer.attn_norm.gamma
            dense["ffn_norm"] = layer.ffn_norm.gamma
            self.layers.append(dense)
        self.final_norm = model.final_norm.gamma
        self.head = (model.head.dense().astype(np.int64), model.head.scale)

    def _linear(self, x, w):
        q, s = _quant(x)
        mat, ws = w
        return (q @ mat).astype(np.float64) * s * ws

    def _rope(self, x, positions):
        # x: (t, h, d) -> complex pairs (t, h, d/2)
        d = x.shape[-1]
        z = x[..., 0::2] + 1j * x[..., 1::2]
        freqs = self.cfg.rope_theta ** (-np.arange(0, d, 2) / d)
        rot = np.exp(1j * positions[:, None] * freqs[None, :])[:, None, :]
        z = z * rot
        out = np.empty_like(x)
        out[..., 0::2], out[..., 1::2] = z.real, z.imag
        return out

    def _attention(self, q, k, v):
        t, h, d = q.shape
        qq, qs = _quant(q.reshape(t, -1))
        kq, ks = _quant(k.reshape(t, -1))
        vq, vs = _quant(v.reshape(t, -1))
        qf = (qq * qs).reshape(t, h, d)
        kf = (kq * ks).reshape(t, h, d)
        vf = (vq * vs).reshape(t, h, d)
        scores = np.einsum("ihd,jhd->hij", qf, kf) / np.sqrt(d)
        scores[:, np.triu(np.ones((t, t), dtype=bool), 1)] = -np.inf
        probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        return np.einsum("hij,jhd->ihd", probs, vf).reshape(t, h * d)

    def block(self, x, i):
        L, cfg = self.layers[i], self.cfg
        t = x.shape[0]
        pos = np.arange(t, dtype=np.float64)
        xn = _norm(x, L["attn_norm"], cfg.norm_eps)
        q = self._rope(self._linear(xn, L["wq"]).reshape(t, cfg.heads, cfg.head_dim), pos)
        k = self._rope(self._linear(xn, L["wk"]).reshape(t, cfg.heads, cfg.head_dim), pos)
        v = self._linear(xn, L["wv"]).reshape(t, cfg.heads, cfg.head_dim)
        y = x + self._linear(self._attention(q, k, v), L["wo"])
        yn = _norm(y, L["ffn_norm"], cfg.norm_eps)
        g = self._linear(yn, L["w_gate"])
        g = g / (1.0 + np.exp(-g))
        return y + self._linear(g * self._linear(yn, L["w_up"]), L["w_down"])

    def hidden_states(self, tokens) -> list[np.ndarray]:
        x = self.emb[np.asarray(tokens)]
        outs = []
        for i in range(len(self.layers)):
            x = self.block(x, i)
            outs.append(x)
        return outs

    def logits(self, tokens) -> np.ndarray:
        x = self.hidden_states(tokens)[-1][-1]
        return self._linear(_norm(x, self.final_norm, self.cfg.norm_eps), self.head)

    def generate(self, prompt, max_new: int) -> tuple[list[int], float]:
        """Greedy ids plus the smallest top-1/top-2 logit margin seen."""
        seq = list(prompt)
        out, margin = [], np.inf
        while len(out) < max_new and len(seq) < self.cfg.capacity:
            lg = self.logits(seq)
            top2 = np.sort(lg)[-2:]
            margin = min(margin, float(top2[1] - top2[0]))
            tok = int(np.argmax(lg))
            out.append(tok)
            seq.append(tok)
        return out, margin
