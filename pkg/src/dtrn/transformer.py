"""Encoder-decoder Transformer with per-(task, behavior) conditioning.

One base network is shared by every (task, behavior) pair.  Activations
carry a leading *condition* axis C: a forward pass for behavior b computes
the interests of several tasks at once, one slice per task.  Sub-blocks that
do not depend on the condition (e.g. the first self-attention when only the
layer norms are conditioned) run once with C=1 and are expanded lazily.

Shapes used below: C conditions, B batch, L sequence length, d model width,
h heads, d' = d / h.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .hypernet import ConditionalParams, HyperNet
from .nn import Module, uniform
from .tensor import Parameter, Tensor

INJECTION_SITES = ("ln", "qkv", "ffn1", "ffn2")


@dataclass
class TransformerConfig:
    d: int
    heads: int = 2
    d_f: int = 32
    enc_layers: int = 1
    dec_layers: int = 1
    hyper_hidden: int | None = None
    injection_site: str = "ln"

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.injection_site not in INJECTION_SITES:
            raise ValueError(f"injection_site must be one of {INJECTION_SITES}, got {self.injection_site!r}")
        if self.hyper_hidden is None:
            self.hyper_hidden = 2 * self.d

    @property
    def d_prime(self) -> int:
        return self.d // self.heads


@dataclass
class InterestVector:
    task: int
    behavior: int
    vec: Tensor  # (batch, d)


@dataclass
class Conditioning:
    """Per-condition parameters for one forward pass (C slices)."""

    n: int
    cln: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)
    residual: dict[str, Tensor] = field(default_factory=dict)


NEUTRAL = Conditioning(1)


def _lead(x: Tensor, c: int) -> Tensor:
    """Expand a leading axis of size 1 to c."""
    if x.shape[0] == c:
        return x
    return tn.expand(x, (c,) + x.shape[1:])


def _match(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    c = max(a.shape[0], b.shape[0])
    return _lead(a, c), _lead(b, c)


def cln(x: Tensor, params: ConditionalParams | None, gamma_l: Tensor, beta_l: Tensor) -> Tensor:
    """gamma_tb * gamma_l * (x - mu) / sigma + beta_tb + beta_l over the last axis.

    ``params=None`` is the unconditioned layer norm.
    """
    n = tn.normalize(x)
    if params is None:
        return tn.add(tn.mul(n, gamma_l), beta_l)
    scale = tn.mul(params.gamma_tb, gamma_l)
    shift = tn.add(params.beta_tb, beta_l)
    return tn.add(tn.mul(n, scale), shift)


def _cln_batched(x: Tensor, gamma_tb: Tensor, beta_tb: Tensor, gamma_l: Tensor, beta_l: Tensor) -> Tensor:
    # x: (C or 1, B, L, d); gamma_tb/beta_tb: (C, d)
    c = gamma_tb.shape[0]
    n = _lead(tn.normalize(x), c)
    full = n.shape
    scale = tn.mul(gamma_tb, gamma_l)
    shift = tn.add(beta_tb, beta_l)
    scale = tn.expand(tn.reshape(scale, (c, 1, 1, full[-1])), full)
    shift = tn.expand(tn.reshape(shift, (c, 1, 1, full[-1])), full)
    return tn.add(tn.mul(n, scale), shift)


class TransformerLayer(Module):
    """MH(S)A + FFN + two layer norms; used for both encoder and decoder layers."""

    def __init__(self, name: str, cfg: TransformerConfig, rng: np.random.Generator):
        d, d_f = cfg.d, cfg.d_f
        self.name = name
        self.heads = cfg.heads
        bd = 1.0 / math.sqrt(d)
        # Column block i of wq/wk/wv is the per-head projection W_i (d x d').
        self.wq = Parameter(uniform(rng, (d, d), bd))
        self.wk = Parameter(uniform(rng, (d, d), bd))
        self.wv = Parameter(uniform(rng, (d, d), bd))
        self.wo = Parameter(uniform(rng, (d, d), bd))
        self.w1 = Parameter(uniform(rng, (d, d_f), bd))
        self.b1 = Parameter(np.zeros(d_f))
        self.w2 = Parameter(uniform(rng, (d_f, d), 1.0 / math.sqrt(d_f)))
        self.b2 = Parameter(np.zeros(d))
        self.ln1_gamma = Parameter(np.ones(d))
        self.ln1_beta = Parameter(np.zeros(d))
        self.ln2_gamma = Parameter(np.ones(d))
        self.ln2_beta = Parameter(np.zeros(d))

    @property
    def ln_sites(self) -> tuple[str, str]:
        return f"{self.name}_ln1", f"{self.name}_ln2"

    def residual_targets(self, site: str) -> dict[str, tuple]:
        names = {"qkv": ("wq", "wk", "wv"), "ffn1": ("w1", "b1"), "ffn2": ("w2", "b2")}.get(site, ())
        return {f"{self.name}.{n}": getattr(self, n).shape for n in names}

    def _weight(self, attr: str, cond: Conditioning) -> Tensor:
        w = getattr(self, attr)
        delta = cond.residual.get(f"{self.name}.{attr}")
        if delta is None:
            return w
        c = delta.shape[0]
        base = tn.expand(tn.reshape(w, (1,) + w.shape), (c,) + w.shape)
        one = tn.constant(np.ones(delta.shape), dtype=delta.dtype)
        return tn.mul(base, tn.add(delta, one))

    @staticmethod
    def _project(x: Tensor, w: Tensor) -> Tensor:
        if w.ndim == 2:
            return tn.matmul(x, w)
        c = w.shape[0]
        x = _lead(x, c)
        lead = x.shape[:-1]
        out = tn.matmul(tn.reshape(x, (c, -1, x.shape[-1])), w)
        return tn.reshape(out, lead + (w.shape[-1],))

    @staticmethod
    def _bias(y: Tensor, b: Tensor) -> Tensor:
        if b.ndim == 1:
            return tn.add(y, b)
        c = b.shape[0]
        y = _lead(y, c)
        bb = tn.expand(tn.reshape(b, (c,) + (1,) * (y.ndim - 2) + (b.shape[-1],)), y.shape)
        return tn.add(y, bb)

    def attention(self, q_src: Tensor, kv_src: Tensor, key_mask: np.ndarray, cond: Conditioning = NEUTRAL,
                  return_weights: bool = False):
        """Multi-head attention; q_src (C,B,Lq,d), kv_src (C,B,L,d), key_mask (B,L)."""
        h = self.heads
        q = self._project(q_src, self._weight("wq", cond))
        k = self._project(kv_src, self._weight("wk", cond))
        v = self._project(kv_src, self._weight("wv", cond))
        q, k = _match(q, k)
        k, v = _match(k, v)
        q, v = _match(q, v)
        c, b, lq, d = q.shape
        lk = k.shape[2]
        dp = d // h
        qh = tn.transpose(tn.reshape(q, (c, b, lq, h, dp)), (0, 1, 3, 2, 4))   # (C,B,h,Lq,d')
        kh = tn.transpose(tn.reshape(k, (c, b, lk, h, dp)), (0, 1, 3, 4, 2))   # (C,B,h,d',L)
        vh = tn.transpose(tn.reshape(v, (c, b, lk, h, dp)), (0, 1, 3, 2, 4))   # (C,B,h,L,d')
        scores = tn.scale(tn.matmul(qh, kh), 1.0 / math.sqrt(dp))
        weights = tn.softmax_masked(scores, np.asarray(key_mask, dtype=bool)[None, :, None, None, :])
        heads = tn.matmul(weights, vh)                                          # (C,B,h,Lq,d')
        merged = tn.reshape(tn.transpose(heads, (0, 1, 3, 2, 4)), (c, b, lq, d))
        out = tn.matmul(merged, self.wo)
        return (out, weights) if return_weights else out

    def ffn(self, x: Tensor, cond: Conditioning = NEUTRAL) -> Tensor:
        hidden = tn.relu(self._bias(self._project(x, self._weight("w1", cond)), self._weight("b1", cond)))
        return self._bias(self._project(hidden, self._weight("w2", cond)), self._weight("b2", cond))

    def norm(self, x: Tensor, which: int, cond: Conditioning) -> Tensor:
        gamma_l = self.ln1_gamma if which == 1 else self.ln2_gamma
        beta_l = self.ln1_beta if which == 1 else self.ln2_beta
        site = self.ln_sites[which - 1]
        if site in cond.cln:
            g, b = cond.cln[site]
            return _cln_batched(x, g, b, gamma_l, beta_l)
        return cln(x, None, gamma_l, beta_l)

    def __call__(self, query: Tensor, memory: Tensor | None, key_mask: np.ndarray, cond: Conditioning) -> Tensor:
        """Self-attention layer when ``memory`` is None, else cross-attention from ``query``."""
        kv = query if memory is None else memory
        a, b = _match(query, self.attention(query, kv, key_mask, cond))
        out0 = self.norm(tn.add(a, b), 1, cond)
        a, b = _match(out0, self.ffn(out0, cond))
        return self.norm(tn.add(a, b), 2, cond)


class ConditionalTransformer(Module):
    """Task-specific interest extraction: hypernetwork + shared Transformer.

    With ``conditioned=False`` there is no hypernetwork and a single
    task-shared interest per behavior is produced.
    """

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, conditioned: bool = True):
        self.cfg = cfg
        self.conditioned = conditioned
        self.encoders = [TransformerLayer(f"enc{i}", cfg, rng) for i in range(cfg.enc_layers)]
        self.decoders = [TransformerLayer(f"dec{i}", cfg, rng) for i in range(cfg.dec_layers)]
        self.hyper = None
        if conditioned:
            layers = self.encoders + self.decoders
            if cfg.injection_site == "ln":
                sites = [s for layer in layers for s in layer.ln_sites]
                targets = {}
            else:
                sites = []
                targets = {k: v for layer in layers for k, v in layer.residual_targets(cfg.injection_site).items()}
            self.hyper = HyperNet(cfg.d, cfg.hyper_hidden, sites, targets, rng)

    # -- conditioning ------------------------------------------------------

    def condition_inputs(self, bank, tasks, b: int) -> Tensor:
        """(C, 2d) rows [E_T[t]; E_B[b]] for t in ``tasks``."""
        t_emb = tn.gather_rows(bank.task_table, list(tasks))
        b_emb = tn.gather_rows(bank.behavior_type_table, [b] * len(tasks))
        return tn.concat([t_emb, b_emb], axis=-1)

    def conditioning(self, cond_in: Tensor | None) -> Conditioning:
        if self.hyper is None or cond_in is None:
            return NEUTRAL
        out = Conditioning(cond_in.shape[0])
        for site in self.hyper.cln_sites:
            out.cln[site] = self.hyper.cln_table(cond_in, site)
        for target in self.hyper.residual_shapes:
            out.residual[target] = self.hyper.residual_table(cond_in, target)
        return out

    # -- forward pieces ----------------------------------------------------

    @staticmethod
    def _safe_mask(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mask = np.asarray(mask, dtype=bool)
        empty = ~mask.any(axis=1)
        if empty.any():
            mask = mask.copy()
            mask[empty, 0] = True  # attend to the pad row; the interest is zeroed afterwards
        return mask, empty

    def encode_c(self, x_emb: Tensor, mask: np.ndarray, cond: Conditioning) -> Tensor:
        x = tn.reshape(x_emb, (1,) + x_emb.shape) if x_emb.ndim == 3 else x_emb
        for layer in self.encoders:
            x = layer(x, None, mask, cond)
        return x

    def decode_c(self, e_item: Tensor, out_enc: Tensor, mask: np.ndarray, cond: Conditioning) -> Tensor:
        q = tn.reshape(e_item, (1, e_item.shape[0], 1, e_item.shape[-1]))
        for layer in self.decoders:
            q = layer(q, out_enc, mask, cond)
        return tn.reshape(q, (q.shape[0], q.shape[1], q.shape[3]))

    def behavior_interests(self, bank, seq, e_item: Tensor, b: int, tasks) -> Tensor:
        """Interests of behavior b for the given tasks, shape (C, B, d).

        Unconditioned models return C=1 regardless of ``tasks``.
        """
        mask, empty = self._safe_mask(seq.mask)
        x = bank.embed_sequence(seq, b)
        cond = self.conditioning(self.condition_inputs(bank, tasks, b) if self.hyper is not None else None)
        enc = self.encode_c(x, mask, cond)
        out = self.decode_c(e_item, enc, mask, cond)
        if empty.any():
            keep = tn.constant((~empty).astype(np.float64)[None, :, None], dtype=out.dtype)
            out = tn.mul(out, tn.expand(keep, out.shape))
        return out

    def all_interests(self, bank, batch, tasks) -> list[Tensor]:
        """One (C, B, d) tensor per behavior, in behavior order."""
        return [self.behavior_interests(bank, seq, bank.embed_item(batch.target, b), b, tasks)
                for b, seq in enumerate(batch.seqs)]

    # -- single-pair API ---------------------------------------------------

    def _pair_cond(self, bank, t, b):
        if self.hyper is None or t is None:
            return NEUTRAL
        return self.conditioning(self.condition_inputs(bank, [t], b))

    def encode(self, bank, x_emb: Tensor, mask, t: int | None, b: int) -> tuple[Tensor, np.ndarray]:
        """out_enc (B, L, d) for one (t, b) pair plus the per-row empty-sequence flag."""
        safe, empty = self._safe_mask(mask)
        out = self.encode_c(x_emb, safe, self._pair_cond(bank, t, b))
        return tn.reshape(out, out.shape[1:]), empty

    def decode(self, bank, e_item: Tensor, out_enc: Tensor, mask, t: int | None, b: int) -> InterestVector:
        safe, empty = self._safe_mask(mask)
        enc = tn.reshape(out_enc, (1,) + out_enc.shape)
        out = self.decode_c(e_item, enc, safe, self._pair_cond(bank, t, b))
        vec = tn.reshape(out, out.shape[1:])
        if empty.any():
            keep = tn.constant((~empty).astype(np.float64)[:, None], dtype=vec.dtype)
            vec = tn.mul(vec, tn.expand(keep, vec.shape))
        return InterestVector(-1 if t is None else t, b, vec)

    def extract_task_interest(self, bank, batch, t: int) -> Tensor:
        """concat over behaviors 0..M-1 of the (t, b) interests, shape (B, M*d)."""
        parts = []
        for b, seq in enumerate(batch.seqs):
            out = self.behavior_interests(bank, seq, bank.embed_item(batch.target, b), b, [t])
            parts.append(tn.reshape(out, out.shape[1:]))
        return tn.concat(parts, axis=-1)


def mhsa(layer: TransformerLayer, x: Tensor, mask) -> Tensor:
    """Unconditioned multi-head self-attention on (B, L, d)."""
    out = layer.attention(tn.reshape(x, (1,) + x.shape), tn.reshape(x, (1,) + x.shape), mask)
    return tn.reshape(out, x.shape)


def mha_decode(layer: TransformerLayer, q_src: Tensor, kv_src: Tensor, mask) -> Tensor:
    """Unconditioned attention with queries q_src (B, 1, d) over kv_src (B, L, d)."""
    out = layer.attention(tn.reshape(q_src, (1,) + q_src.shape), tn.reshape(kv_src, (1,) + kv_src.shape), mask)
    return tn.reshape(out, q_src.shape)


def ffn(layer: TransformerLayer, x: Tensor) -> Tensor:
    return layer.ffn(x)
