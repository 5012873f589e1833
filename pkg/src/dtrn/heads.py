"""Multi-task heads consuming one bottom representation per task.

Every head maps T tensors of shape (B, D) to logits (B, T).  When the
bottom representation is task-shared the same tensor object is passed T
times; the heads cache per-object work so shared inputs are only processed
once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .nn import MLP, Linear, Module
from .tensor import Tensor

HEAD_KINDS = ("share_bottom", "mmoe", "ple", "aitm")


@dataclass
class HeadConfig:
    kind: str = "share_bottom"
    n_tasks: int = 1
    n_experts: int = 4
    expert_hidden: int = 32
    tower_hidden: int = 16
    aitm_chains: str = ""
    predecessors: dict[int, int] | None = None

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.kind in ("mmoe", "ple") and self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.predecessors is None:
            self.predecessors = parse_chains(self.aitm_chains, self.n_tasks)


def parse_chains(text: str, n_tasks: int) -> dict[int, int]:
    """``"0>1;0>2>3"`` -> {1: 0, 2: 0, 3: 2}; an empty string means the chain 0>1>...>T-1."""
    if not text.strip():
        return {t: t - 1 for t in range(1, n_tasks)}
    pred: dict[int, int] = {}
    for chain in text.split(";"):
        nodes = [int(v) for v in chain.split(">") if v.strip()]
        for a, b in zip(nodes, nodes[1:]):
            if not (0 <= a < n_tasks and 0 <= b < n_tasks):
                raise ValueError(f"chain {chain!r} names a task outside [0, {n_tasks})")
            if pred.get(b, a) != a:
                raise ValueError(f"task {b} has two predecessors ({pred[b]} and {a})")
            pred[b] = a
    # reject cycles
    for t in pred:
        seen, cur = set(), t
        while cur in pred:
            if cur in seen:
                raise ValueError(f"cycle in aitm chains {text!r}")
            seen.add(cur)
            cur = pred[cur]
    return pred


def restrict_chains(pred: dict[int, int], kept: Sequence[int]) -> dict[int, int]:
    """Re-index predecessors onto the kept tasks, skipping over removed ones."""
    pos = {t: i for i, t in enumerate(kept)}
    out = {}
    for t in kept:
        p = pred.get(t)
        while p is not None and p not in pos:
            p = pred.get(p)
        if p is not None:
            out[pos[t]] = pos[p]
    return out


@dataclass
class TaskLogits:
    o: Tensor       # (B, T)
    y_hat: Tensor   # sigmoid(o)


def total_loss(logits: Tensor, labels) -> Tensor:
    """Sum over tasks of the batch-mean binary cross-entropy."""
    return tn.bce_with_logits(logits, labels)


class _Cache:
    def __init__(self):
        self._d = {}

    def get(self, key, fn):
        k = id(key)
        if k not in self._d:
            self._d[k] = (key, fn(key))
        return self._d[k][1]


def _mix(gate: Tensor, experts: Sequence[Tensor]) -> Tensor:
    """sum_e gate[:, e] * experts[e]  for gate (B, E), experts E x (B, H)."""
    stacked = tn.stack(list(experts), axis=1)  # (B, E, H)
    b, e = gate.shape
    mixed = tn.matmul(tn.reshape(gate, (b, 1, e)), stacked)
    return tn.reshape(mixed, (b, stacked.shape[-1]))


class MTLHead(Module):
    def __init__(self, cfg: HeadConfig, width: int, rng: np.random.Generator):
        self.cfg = cfg
        self.width = width
        self.last_gates: list[Tensor] = []

    def _check(self, reps: Sequence[Tensor]) -> None:
        if len(reps) != self.cfg.n_tasks:
            raise ValueError(f"expected {self.cfg.n_tasks} representations, got {len(reps)}")
        for r in reps:
            if r.shape[-1] != self.width:
                raise tn.ShapeError(f"representation width {r.shape[-1]} != head width {self.width}")

    def __call__(self, reps: Sequence[Tensor]) -> TaskLogits:
        self._check(reps)
        o = tn.concat(self.task_logits(list(reps)), axis=-1)
        return TaskLogits(o, tn.sigmoid(o))

    def task_logits(self, reps: list[Tensor]) -> list[Tensor]:
        raise NotImplementedError


class ShareBottom(MTLHead):
    def __init__(self, cfg, width, rng):
        super().__init__(cfg, width, rng)
        eh, th = cfg.expert_hidden, cfg.tower_hidden
        self.trunk = MLP([width, eh, eh], rng, final="relu")
        self.towers = [MLP([eh, th, 1], rng) for _ in range(cfg.n_tasks)]

    def task_logits(self, reps):
        cache = _Cache()
        return [tower(cache.get(r, self.trunk)) for r, tower in zip(reps, self.towers)]


class MMoE(MTLHead):
    def __init__(self, cfg, width, rng):
        super().__init__(cfg, width, rng)
        eh, th = cfg.expert_hidden, cfg.tower_hidden
        self.experts = [MLP([width, eh, eh], rng, final="relu") for _ in range(cfg.n_experts)]
        self.gates = [Linear(width, cfg.n_experts, rng) for _ in range(cfg.n_tasks)]
        self.towers = [MLP([eh, th, 1], rng) for _ in range(cfg.n_tasks)]

    def task_logits(self, reps):
        cache = _Cache()
        self.last_gates = []
        out = []
        for r, gate, tower in zip(reps, self.gates, self.towers):
            experts = cache.get(r, lambda x: [e(x) for e in self.experts])
            g = tn.softmax_masked(gate(r))
            self.last_gates.append(g)
            out.append(tower(_mix(g, experts)))
        return out


class PLE(MTLHead):
    """Single extraction level: one shared expert plus one specific expert per task."""

    def __init__(self, cfg, width, rng):
        super().__init__(cfg, width, rng)
        eh, th = cfg.expert_hidden, cfg.tower_hidden
        self.shared = MLP([width, eh, eh], rng, final="relu")
        self.specific = [MLP([width, eh, eh], rng, final="relu") for _ in range(cfg.n_tasks)]
        self.gates = [Linear(width, 2, rng) for _ in range(cfg.n_tasks)]
        self.towers = [MLP([eh, th, 1], rng) for _ in range(cfg.n_tasks)]

    def task_logits(self, reps):
        cache = _Cache()
        self.last_gates = []
        out = []
        for t, r in enumerate(reps):
            shared = cache.get(r, self.shared)
            g = tn.softmax_masked(self.gates[t](r))
            self.last_gates.append(g)
            out.append(self.towers[t](_mix(g, [self.specific[t](r), shared])))
        return out


class AITM(MTLHead):
    """Sequential towers along task chains with an attention transfer unit.

    Task t's hidden state is an attention blend of its own projected
    representation and a learned transfer of its predecessor's hidden state.
    """

    def __init__(self, cfg, width, rng):
        super().__init__(cfg, width, rng)
        eh, th = cfg.expert_hidden, cfg.tower_hidden
        self.th = th
        self.pred = dict(cfg.predecessors)
        self.own = [MLP([width, eh, th], rng, final="relu") for _ in range(cfg.n_tasks)]
        self.transfer = [Linear(th, th, rng) for _ in range(cfg.n_tasks)]
        self.att_q = Linear(th, th, rng, bias=False)
        self.att_k = Linear(th, th, rng, bias=False)
        self.att_v = Linear(th, th, rng, bias=False)
        self.out = [Linear(th, 1, rng) for _ in range(cfg.n_tasks)]
        self.order = self._topological_order(cfg.n_tasks)

    def _topological_order(self, n):
        depth = {}

        def dep(t):
            if t not in depth:
                depth[t] = 0 if t not in self.pred else dep(self.pred[t]) + 1
            return depth[t]

        return sorted(range(n), key=lambda t: (dep(t), t))

    def _blend(self, own: Tensor, moved: Tensor) -> Tensor:
        u = tn.stack([own, moved], axis=1)                            # (B, 2, th)
        q, k, v = self.att_q(u), self.att_k(u), self.att_v(u)
        score = tn.scale(tn.sum(tn.mul(q, k), axis=-1), 1.0 / math.sqrt(self.th))  # (B, 2)
        w = tn.softmax_masked(score)
        b = w.shape[0]
        return tn.reshape(tn.matmul(tn.reshape(w, (b, 1, 2)), v), (b, self.th))

    def task_logits(self, reps):
        hidden: dict[int, Tensor] = {}
        for t in self.order:
            own = self.own[t](reps[t])
            if t in self.pred:
                own = self._blend(own, self.transfer[t](hidden[self.pred[t]]))
            hidden[t] = own
        return [self.out[t](hidden[t]) for t in range(self.cfg.n_tasks)]


def build_head(cfg: HeadConfig, width: int, rng: np.random.Generator) -> MTLHead:
    return {"share_bottom": ShareBottom, "mmoe": MMoE, "ple": PLE, "aitm": AITM}[cfg.kind](cfg, width, rng)


def forward_head(head: MTLHead, reps: Sequence[Tensor]) -> TaskLogits:
    return head(reps)
