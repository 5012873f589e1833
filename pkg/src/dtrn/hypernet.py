"""Hypernetwork producing per-(task, behavior) conditional parameters.

Input for a pair (t, b) is the concatenation [E_T[t]; E_B[b]].  For every
layer-norm site there is a pair of two-layer ReLU MLPs whose final layer is
zero-initialized and read as ``gamma = 1 + mlp_gamma(x)``, ``beta =
mlp_beta(x)``, so a fresh hypernetwork is exactly neutral.  Residual targets
(QKV / FFN weights) get one MLP each, producing ``delta`` with the target's
shape; the effective weight is ``W * (1 + delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .nn import MLP, Module
from .tensor import Tensor


@dataclass
class ConditionalParams:
    gamma_tb: Tensor
    beta_tb: Tensor
    site: str
    task: int = -1
    behavior: int = -1


@dataclass
class ResidualModulation:
    delta_w: Tensor
    target: str

    def apply(self, weight: Tensor) -> Tensor:
        return tn.mul(weight, tn.add(self.delta_w, tn.constant(np.ones(weight.shape), dtype=weight.dtype)))


class HyperNet(Module):
    def __init__(self, d: int, hidden: int, cln_sites, residual_targets: dict[str, tuple], rng: np.random.Generator):
        self.d = d
        self.cln_sites = list(cln_sites)
        self.residual_shapes = {k: tuple(v) for k, v in residual_targets.items()}
        self.gamma_mlps = [MLP([2 * d, hidden, d], rng, zero_last=True) for _ in self.cln_sites]
        self.beta_mlps = [MLP([2 * d, hidden, d], rng, zero_last=True) for _ in self.cln_sites]
        self.residual_mlps = [MLP([2 * d, hidden, int(np.prod(s))], rng, zero_last=True)
                              for s in self.residual_shapes.values()]

    def _site(self, site: str) -> int:
        try:
            return self.cln_sites.index(site)
        except ValueError:
            raise KeyError(f"unknown layer-norm site {site!r}") from None

    def cln_table(self, cond: Tensor, site: str) -> tuple[Tensor, Tensor]:
        """Batched form: cond is (C, 2d); returns gamma and beta of shape (C, d)."""
        i = self._site(site)
        one = tn.constant(np.ones(self.d), dtype=cond.dtype)
        return tn.add(self.gamma_mlps[i](cond), one), self.beta_mlps[i](cond)

    def residual_table(self, cond: Tensor, target: str) -> Tensor:
        """Batched form: returns delta of shape (C, *target_shape)."""
        if target not in self.residual_shapes:
            raise KeyError(f"unregistered residual target {target!r}")
        i = list(self.residual_shapes).index(target)
        out = self.residual_mlps[i](cond)
        return tn.reshape(out, (cond.shape[0],) + self.residual_shapes[target])

    def generate_cln_params(self, task_emb: Tensor, behavior_emb: Tensor, site: str,
                            task: int = -1, behavior: int = -1) -> ConditionalParams:
        cond = tn.reshape(tn.concat([task_emb, behavior_emb], axis=-1), (1, 2 * self.d))
        g, b = self.cln_table(cond, site)
        return ConditionalParams(tn.reshape(g, (self.d,)), tn.reshape(b, (self.d,)), site, task, behavior)

    def generate_residual_modulation(self, task_emb: Tensor, behavior_emb: Tensor, target: str) -> ResidualModulation:
        cond = tn.reshape(tn.concat([task_emb, behavior_emb], axis=-1), (1, 2 * self.d))
        delta = self.residual_table(cond, target)
        return ResidualModulation(tn.reshape(delta, self.residual_shapes[target]), target)
