"""Task-specific representation refinement: a per-task sigmoid gate over the raw bottom vector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .nn import MLP, Module
from .tensor import Tensor


@dataclass
class TaskBottomRepresentation:
    raw: Tensor
    refine: Tensor
    refined: Tensor
    task: int


def build_raw(sparse_embs: Sequence[Tensor], interest: Tensor, expected_width: int | None = None) -> Tensor:
    """[e_1, ..., e_N, interest] along the feature axis."""
    raw = tn.concat(list(sparse_embs) + [interest], axis=-1)
    if expected_width is not None and raw.shape[-1] != expected_width:
        raise tn.ShapeError(f"raw bottom width {raw.shape[-1]} != schema width {expected_width}")
    return raw


class RefineNet(Module):
    """One independent D -> hidden -> D gate per task."""

    def __init__(self, width: int, n_tasks: int, rng: np.random.Generator, hidden: int | None = None):
        self.width = width
        self.hidden = hidden or max(1, width // 4)
        self.gates = [MLP([width, self.hidden, width], rng, final="sigmoid") for _ in range(n_tasks)]

    def refine(self, raw: Tensor, t: int) -> TaskBottomRepresentation:
        if raw.shape[-1] != self.width:
            raise tn.ShapeError(f"raw width {raw.shape[-1]} != refine net width {self.width}")
        gate = self.gates[t](raw)
        return TaskBottomRepresentation(raw, gate, tn.mul(raw, gate), t)
