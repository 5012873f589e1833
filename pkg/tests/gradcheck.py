"""End-to-end gradient checks of a toy model against central differences."""

from __future__ import annotations

import numpy as np

from dtrn.embedding import FeatureSchema, collate
from dtrn.model import DTRN, ModelConfig

from conftest import random_instances
from oracles import analytic_grads

TOY_SCHEMA = FeatureSchema(n_sparse=2, n_seqs=2, n_tasks=2, vocab=[5, 5], seq_vocab=[6, 6], max_len=[4, 4], dim=8)
TOY_MODEL = dict(d_f=8, hyper_hidden=4, trm_hidden=8, expert_hidden=8, tower_hidden=4)


def toy_point(seed: int, variant: str = "dtrn", head: str = "share_bottom", site: str = "ln"):
    """A float64 toy model with every parameter randomized, plus a batch of 4."""
    rng = np.random.default_rng([seed, 77])
    model = DTRN(TOY_SCHEMA, ModelConfig(variant=variant, head=head, injection_site=site, **TOY_MODEL), seed=seed)
    model.astype(np.float64)
    for p in model.parameters():
        # move off the neutral / zero init so every path carries gradient
        p.data = p.data + rng.normal(scale=0.2, size=p.shape)
    batch = collate(random_instances(TOY_SCHEMA, 4, rng), TOY_SCHEMA)
    return model, batch


def directional_errors(model, batch, rng, h=1e-5, floor=1e-7):
    """Per-tensor |g.v - (L(p+hv) - L(p-hv)) / 2h| / max(|.|, |.|, floor) for a random unit v."""
    params = model.parameters()
    grads = analytic_grads(lambda: model.loss(batch), params)
    errors = {}
    for (name, p), g in zip(model.named_parameters(), grads):
        v = rng.normal(size=p.shape)
        v /= np.linalg.norm(v)
        base = p.data.copy()
        p.data = base + h * v
        up = model.loss(batch).item()
        p.data = base - h * v
        down = model.loss(batch).item()
        p.data = base
        numeric = (up - down) / (2 * h)
        analytic = float(np.sum(g * v))
        errors[name] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
    return errors
