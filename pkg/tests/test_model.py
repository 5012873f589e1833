import numpy as np
import pytest

from dtrn.config import ConfigError
from dtrn.embedding import collate
from dtrn.model import DTRN, VARIANTS, ModelConfig

from conftest import random_instances
from gradcheck import TOY_MODEL, TOY_SCHEMA, toy_point
from oracles import analytic_grads, central_differences, max_relative_error


def toy_batch_of(n, seed):
    return collate(random_instances(TOY_SCHEMA, n, np.random.default_rng(seed)), TOY_SCHEMA)


@pytest.mark.parametrize("variant", sorted(VARIANTS))
@pytest.mark.parametrize("head", ["share_bottom", "mmoe", "ple", "aitm"])
def test_shapes_and_probabilities(variant, head):
    model = DTRN(TOY_SCHEMA, ModelConfig(variant=variant, head=head, **TOY_MODEL), seed=1)
    out = model(toy_batch_of(5, 0))
    assert out.logits.o.shape == (5, 2)
    assert len(out.bottoms) == 2 and all(b.shape == (5, TOY_SCHEMA.raw_width) for b in out.bottoms)
    p = model.predict(toy_batch_of(5, 0))
    assert ((p > 0) & (p < 1)).all()
    assert (len(out.refines) == 2) == (variant in ("trm", "dtrn"))


@pytest.mark.parametrize("plain, conditioned", [("baseline", "tim"), ("trm", "dtrn")])
@pytest.mark.parametrize("head", ["share_bottom", "mmoe", "ple", "aitm"])
def test_neutral_init_adds_nothing(plain, conditioned, head):
    batch = toy_batch_of(6, 3)
    a = DTRN(TOY_SCHEMA, ModelConfig(variant=plain, head=head, **TOY_MODEL), seed=4)
    b = DTRN(TOY_SCHEMA, ModelConfig(variant=conditioned, head=head, **TOY_MODEL), seed=4)
    assert np.array_equal(a.predict(batch), b.predict(batch))


def test_only_tim_variants_condition_interests():
    batch = toy_batch_of(4, 5)
    for variant in VARIANTS:
        model = DTRN(TOY_SCHEMA, ModelConfig(variant=variant, **TOY_MODEL), seed=0)
        if model.tim.hyper is not None:
            for p in model.tim.hyper.parameters():
                p.data = np.random.default_rng(0).normal(size=p.shape).astype(p.dtype)
        out = model(batch)
        same = np.array_equal(out.interests[0].data, out.interests[1].data)
        assert same != model.cfg.use_tim


def test_removed_task_is_absent():
    model = DTRN(TOY_SCHEMA, ModelConfig(variant="dtrn", removed_tasks=[0], **TOY_MODEL), seed=0)
    batch = toy_batch_of(4, 6)
    assert model.tasks == [1] and model.predict(batch).shape == (4, 1)
    assert np.array_equal(model.labels(batch), batch.labels[:, [1]])
    with pytest.raises(ConfigError):
        DTRN(TOY_SCHEMA, ModelConfig(removed_tasks=[0, 1]), seed=0)
    with pytest.raises(ConfigError):
        DTRN(TOY_SCHEMA, ModelConfig(removed_tasks=[5]), seed=0)


def test_elementwise_gradient_at_one_point():
    model, batch = toy_point(0)
    params = model.parameters()
    analytic = analytic_grads(lambda: model.loss(batch), params)
    numeric = central_differences(lambda: model.loss(batch).item(), params, h=1e-5)
    assert max_relative_error(analytic, numeric, floor=1e-7) <= 1e-4
