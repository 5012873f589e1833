import numpy as np
import pytest

from dtrn import tensor as tn
from dtrn.embedding import (PAD, EmbeddingBank, FeatureSchema, Instance, SchemaError, SequenceBatch, collate,
                            read_jsonl, validate_instance, write_jsonl)
from dtrn.model import DTRN, ModelConfig

from conftest import random_instances
from oracles import one_hot


@pytest.fixture
def bank(toy_schema):
    return EmbeddingBank(toy_schema, np.random.default_rng(0))


class TestSchema:
    def test_table_shapes(self, toy_schema, bank):
        assert [t.shape for t in bank.sparse_tables] == [(5, 8), (7, 8)]
        assert [t.shape for t in bank.sequence_tables] == [(9, 8), (9, 8)]
        assert bank.task_table.shape == (2, 8)
        assert bank.behavior_type_table.shape == (2, 8)

    def test_kv_round_trip(self, toy_schema, tmp_path):
        toy_schema.save(tmp_path / "schema.txt")
        assert FeatureSchema.load(tmp_path / "schema.txt") == toy_schema
        text = (tmp_path / "schema.txt").read_text()
        assert "seq_vocab_1=9" in text and "max_len_0=4" in text

    @pytest.mark.parametrize("kwargs", [
        dict(n_sparse=0, vocab=[]),
        dict(dim=0),
        dict(vocab=[0, 3]),
        dict(max_len=[0, 2]),
        dict(seq_vocab=[3]),
    ])
    def test_invalid(self, kwargs):
        base = dict(n_sparse=2, n_seqs=2, n_tasks=1, vocab=[3, 3], seq_vocab=[4, 4], max_len=[2, 2], dim=4)
        base.update(kwargs)
        with pytest.raises(SchemaError):
            FeatureSchema(**base)

    def test_missing_key(self):
        with pytest.raises(SchemaError, match="dim"):
            FeatureSchema.from_kv({"n_sparse": "1", "n_seqs": "1", "n_tasks": "1", "vocab_0": "2",
                                   "seq_vocab_0": "2", "max_len_0": "1"})


class TestInstances:
    def test_json_round_trip(self, toy_schema, tmp_path):
        insts = random_instances(toy_schema, 20, np.random.default_rng(1))
        write_jsonl(tmp_path / "d.jsonl", insts)
        assert read_jsonl(tmp_path / "d.jsonl") == insts

    def test_json_field_names(self):
        line = Instance([1], [[2, 3]], [0, 1], 4).to_json()
        assert line == '{"sparse":[1],"seqs":[[2,3]],"labels":[0,1],"target":4}'

    def test_validation(self, toy_schema):
        good = Instance([0, 6], [[1, 8], []], [0, 1], 3)
        validate_instance(good, toy_schema)
        for bad in (Instance([0, 7], [[1], []], [0, 1], 3),
                    Instance([0, 0], [[0], []], [0, 1], 3),
                    Instance([0, 0], [[1], []], [0, 2], 3),
                    Instance([0, 0], [[1], []], [0, 1], 9)):
            with pytest.raises(SchemaError):
                validate_instance(bad, toy_schema)


class TestSequenceBatch:
    def test_padding_and_mask(self):
        sb = SequenceBatch.from_lists([[5], [1, 2, 3]], max_len=3)
        assert sb.ids.tolist() == [[5, PAD, PAD], [1, 2, 3]]
        assert sb.mask.tolist() == [[True, False, False], [True, True, True]]
        assert sb.lengths.tolist() == [1, 3]

    def test_truncation_keeps_most_recent(self):
        sb = SequenceBatch.from_lists([[1, 2, 3, 4, 5]], max_len=2)
        assert sb.ids.tolist() == [[4, 5]] and sb.lengths.tolist() == [2]

    def test_mask_matches_lengths(self, toy_schema):
        batch = collate(random_instances(toy_schema, 30, np.random.default_rng(2)), toy_schema)
        for sb, m in zip(batch.seqs, toy_schema.max_len):
            assert (sb.lengths <= m).all()
            assert np.array_equal(sb.mask, np.arange(m)[None, :] < sb.lengths[:, None])


class TestLookups:
    def test_sparse_lookup(self, bank):
        out = bank.embed_sparse(np.array([[0, 3], [0, 3]]))
        assert len(out) == 2 and out[0].shape == (2, 8)
        assert np.array_equal(out[0].data[0], bank.sparse_tables[0].data[0])
        assert np.array_equal(out[0].data[0], out[0].data[1])

    def test_sparse_equals_one_hot_product(self, bank):
        ids = np.array([[4, 0], [1, 6], [2, 2]])
        out = bank.embed_sparse(ids)
        np.testing.assert_allclose(out[0].data, one_hot(ids[:, 0], 5) @ bank.sparse_tables[0].data, atol=1e-7)

    def test_sparse_out_of_range(self, bank):
        with pytest.raises(IndexError):
            bank.embed_sparse(np.array([[5, 0]]))

    def test_sequence_shape_and_pad_rows(self, bank):
        sb = SequenceBatch.from_lists([[3]], max_len=4)
        out = bank.embed_sequence(sb, 0)
        assert out.shape == (1, 4, 8)
        assert np.array_equal(out.data[0, 1], bank.sequence_tables[0].data[PAD])

    def test_permutation(self, bank):
        a = bank.embed_sequence(SequenceBatch.from_lists([[2, 7]], 2), 1).data
        b = bank.embed_sequence(SequenceBatch.from_lists([[7, 2]], 2), 1).data
        assert np.array_equal(a[0, ::-1], b[0])

    def test_type_embeddings(self, bank):
        t, b = bank.type_embeddings(0, 1)
        assert np.array_equal(t.data, bank.task_table.data[0])
        assert np.array_equal(b.data, bank.behavior_type_table.data[1])
        assert not np.array_equal(bank.type_embeddings(1, 1)[0].data, t.data)
        with pytest.raises(IndexError):
            bank.type_embeddings(2, 0)
        with pytest.raises(IndexError):
            bank.type_embeddings(0, 2)

    def test_type_embedding_gradient_touches_one_row(self, bank):
        with tn.Tape() as tape:
            t, b = bank.type_embeddings(1, 0)
            loss = tn.sum(tn.mul(t, b))
        tape.backward(loss)
        assert np.count_nonzero(np.abs(bank.task_table.grad).sum(axis=1)) == 1
        np.testing.assert_array_equal(bank.task_table.grad[1], bank.behavior_type_table.data[0])

    def test_changing_a_row_changes_only_its_gathers(self, bank):
        ids = np.array([[1, 2], [3, 2], [1, 5]])
        before = [e.data.copy() for e in bank.embed_sparse(ids)]
        bank.sparse_tables[0].data[1] += 1.0
        after = [e.data for e in bank.embed_sparse(ids)]
        changed = np.any(after[0] != before[0], axis=1)
        assert changed.tolist() == [True, False, True]
        assert np.array_equal(after[1], before[1])


@pytest.mark.parametrize("variant", ["baseline", "dtrn"])
def test_pad_rows_never_influence_loss(toy_schema, toy_batch, variant):
    model = DTRN(toy_schema, ModelConfig(variant=variant), seed=3)
    with tn.Tape() as tape:
        loss = model.loss(toy_batch)
    tape.backward(loss)
    for table in model.bank.sequence_tables:
        assert not table.grad[PAD].any()
    for table in model.bank.sequence_tables:
        table.data[PAD] = np.random.default_rng(9).normal(size=table.shape[1])
    assert model.loss(toy_batch).item() == loss.item()
