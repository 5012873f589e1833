"""Feature schema, instances, batching, and the embedding tables.

Sequence vocabularies reserve id 0 for padding; real item ids start at 1.
The target item lives in the same item space as the behavior sequences and
is embedded through the sequence table of whichever behavior is being
decoded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tn
from .config import parse_kv, format_kv
from .nn import Module, uniform
from .tensor import Parameter, Tensor

PAD = 0


class SchemaError(ValueError):
    pass


@dataclass
class FeatureSchema:
    n_sparse: int
    n_seqs: int
    n_tasks: int
    vocab: list[int]
    seq_vocab: list[int]
    max_len: list[int]
    dim: int

    def __post_init__(self):
        if min(self.n_sparse, self.n_seqs, self.n_tasks, self.dim) < 1:
            raise SchemaError("n_sparse, n_seqs, n_tasks and dim must all be >= 1")
        if len(self.vocab) != self.n_sparse:
            raise SchemaError(f"expected {self.n_sparse} sparse vocab sizes, got {len(self.vocab)}")
        if len(self.seq_vocab) != self.n_seqs or len(self.max_len) != self.n_seqs:
            raise SchemaError(f"expected {self.n_seqs} sequence vocab sizes and max lengths")
        if min(self.vocab) < 1 or min(self.seq_vocab) < 1:
            raise SchemaError("every cardinality must be >= 1")
        if min(self.max_len) < 1:
            raise SchemaError("every max_len must be >= 1")

    @property
    def raw_width(self) -> int:
        """Width of the bottom representation: N*d sparse + M*d interest."""
        return (self.n_sparse + self.n_seqs) * self.dim

    def to_kv(self) -> dict[str, str]:
        kv = {"n_sparse": self.n_sparse, "n_seqs": self.n_seqs, "n_tasks": self.n_tasks, "dim": self.dim}
        for i, k in enumerate(self.vocab):
            kv[f"vocab_{i}"] = k
        for i, (k, m) in enumerate(zip(self.seq_vocab, self.max_len)):
            kv[f"seq_vocab_{i}"] = k
            kv[f"max_len_{i}"] = m
        return {k: str(v) for k, v in kv.items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "FeatureSchema":
        try:
            n, m = int(kv["n_sparse"]), int(kv["n_seqs"])
            return cls(
                n_sparse=n,
                n_seqs=m,
                n_tasks=int(kv["n_tasks"]),
                vocab=[int(kv[f"vocab_{i}"]) for i in range(n)],
                seq_vocab=[int(kv[f"seq_vocab_{i}"]) for i in range(m)],
                max_len=[int(kv[f"max_len_{i}"]) for i in range(m)],
                dim=int(kv["dim"]),
            )
        except KeyError as e:
            raise SchemaError(f"schema missing key {e.args[0]}") from None

    def save(self, path) -> None:
        Path(path).write_text(format_kv(self.to_kv()))

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        return cls.from_kv(parse_kv(Path(path).read_text()))


@dataclass
class Instance:
    sparse: list[int]
    seqs: list[list[int]]
    labels: list[int]
    target: int

    def to_json(self) -> str:
        return json.dumps({"sparse": self.sparse, "seqs": self.seqs, "labels": self.labels, "target": self.target},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Instance":
        obj = json.loads(line)
        return cls(sparse=[int(v) for v in obj["sparse"]],
                   seqs=[[int(v) for v in s] for s in obj["seqs"]],
                   labels=[int(v) for v in obj["labels"]],
                   target=int(obj["target"]))


def validate_instance(inst: Instance, schema: FeatureSchema) -> None:
    if len(inst.sparse) != schema.n_sparse:
        raise SchemaError(f"instance has {len(inst.sparse)} sparse ids, schema wants {schema.n_sparse}")
    if len(inst.seqs) != schema.n_seqs:
        raise SchemaError(f"instance has {len(inst.seqs)} sequences, schema wants {schema.n_seqs}")
    if len(inst.labels) != schema.n_tasks:
        raise SchemaError(f"instance has {len(inst.labels)} labels, schema wants {schema.n_tasks}")
    if any(y not in (0, 1) for y in inst.labels):
        raise SchemaError(f"labels must be 0/1, got {inst.labels}")
    for i, (v, k) in enumerate(zip(inst.sparse, schema.vocab)):
        if not 0 <= v < k:
            raise SchemaError(f"sparse feature {i}: id {v} outside [0, {k})")
    for b, (seq, k) in enumerate(zip(inst.seqs, schema.seq_vocab)):
        for v in seq:
            if not 1 <= v < k:
                raise SchemaError(f"sequence {b}: item id {v} outside [1, {k})")
        if not 1 <= inst.target < k:
            raise SchemaError(f"target {inst.target} outside item range of sequence {b}")


def write_jsonl(path, instances: Iterable[Instance]) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(inst.to_json())
            fh.write("\n")


def read_jsonl(path) -> list[Instance]:
    with open(path) as fh:
        return [Instance.from_json(line) for line in fh if line.strip()]


@dataclass
class SequenceBatch:
    ids: np.ndarray      # (batch, max_len) int, right-padded with PAD
    mask: np.ndarray     # (batch, max_len) bool
    lengths: np.ndarray  # (batch,)

    @classmethod
    def from_lists(cls, seqs: Sequence[Sequence[int]], max_len: int) -> "SequenceBatch":
        ids = np.full((len(seqs), max_len), PAD, dtype=np.int64)
        lengths = np.zeros(len(seqs), dtype=np.int64)
        for r, s in enumerate(seqs):
            s = list(s)[-max_len:]  # keep the most recent items
            ids[r, :len(s)] = s
            lengths[r] = len(s)
        mask = np.arange(max_len)[None, :] < lengths[:, None]
        return cls(ids, mask, lengths)


@dataclass
class Batch:
    sparse: np.ndarray             # (batch, N)
    seqs: list[SequenceBatch]      # M entries
    target: np.ndarray             # (batch,)
    labels: np.ndarray             # (batch, T)
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.target)

    def take(self, rows) -> "Batch":
        rows = np.asarray(rows, dtype=np.int64)
        seqs = [SequenceBatch(s.ids[rows], s.mask[rows], s.lengths[rows]) for s in self.seqs]
        return Batch(self.sparse[rows], seqs, self.target[rows], self.labels[rows], self.index[rows])


def collate(instances: Sequence[Instance], schema: FeatureSchema, index=None) -> Batch:
    sparse = np.array([inst.sparse for inst in instances], dtype=np.int64).reshape(len(instances), schema.n_sparse)
    seqs = [SequenceBatch.from_lists([inst.seqs[b] for inst in instances], schema.max_len[b])
            for b in range(schema.n_seqs)]
    target = np.array([inst.target for inst in instances], dtype=np.int64)
    labels = np.array([inst.labels for inst in instances], dtype=np.int64).reshape(len(instances), schema.n_tasks)
    idx = np.arange(len(instances)) if index is None else np.asarray(index, dtype=np.int64)
    return Batch(sparse, seqs, target, labels, idx)


class EmbeddingBank(Module):
    """Sparse-feature, sequence, task-type and behavior-type embedding tables."""

    def __init__(self, schema: FeatureSchema, rng: np.random.Generator):
        d = schema.dim
        bound = 1.0 / np.sqrt(d)
        self.schema = schema
        self.sparse_tables = [Parameter(uniform(rng, (k, d), bound)) for k in schema.vocab]
        self.sequence_tables = [Parameter(uniform(rng, (k, d), bound)) for k in schema.seq_vocab]
        self.task_table = Parameter(uniform(rng, (schema.n_tasks, d), bound))
        self.behavior_type_table = Parameter(uniform(rng, (schema.n_seqs, d), bound))

    def embed_sparse(self, sparse_ids: np.ndarray) -> list[Tensor]:
        sparse_ids = np.asarray(sparse_ids)
        if sparse_ids.ndim != 2 or sparse_ids.shape[1] != self.schema.n_sparse:
            raise tn.ShapeError(f"sparse ids must be (batch, {self.schema.n_sparse}), got {sparse_ids.shape}")
        return [tn.gather_rows(tab, sparse_ids[:, i]) for i, tab in enumerate(self.sparse_tables)]

    def embed_sequence(self, seq: SequenceBatch, b: int) -> Tensor:
        return tn.gather_rows(self.sequence_tables[b], seq.ids)

    def embed_item(self, item_ids: np.ndarray, b: int) -> Tensor:
        return tn.gather_rows(self.sequence_tables[b], np.asarray(item_ids))

    def type_embeddings(self, t: int, b: int) -> tuple[Tensor, Tensor]:
        if not 0 <= t < self.schema.n_tasks:
            raise IndexError(f"task {t} out of range [0, {self.schema.n_tasks})")
        if not 0 <= b < self.schema.n_seqs:
            raise IndexError(f"behavior {b} out of range [0, {self.schema.n_seqs})")
        return tn.gather_rows(self.task_table, [t])[0], tn.gather_rows(self.behavior_type_table, [b])[0]
