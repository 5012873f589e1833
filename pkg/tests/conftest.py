import numpy as np
import pytest

from dtrn.embedding import FeatureSchema, Instance, collate


def random_instances(schema: FeatureSchema, n: int, rng: np.random.Generator, allow_empty: bool = True):
    out = []
    for _ in range(n):
        sparse = [int(rng.integers(0, k)) for k in schema.vocab]
        seqs = []
        for k, m in zip(schema.seq_vocab, schema.max_len):
            length = int(rng.integers(0 if allow_empty else 1, m + 2))
            seqs.append([int(v) for v in rng.integers(1, k, size=length)])
        labels = [int(v) for v in rng.integers(0, 2, size=schema.n_tasks)]
        target = int(rng.integers(1, min(schema.seq_vocab)))
        out.append(Instance(sparse, seqs, labels, target))
    return out


@pytest.fixture
def toy_schema():
    return FeatureSchema(n_sparse=2, n_seqs=2, n_tasks=2, vocab=[5, 7], seq_vocab=[9, 9], max_len=[4, 3], dim=8)


@pytest.fixture
def toy_batch(toy_schema):
    rng = np.random.default_rng(123)
    return collate(random_instances(toy_schema, 4, rng), toy_schema)


# one verdict line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
