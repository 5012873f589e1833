"""Training loop, evaluation and representation export."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import silhouette_samples

from . import tensor as tn
from .config import ConfigError
from .embedding import Batch, FeatureSchema, collate
from .metrics import UndefinedMetricError, auc, logloss
from .model import DTRN

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    eval_batch_size: int = 2048

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        out = cls()
        if "lr" in kv:
            out.lr = float(kv["lr"])
        for f in ("batch_size", "epochs", "seed", "eval_batch_size"):
            if f in kv:
                setattr(out, f, int(kv[f]))
        out.__post_init__()
        return out

    def to_kv(self) -> dict[str, str]:
        return {"lr": repr(self.lr), "batch_size": str(self.batch_size), "epochs": str(self.epochs),
                "seed": str(self.seed), "eval_batch_size": str(self.eval_batch_size)}


@dataclass
class TaskMetrics:
    auc: float
    logloss: float


@dataclass
class MetricsReport:
    tasks: list[int]
    per_task: list[TaskMetrics]
    seed: int = 0
    config_hash: str = ""
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def auc_of(self, task: int) -> float:
        return self.per_task[self.tasks.index(task)].auc


def as_batch(data, schema: FeatureSchema) -> Batch:
    return data if isinstance(data, Batch) else collate(data, schema)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_step(model: DTRN, batch: Batch, lr: float) -> float:
    params = model.parameters()
    tn.zero_grads(params)
    with tn.Tape() as tape:
        loss = model.loss(batch)
    tape.backward(loss)
    tn.adam_step(params, lr)
    return loss.item()


def train(model: DTRN, data, cfg: TrainConfig, visit_log: list | None = None) -> list[float]:
    """Seeded mini-batch Adam over ``data``; returns the per-batch loss history."""
    full = as_batch(data, model.schema)
    rng = np.random.default_rng([cfg.seed, 1000])
    history = []
    for epoch in range(cfg.epochs):
        for i, rows in enumerate(iterate_batches(len(full), cfg.batch_size, rng)):
            batch = full.take(rows)
            if visit_log is not None:
                visit_log.extend(batch.index.tolist())
            try:
                loss = train_step(model, batch, cfg.lr)
            except tn.NonFiniteError as e:
                raise TrainingError(f"epoch {epoch} batch {i}: {e}") from e
            if not np.isfinite(loss):
                raise TrainingError(f"epoch {epoch} batch {i}: loss is not finite")
            history.append(loss)
        log.debug("epoch %d done, last loss %.4f", epoch, history[-1] if history else float("nan"))
    return history


def predict(model: DTRN, data, batch_size: int = 2048) -> np.ndarray:
    full = as_batch(data, model.schema)
    out = [model.predict(full.take(rows)) for rows in iterate_batches(len(full), batch_size, None)]
    return np.concatenate(out) if out else np.zeros((0, len(model.tasks)))


def evaluate(model: DTRN, data, batch_size: int = 2048) -> MetricsReport:
    t0 = time.perf_counter()
    full = as_batch(data, model.schema)
    probs = predict(model, full, batch_size)
    labels = model.labels(full)
    per_task = []
    for j in range(len(model.tasks)):
        try:
            a = auc(probs[:, j], labels[:, j])
        except UndefinedMetricError:
            a = float("nan")
        per_task.append(TaskMetrics(a, logloss(probs[:, j], labels[:, j])))
    return MetricsReport(list(model.tasks), per_task, seed=model.seed, wall_time=time.perf_counter() - t0)


def write_report_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "auc", "logloss", "seed", "config_hash", "wall_time"])
        for t, m in zip(report.tasks, report.per_task):
            w.writerow([t, repr(m.auc), repr(m.logloss), report.seed, report.config_hash, f"{report.wall_time:.3f}"])


def collect_representations(model: DTRN, data, which: str, batch_size: int = 1024):
    """Yield (instance_id, task, behavior_or_None, vector) rows in a fixed order.

    ``interest`` gives one row per (instance, task, behavior) with a d-wide
    vector; ``bottom`` one row per (instance, task) with the D-wide refined
    bottom representation.
    """
    if which not in ("interest", "bottom"):
        raise ValueError(f"which must be 'interest' or 'bottom', got {which!r}")
    full = as_batch(data, model.schema)
    d = model.schema.dim
    for rows in iterate_batches(len(full), batch_size, None):
        batch = full.take(rows)
        out = model.forward(batch)
        for r, inst_id in enumerate(batch.index):
            for i, t in enumerate(model.tasks):
                if which == "interest":
                    vec = out.interests[i].data[r]
                    for b in range(model.schema.n_seqs):
                        yield int(inst_id), t, b, vec[b * d:(b + 1) * d]
                else:
                    yield int(inst_id), t, None, out.bottoms[i].data[r]


def export_representations(model: DTRN, data, which: str, path) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header_written = False
        for inst, t, b, vec in collect_representations(model, data, which):
            if not header_written:
                w.writerow(["instance_id", "task", "behavior"] + [f"v{j}" for j in range(len(vec))])
                header_written = True
            w.writerow([inst, t, "-" if b is None else b] + [repr(float(x)) for x in vec])
            n += 1
    return n


def bottom_matrix(model: DTRN, data) -> tuple[np.ndarray, np.ndarray]:
    """Stacked bottom vectors and their task ids, for separation analysis."""
    vecs, tasks = [], []
    for _, t, _, v in collect_representations(model, data, "bottom"):
        vecs.append(v)
        tasks.append(t)
    return np.asarray(vecs), np.asarray(tasks)


def task_silhouettes(model: DTRN, data) -> np.ndarray:
    """Mean silhouette of each task's bottom vectors, task id as cluster label (Euclidean)."""
    vecs, tasks = bottom_matrix(model, data)
    per_point = silhouette_samples(vecs.astype(np.float64), tasks, metric="euclidean")
    return np.array([per_point[tasks == t].mean() for t in model.tasks])


def centroid_distance(model: DTRN, data) -> float:
    """Mean pairwise distance between per-task centroids of the bottom vectors."""
    vecs, tasks = bottom_matrix(model, data)
    cents = np.array([vecs[tasks == t].mean(axis=0) for t in model.tasks])
    diffs = [np.linalg.norm(cents[i] - cents[j]) for i in range(len(cents)) for j in range(i + 1, len(cents))]
    return float(np.mean(diffs)) if diffs else 0.0
