"""Seeded generator of multi-task, multi-behavior recommendation data.

A latent world holds user and item factors plus one unit direction per task
whose pairwise cosines equal a requested matrix C.  For an instance with
user u and target item v the score of task t is

    s_t = scale * <u * dir_t, v> + sum_b A[t, b] * count(v in history_b)
          + sum_b W[t, b] * count(history_b in N_t(v)) + bias_t

and y_t ~ Bernoulli(sigmoid(s_t)).  History b is drawn with replacement,
item i picked with probability proportional to
exp(temperature * <u * g_b, item_i>) where g_b mixes the task directions
with the rows of ``behavior_mix``.  Task directions are built orthogonal to
the all-ones vector, which keeps scores of tasks with zero cosine
uncorrelated.  N_t(v) is the task's neighborhood of v: the ``neighbor_k``
items closest to v under the task-weighted inner product <i * dir_t, v>, so
W rewards histories that match the target along the task's own direction.

Sparse features: 0 is the user id, 1 the target item id, any further
feature is a user bucket (user id modulo its vocabulary).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .config import (ConfigError, format_kv, format_matrix, parse_floats, parse_ints, parse_kv,
                     parse_matrix)
from .embedding import FeatureSchema, Instance, read_jsonl, write_jsonl

SHARD = 4096
_TRAIN, _TEST, _WORLD = 0, 1, 2


@dataclass
class GeneratorConfig:
    n_tasks: int = 4
    n_seqs: int = 3
    n_sparse: int = 2
    n_users: int = 5000
    n_items: int = 300
    latent_dim: int = 8
    bucket_vocab: list[int] = field(default_factory=list)   # one per sparse feature beyond the first two
    task_behavior_weights: list[list[float]] = field(default_factory=list)   # A, T x M
    neighbor_weights: list[list[float]] = field(default_factory=list)        # W, T x M
    neighbor_k: int = 10
    task_conflict: list[list[float]] = field(default_factory=list)           # C, T x T
    behavior_mix: list[list[float]] = field(default_factory=list)            # M x T
    task_bias: list[float] = field(default_factory=list)
    seq_length_means: list[float] = field(default_factory=list)
    max_len: list[int] = field(default_factory=list)
    signal_scale: float = 2.0
    temperature: float = 2.0
    n_instances: int = 20000
    n_test: int = 5000
    seed: int = 0
    dim: int = 16

    def __post_init__(self):
        t, m = self.n_tasks, self.n_seqs
        if min(t, m, self.n_sparse, self.n_users, self.n_items, self.latent_dim) < 1:
            raise ConfigError("counts must be >= 1")
        if self.n_sparse < 2:
            raise ConfigError("n_sparse must be >= 2 (user id and item id)")
        if self.latent_dim < t + 1:
            raise ConfigError(f"latent_dim must be at least n_tasks + 1 = {t + 1}")
        if not self.task_behavior_weights:
            self.task_behavior_weights = [[0.0] * m for _ in range(t)]
        if not self.neighbor_weights:
            self.neighbor_weights = [[0.0] * m for _ in range(t)]
        if not self.task_conflict:
            self.task_conflict = np.eye(t).tolist()
        if not self.behavior_mix:
            self.behavior_mix = [[1.0 if tt == b % t else 0.0 for tt in range(t)] for b in range(m)]
        if not self.task_bias:
            self.task_bias = [0.0] * t
        if not self.seq_length_means:
            self.seq_length_means = [5.0] * m
        if not self.max_len:
            self.max_len = [20] * m
        if not self.bucket_vocab:
            self.bucket_vocab = [16] * (self.n_sparse - 2)
        a = np.asarray(self.task_behavior_weights, dtype=float)
        if a.shape != (t, m) or not np.isfinite(a).all():
            raise ConfigError(f"task_behavior_weights must be a finite {t}x{m} matrix")
        w = np.asarray(self.neighbor_weights, dtype=float)
        if w.shape != (t, m) or not np.isfinite(w).all():
            raise ConfigError(f"neighbor_weights must be a finite {t}x{m} matrix")
        if not 1 <= self.neighbor_k <= self.n_items:
            raise ConfigError(f"neighbor_k must be in [1, n_items={self.n_items}]")
        c = np.asarray(self.task_conflict, dtype=float)
        if c.shape != (t, t) or not np.allclose(c, c.T) or not np.allclose(np.diag(c), 1.0):
            raise ConfigError("task_conflict must be symmetric with unit diagonal")
        if np.asarray(self.behavior_mix).shape != (m, t):
            raise ConfigError(f"behavior_mix must be {m}x{t}")
        if len(self.task_bias) != t:
            raise ConfigError(f"task_bias needs {t} entries")
        if len(self.seq_length_means) != m or min(self.seq_length_means) < 0:
            raise ConfigError(f"seq_length_means needs {m} non-negative entries")
        if len(self.max_len) != m or min(self.max_len) < 1:
            raise ConfigError(f"max_len needs {m} entries >= 1")
        if len(self.bucket_vocab) != self.n_sparse - 2:
            raise ConfigError(f"bucket_vocab needs {self.n_sparse - 2} entries")

    # -- kv io ---------------------------------------------------------------

    _MATRIX = ("task_behavior_weights", "neighbor_weights", "task_conflict", "behavior_mix")
    _FLOATS = ("task_bias", "seq_length_means")
    _INTS = ("max_len", "bucket_vocab")

    def to_kv(self) -> dict[str, str]:
        kv = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in self._MATRIX:
                kv[f.name] = format_matrix(v)
            elif f.name in self._FLOATS + self._INTS:
                kv[f.name] = ",".join(str(x) for x in v)
            else:
                kv[f.name] = str(v)
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "GeneratorConfig":
        args = {}
        known = {f.name: f for f in fields(cls)}
        for k, v in kv.items():
            if k not in known:
                raise ConfigError(f"unknown generator key {k!r}")
            if k in cls._MATRIX:
                args[k] = parse_matrix(v)
            elif k in cls._FLOATS:
                args[k] = parse_floats(v)
            elif k in cls._INTS:
                args[k] = parse_ints(v)
            elif k in ("signal_scale", "temperature"):
                args[k] = float(v)
            else:
                args[k] = int(v)
        return cls(**args)

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        return cls.from_kv(parse_kv(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(format_kv(self.to_kv()))

    def schema(self) -> FeatureSchema:
        vocab = [self.n_users, self.n_items + 1] + list(self.bucket_vocab)
        return FeatureSchema(self.n_sparse, self.n_seqs, self.n_tasks, vocab,
                             [self.n_items + 1] * self.n_seqs, list(self.max_len), self.dim)


def conflict_config(**overrides) -> GeneratorConfig:
    """The default conflict setting: four tasks, the last one sparse (about 1% positives).

    Tasks 0/1 share a direction family, tasks 2/3 point against it; each
    behavior sequence is drawn along a different task's direction.
    """
    base = dict(
        n_tasks=4, n_seqs=3, n_sparse=2, n_users=5000, n_items=300, latent_dim=8,
        task_conflict=[[1.0, 0.5, -0.3, -0.5],
                       [0.5, 1.0, -0.3, -0.5],
                       [-0.3, -0.3, 1.0, 0.2],
                       [-0.5, -0.5, 0.2, 1.0]],
        behavior_mix=[[1.0, 0.5, 0.0, 0.0],
                      [0.0, 0.0, 1.0, 0.0],
                      [0.0, 0.0, 0.0, 1.0]],
        task_behavior_weights=[[0.8, 0.0, 0.0],
                               [0.6, 0.3, 0.0],
                               [0.0, 0.8, 0.0],
                               [0.0, 0.0, 1.0]],
        task_bias=[-0.5, -1.5, -2.0, -5.5],
        seq_length_means=[15.0, 10.0, 6.0],
        max_len=[20, 15, 10],
        n_instances=20000, n_test=5000, seed=7, dim=16,
    )
    base.update(overrides)
    return GeneratorConfig(**base)


# ---------------------------------------------------------------------------
# latent world


def task_directions(conflict, latent_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit rows with pairwise cosines equal to ``conflict``, each orthogonal to 1."""
    c = np.asarray(conflict, dtype=float)
    w, v = np.linalg.eigh(c)
    if w.min() < -1e-10:
        raise ConfigError(f"task_conflict is not positive semidefinite (min eigenvalue {w.min():.3g})")
    factor = v * np.sqrt(np.clip(w, 0.0, None))          # factor @ factor.T == c
    t = c.shape[0]
    ones = np.ones((latent_dim, 1)) / np.sqrt(latent_dim)
    basis = rng.standard_normal((latent_dim, t))
    basis -= ones @ (ones.T @ basis)
    q, _ = np.linalg.qr(basis)                           # latent_dim x t, orthonormal, orthogonal to 1
    return factor @ q.T


@dataclass
class LatentWorld:
    user_factors: np.ndarray
    item_factors: np.ndarray      # row i-1 is item id i
    task_directions: np.ndarray
    behavior_directions: np.ndarray
    neighbors: np.ndarray | None = None   # (T, n_items, n_items) bool, row v-1 marks N_t(v)

    @classmethod
    def build(cls, cfg: GeneratorConfig) -> "LatentWorld":
        rng = np.random.default_rng([cfg.seed, _WORLD])
        dirs = task_directions(cfg.task_conflict, cfg.latent_dim, rng)
        users = rng.standard_normal((cfg.n_users, cfg.latent_dim))
        items = rng.standard_normal((cfg.n_items, cfg.latent_dim))
        mix = np.asarray(cfg.behavior_mix, dtype=float) @ dirs
        norms = np.linalg.norm(mix, axis=1, keepdims=True)
        fallback = rng.standard_normal(mix.shape)
        mix = np.where(norms > 1e-12, mix, fallback)
        mix /= np.linalg.norm(mix, axis=1, keepdims=True)
        neighbors = None
        if np.any(np.asarray(cfg.neighbor_weights) != 0):
            neighbors = np.stack([task_neighborhoods(items, d, cfg.neighbor_k) for d in dirs])
        return cls(users, items, dirs, mix, neighbors)


def task_neighborhoods(items: np.ndarray, direction: np.ndarray, k: int) -> np.ndarray:
    """Boolean (n_items, n_items): row v marks the k items with the largest <i * direction, v>."""
    sim = (items * direction) @ items.T
    top = np.argpartition(-sim, k - 1, axis=1)[:, :k]
    out = np.zeros(sim.shape, dtype=bool)
    np.put_along_axis(out, top, True, axis=1)
    return out


def _sample_rows(rng: np.random.Generator, logits: np.ndarray, n: int) -> np.ndarray:
    """n draws with replacement from each row's softmax, as 0-based column indices."""
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    cum = np.cumsum(p, axis=1)
    cum /= cum[:, -1:]
    u = rng.random((logits.shape[0], n))
    idx = np.empty((logits.shape[0], n), dtype=np.int64)
    for j in range(n):
        idx[:, j] = (cum < u[:, j:j + 1]).sum(axis=1)
    return np.minimum(idx, logits.shape[1] - 1)


@dataclass
class Shard:
    instances: list[Instance]
    scores: np.ndarray   # (n, T) pre-sigmoid scores


def _generate_shard(cfg: GeneratorConfig, world: LatentWorld, split: int, shard: int, n: int) -> Shard:
    rng = np.random.default_rng([cfg.seed, split, shard])
    users = rng.integers(0, cfg.n_users, size=n)
    uf = world.user_factors[users]
    # target drawn along the all-ones direction of the user factors
    target_logits = cfg.temperature * (uf @ world.item_factors.T) / np.sqrt(cfg.latent_dim)
    targets = _sample_rows(rng, target_logits, 1)[:, 0] + 1
    histories = []
    counts = np.zeros((n, cfg.n_seqs))
    near = np.zeros((n, cfg.n_tasks, cfg.n_seqs))
    for b in range(cfg.n_seqs):
        lengths = np.minimum(rng.poisson(cfg.seq_length_means[b], size=n), cfg.max_len[b])
        logits = cfg.temperature * ((uf * world.behavior_directions[b]) @ world.item_factors.T)
        width = int(lengths.max()) if n else 0
        draws = _sample_rows(rng, logits, max(width, 1)) + 1
        hist = [draws[r, :lengths[r]] for r in range(n)]
        histories.append(hist)
        counts[:, b] = [(h == v).sum() for h, v in zip(hist, targets)]
        if world.neighbors is not None:
            valid = np.arange(draws.shape[1])[None, :] < lengths[:, None]
            for t in range(cfg.n_tasks):
                hit = np.take_along_axis(world.neighbors[t][targets - 1], draws - 1, axis=1)
                near[:, t, b] = (hit & valid).sum(axis=1)
    vf = world.item_factors[targets - 1]
    latent = ((uf * vf) @ world.task_directions.T) * cfg.signal_scale
    scores = latent + counts @ np.asarray(cfg.task_behavior_weights).T + np.asarray(cfg.task_bias)
    scores += np.einsum("ntb,tb->nt", near, np.asarray(cfg.neighbor_weights))
    labels = (rng.random((n, cfg.n_tasks)) < 1.0 / (1.0 + np.exp(-scores))).astype(int)
    buckets = [users % v for v in cfg.bucket_vocab]
    out = []
    for r in range(n):
        sparse = [int(users[r]), int(targets[r])] + [int(bk[r]) for bk in buckets]
        out.append(Instance(sparse, [histories[b][r].tolist() for b in range(cfg.n_seqs)],
                            labels[r].tolist(), int(targets[r])))
    return Shard(out, scores)


def generate_split(cfg: GeneratorConfig, n: int, split: int = _TRAIN, world: LatentWorld | None = None,
                   with_scores: bool = False):
    world = world or LatentWorld.build(cfg)
    shards = []
    for s, start in enumerate(range(0, n, SHARD)):
        shards.append(_generate_shard(cfg, world, split, s, min(SHARD, n - start)))
    instances = [inst for sh in shards for inst in sh.instances]
    if with_scores:
        scores = np.concatenate([sh.scores for sh in shards]) if shards else np.zeros((0, cfg.n_tasks))
        return instances, scores
    return instances


@dataclass
class Dataset:
    schema: FeatureSchema
    train: list[Instance]
    test: list[Instance]


def generate(cfg: GeneratorConfig) -> Dataset:
    world = LatentWorld.build(cfg)
    return Dataset(cfg.schema(),
                   generate_split(cfg, cfg.n_instances, _TRAIN, world),
                   generate_split(cfg, cfg.n_test, _TEST, world))


def write_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.schema.save(out / "schema.txt")
    write_jsonl(out / "train.jsonl", ds.train)
    write_jsonl(out / "test.jsonl", ds.test)


def read_dataset(out_dir) -> Dataset:
    d = Path(out_dir)
    return Dataset(FeatureSchema.load(d / "schema.txt"), read_jsonl(d / "train.jsonl"), read_jsonl(d / "test.jsonl"))


# ---------------------------------------------------------------------------
# co-occurrence statistic


def sequence_target_stats(instances, n_tasks: int, n_seqs: int) -> np.ndarray:
    """Mean count of the target item in each behavior sequence over each task's positives.

    Entry (t, b) is NaN when task t has no positive instance.
    """
    if not instances:
        return np.full((n_tasks, n_seqs), np.nan)
    labels = np.array([inst.labels for inst in instances], dtype=bool)
    counts = np.array([[np.count_nonzero(np.asarray(s) == inst.target) for s in inst.seqs] for inst in instances],
                      dtype=float)
    out = np.full((n_tasks, n_seqs), np.nan)
    for t in range(n_tasks):
        pos = labels[:, t]
        if pos.any():
            out[t] = counts[pos].mean(axis=0)
    return out


def write_stats_csv(stats: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "behavior", "avg_count"])
        for t in range(stats.shape[0]):
            for b in range(stats.shape[1]):
                v = stats[t, b]
                w.writerow([t, b, "absent" if np.isnan(v) else repr(float(v))])
