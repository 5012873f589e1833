"""Full model: embeddings -> interest extraction -> refinement -> multi-task head.

Variants toggle the two task-specific pieces:

=========  ===================  =====================
variant    interest             refinement
=========  ===================  =====================
baseline   shared (no hyper)    none
tim        per task             none
trm        shared (no hyper)    per-task gate
dtrn       per task             per-task gate
=========  ===================  =====================

Each component draws its initial weights from its own RNG substream of the
model seed, so variants built from one seed share every common weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tn
from .config import ConfigError, parse_ints
from .embedding import Batch, EmbeddingBank, FeatureSchema
from .heads import HeadConfig, TaskLogits, build_head, parse_chains, restrict_chains
from .nn import Module
from .tensor import Tensor
from .transformer import ConditionalTransformer, TransformerConfig
from .trm import RefineNet, build_raw

VARIANTS = {
    "baseline": (False, False),
    "tim": (True, False),
    "trm": (False, True),
    "dtrn": (True, True),
}


@dataclass
class ModelConfig:
    variant: str = "dtrn"
    head: str = "share_bottom"
    heads: int = 2
    d_f: int = 32
    enc_layers: int = 1
    dec_layers: int = 1
    hyper_hidden: int = 0          # 0 -> 2*d
    injection_site: str = "ln"
    trm_hidden: int = 0            # 0 -> D/4
    n_experts: int = 4
    expert_hidden: int = 32
    tower_hidden: int = 16
    aitm_chains: str = ""
    removed_tasks: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")

    @property
    def use_tim(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def use_trm(self) -> bool:
        return VARIANTS[self.variant][1]

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        out = cls()
        for f in ("variant", "head", "injection_site", "aitm_chains"):
            if f in kv:
                setattr(out, f, kv[f])
        for f in ("heads", "d_f", "enc_layers", "dec_layers", "hyper_hidden", "trm_hidden",
                  "n_experts", "expert_hidden", "tower_hidden"):
            if f in kv:
                setattr(out, f, int(kv[f]))
        if kv.get("remove_tasks", "").strip() not in ("", "none"):
            out.removed_tasks = parse_ints(kv["remove_tasks"])
        out.__post_init__()
        return out

    def to_kv(self) -> dict[str, str]:
        kv = {k: str(v) for k, v in asdict(self).items() if k != "removed_tasks"}
        kv["remove_tasks"] = ",".join(map(str, self.removed_tasks)) or "none"
        return kv


@dataclass
class ModelOutput:
    logits: TaskLogits
    interests: list[Tensor]         # per active task, (B, M*d)
    raws: list[Tensor]              # per active task, (B, D)
    bottoms: list[Tensor]           # per active task, (B, D)
    refines: list[Tensor] = field(default_factory=list)


class DTRN(Module):
    def __init__(self, schema: FeatureSchema, cfg: ModelConfig, seed: int = 0):
        self.schema = schema
        self.cfg = cfg
        self.seed = seed
        self.tasks = [t for t in range(schema.n_tasks) if t not in set(cfg.removed_tasks)]
        if not self.tasks:
            raise ConfigError("every task was removed")
        for t in cfg.removed_tasks:
            if not 0 <= t < schema.n_tasks:
                raise ConfigError(f"removed task {t} outside [0, {schema.n_tasks})")
        d = schema.dim
        width = schema.raw_width
        self.bank = EmbeddingBank(schema, np.random.default_rng([seed, 0]))
        tcfg = TransformerConfig(d=d, heads=cfg.heads, d_f=cfg.d_f, enc_layers=cfg.enc_layers,
                                 dec_layers=cfg.dec_layers, hyper_hidden=cfg.hyper_hidden or None,
                                 injection_site=cfg.injection_site)
        self.tim = ConditionalTransformer(tcfg, np.random.default_rng([seed, 1]), conditioned=cfg.use_tim)
        self.trm = None
        if cfg.use_trm:
            self.trm = RefineNet(width, len(self.tasks), np.random.default_rng([seed, 2]),
                                 hidden=cfg.trm_hidden or None)
        preds = {}
        if cfg.head == "aitm":
            preds = restrict_chains(parse_chains(cfg.aitm_chains, schema.n_tasks), self.tasks)
        hcfg = HeadConfig(kind=cfg.head, n_tasks=len(self.tasks), n_experts=cfg.n_experts,
                          expert_hidden=cfg.expert_hidden, tower_hidden=cfg.tower_hidden,
                          predecessors=preds)
        self.head = build_head(hcfg, width, np.random.default_rng([seed, 3]))

    def labels(self, batch: Batch) -> np.ndarray:
        return batch.labels[:, self.tasks]

    def forward(self, batch: Batch) -> ModelOutput:
        sparse = self.bank.embed_sparse(batch.sparse)
        per_behavior = self.tim.all_interests(self.bank, batch, self.tasks)   # M x (C, B, d)
        stacked = tn.concat(per_behavior, axis=-1)                             # (C, B, M*d)
        if stacked.shape[0] == 1:
            shared = tn.reshape(stacked, stacked.shape[1:])
            interests = [shared] * len(self.tasks)
            raw = build_raw(sparse, shared, self.schema.raw_width)
            raws = [raw] * len(self.tasks)
        else:
            interests = [stacked[i] for i in range(len(self.tasks))]
            raws = [build_raw(sparse, it, self.schema.raw_width) for it in interests]
        refines = []
        if self.trm is not None:
            reps = []
            for i, raw in enumerate(raws):
                rep = self.trm.refine(raw, i)
                refines.append(rep.refine)
                reps.append(rep.refined)
        else:
            reps = raws
        return ModelOutput(self.head(reps), interests, raws, reps, refines)

    __call__ = forward

    def loss(self, batch: Batch) -> Tensor:
        out = self.forward(batch)
        return tn.bce_with_logits(out.logits.o, self.labels(batch))

    def predict(self, batch: Batch) -> np.ndarray:
        """Probabilities (B, active tasks) without recording a tape."""
        return self.forward(batch).logits.y_hat.data

    def tim_parameter_count(self) -> int:
        """Base Transformer + hypernetwork + task/behavior type tables."""
        n = self.tim.num_parameters()
        if self.cfg.use_tim:
            n += self.bank.task_table.data.size + self.bank.behavior_type_table.data.size
        return n
