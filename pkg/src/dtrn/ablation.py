"""Ablation runner: variants x heads x injection sites x task-removal masks over seeds.

A suite is a flat key-value file::

    variants = baseline,tim,trm,dtrn
    heads = share_bottom,mmoe
    injection_sites = ln
    remove_tasks = none;3          # one mask per ';'-separated entry
    generator = gen.txt            # or data = <dataset dir>; default: built-in conflict setting
    gen.n_instances = 50000        # overrides for the generator config
    model.d_f = 32                 # overrides for every model config
    train.lr = 0.001               # overrides for the train config
"""

from __future__ import annotations

import csv
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, config_hash, parse_kv
from .embedding import collate
from .heads import HEAD_KINDS
from .model import DTRN, VARIANTS, ModelConfig
from .synth import GeneratorConfig, conflict_config, generate, read_dataset
from .train import TrainConfig, evaluate, train
from .transformer import INJECTION_SITES

log = logging.getLogger(__name__)

_ALIASES = {"+tim": "tim", "+trm": "trm", "tim-only": "tim", "trm-only": "trm", "shared-bottom": "baseline"}


def canonical_variant(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return key


def _split_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _parse_masks(text: str) -> list[tuple[int, ...]]:
    masks = []
    for part in text.split(";"):
        part = part.strip()
        if part in ("", "none"):
            masks.append(())
        else:
            masks.append(tuple(int(v) for v in part.split(",")))
    return masks or [()]


@dataclass
class Suite:
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    heads: list[str] = field(default_factory=lambda: ["share_bottom"])
    injection_sites: list[str] = field(default_factory=lambda: ["ln"])
    remove_tasks: list[tuple[int, ...]] = field(default_factory=lambda: [()])
    data: str | None = None
    generator: GeneratorConfig | None = None
    model: dict[str, str] = field(default_factory=dict)
    train: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.variants = [canonical_variant(v) for v in self.variants]
        for h in self.heads:
            if h not in HEAD_KINDS:
                raise ConfigError(f"unknown head {h!r}")
        for s in self.injection_sites:
            if s not in INJECTION_SITES:
                raise ConfigError(f"unknown injection site {s!r}")

    @classmethod
    def from_kv(cls, kv: dict[str, str], base_dir: Path | None = None) -> "Suite":
        base_dir = base_dir or Path(".")
        out = {"model": {}, "train": {}}
        gen_over = {}
        gen_file = None
        for k, v in kv.items():
            if k == "variants":
                out["variants"] = _split_list(v)
            elif k == "heads":
                out["heads"] = _split_list(v)
            elif k == "injection_sites":
                out["injection_sites"] = _split_list(v)
            elif k == "remove_tasks":
                out["remove_tasks"] = _parse_masks(v)
            elif k == "data":
                out["data"] = str(base_dir / v)
            elif k == "generator":
                gen_file = base_dir / v
            elif k.startswith("gen."):
                gen_over[k[4:]] = v
            elif k.startswith("model."):
                out["model"][k[6:]] = v
            elif k.startswith("train."):
                out["train"][k[6:]] = v
            else:
                raise ConfigError(f"unknown suite key {k!r}")
        if "data" not in out:
            if gen_file is not None:
                gkv = parse_kv(gen_file.read_text())
                gkv.update(gen_over)
                out["generator"] = GeneratorConfig.from_kv(gkv)
            else:
                defaults = conflict_config().to_kv()
                defaults.update(gen_over)
                out["generator"] = GeneratorConfig.from_kv(defaults)
        return cls(**out)

    @classmethod
    def load(cls, path) -> "Suite":
        path = Path(path)
        return cls.from_kv(parse_kv(path.read_text()), path.parent)

    def combos(self):
        return list(itertools.product(self.variants, self.heads, self.injection_sites, self.remove_tasks))


@dataclass
class AblationRow:
    variant: str
    head: str
    injection_site: str
    removed: tuple[int, ...]
    seeds: list[int]
    auc: np.ndarray       # (n_seeds, T), NaN for removed tasks
    logloss: np.ndarray   # (n_seeds, T)
    wall_time: float = 0.0

    def mean_auc(self, task: int) -> float:
        return float(np.mean(self.auc[:, task]))


def _load_data(suite: Suite):
    if suite.data is not None:
        ds = read_dataset(suite.data)
    else:
        ds = generate(suite.generator)
    return ds.schema, collate(ds.train, ds.schema), collate(ds.test, ds.schema)


def run_ablation(suite: Suite, seeds, data=None, progress=None) -> list[AblationRow]:
    """Train every combination in ``suite`` for every seed and evaluate on the test split.

    ``data`` may supply a pre-built (schema, train_batch, test_batch) triple.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("need at least one seed")
    schema, train_b, test_b = data if data is not None else _load_data(suite)
    rows = []
    for variant, head, site, removed in suite.combos():
        mkv = dict(suite.model, variant=variant, head=head, injection_site=site,
                   remove_tasks=",".join(map(str, removed)) or "none")
        mcfg = ModelConfig.from_kv(mkv)
        aucs = np.full((len(seeds), schema.n_tasks), np.nan)
        lls = np.full((len(seeds), schema.n_tasks), np.nan)
        t0 = time.perf_counter()
        for i, seed in enumerate(seeds):
            tcfg = TrainConfig.from_kv(dict(suite.train, seed=str(seed)))
            model = DTRN(schema, mcfg, seed=seed)
            train(model, train_b, tcfg)
            report = evaluate(model, test_b, tcfg.eval_batch_size)
            for t, m in zip(report.tasks, report.per_task):
                aucs[i, t] = m.auc
                lls[i, t] = m.logloss
            if progress is not None:
                progress(variant, head, site, removed, seed, report)
        rows.append(AblationRow(variant, head, site, removed, seeds, aucs, lls, time.perf_counter() - t0))
        log.info("%s/%s/%s removed=%s done in %.1fs", variant, head, site, removed, rows[-1].wall_time)
    return rows


def _sd(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def write_ablation_csv(rows: list[AblationRow], n_tasks: int, path, suite: Suite | None = None) -> None:
    header = ["variant", "head", "injection_site", "removed_tasks", "n_seeds"]
    for t in range(n_tasks):
        header += [f"auc_mean_{t}", f"auc_sd_{t}", f"logloss_mean_{t}", f"logloss_sd_{t}"]
    header.append("config_hash")
    chash = config_hash({**(suite.model if suite else {}), **(suite.train if suite else {})})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            line = [r.variant, r.head, r.injection_site, ",".join(map(str, r.removed)) or "none", len(r.seeds)]
            for t in range(n_tasks):
                col_a, col_l = r.auc[:, t], r.logloss[:, t]
                if np.isnan(col_a).all() and np.isnan(col_l).all():
                    line += ["", "", "", ""]
                else:
                    line += [f"{np.mean(col_a):.6f}", f"{_sd(col_a):.6f}",
                             f"{np.mean(col_l):.6f}", f"{_sd(col_l):.6f}"]
            line.append(chash)
            w.writerow(line)
