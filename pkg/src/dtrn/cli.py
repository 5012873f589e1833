"""Command-line entry point: generate, train, eval, ablate, stats, export."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import checkpoint
from .ablation import Suite, run_ablation, write_ablation_csv
from .checkpoint import CheckpointError
from .config import ConfigError, config_hash, format_kv, parse_ints, read_kv
from .embedding import FeatureSchema, SchemaError, collate, read_jsonl, validate_instance
from .model import DTRN, ModelConfig
from .synth import GeneratorConfig, generate, sequence_target_stats, write_dataset, write_stats_csv
from .train import TrainConfig, TrainingError, evaluate, export_representations, train, write_report_csv

log = logging.getLogger("dtrn")

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"removed_tasks"} | {"remove_tasks"}


def split_run_config(kv: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    unknown = set(kv) - _TRAIN_KEYS - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    mcfg = ModelConfig.from_kv({k: v for k, v in kv.items() if k in _MODEL_KEYS})
    tcfg = TrainConfig.from_kv({k: v for k, v in kv.items() if k in _TRAIN_KEYS})
    return mcfg, tcfg


def meta_path(ckpt) -> Path:
    return Path(str(ckpt) + ".meta")


def _write_meta(ckpt, schema: FeatureSchema, mcfg: ModelConfig, tcfg: TrainConfig) -> None:
    kv = {f"schema.{k}": v for k, v in schema.to_kv().items()}
    kv.update({f"model.{k}": v for k, v in mcfg.to_kv().items()})
    kv.update({f"train.{k}": v for k, v in tcfg.to_kv().items()})
    meta_path(ckpt).write_text(format_kv(kv))


def load_model(ckpt) -> tuple[DTRN, dict[str, str]]:
    """Rebuild a model from a checkpoint and its ``.meta`` sidecar."""
    mp = meta_path(ckpt)
    if not mp.exists():
        raise CheckpointError(f"missing metadata file {mp}")
    kv = read_kv(mp)
    def pick(prefix):
        return {k[len(prefix):]: v for k, v in kv.items() if k.startswith(prefix)}

    schema = FeatureSchema.from_kv(pick("schema."))
    mcfg = ModelConfig.from_kv(pick("model."))
    tcfg = TrainConfig.from_kv(pick("train."))
    model = DTRN(schema, mcfg, seed=tcfg.seed)
    model.load_state_dict(checkpoint.load(ckpt))
    return model, {**mcfg.to_kv(), **tcfg.to_kv()}


def _read_checked(path, schema: FeatureSchema):
    instances = read_jsonl(path)
    for i, inst in enumerate(instances):
        try:
            validate_instance(inst, schema)
        except SchemaError as e:
            raise SchemaError(f"{path}: line {i + 1}: {e}") from None
    return instances


def cmd_generate(args) -> None:
    cfg = GeneratorConfig.load(args.config)
    write_dataset(generate(cfg), args.out)
    cfg.save(Path(args.out) / "generator.txt")


def cmd_train(args) -> None:
    schema = FeatureSchema.load(args.schema)
    mcfg, tcfg = split_run_config(read_kv(args.config))
    data = collate(_read_checked(args.data, schema), schema)
    model = DTRN(schema, mcfg, seed=tcfg.seed)
    t0 = time.perf_counter()
    history = train(model, data, tcfg)
    log.info("trained %d batches in %.1fs, final loss %.4f", len(history), time.perf_counter() - t0,
             history[-1] if history else float("nan"))
    checkpoint.save(args.out, model.state_dict())
    _write_meta(args.out, schema, mcfg, tcfg)


def cmd_eval(args) -> None:
    model, kv = load_model(args.ckpt)
    report = evaluate(model, collate(_read_checked(args.data, model.schema), model.schema))
    report.config_hash = config_hash(kv)
    write_report_csv(report, args.report)


def cmd_ablate(args) -> None:
    suite = Suite.load(args.suite)
    seeds = parse_ints(args.seeds)
    rows = run_ablation(suite, seeds)
    n_tasks = suite.generator.n_tasks if suite.generator else FeatureSchema.load(Path(suite.data) / "schema.txt").n_tasks
    write_ablation_csv(rows, n_tasks, args.report, suite)


def cmd_stats(args) -> None:
    instances = read_jsonl(args.data)
    if not instances:
        raise SchemaError(f"{args.data} holds no instances")
    n_tasks, n_seqs = len(instances[0].labels), len(instances[0].seqs)
    write_stats_csv(sequence_target_stats(instances, n_tasks, n_seqs), args.out)


def cmd_export(args) -> None:
    model, _ = load_model(args.ckpt)
    data = collate(_read_checked(args.data, model.schema), model.schema)
    export_representations(model, data, args.kind, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtrn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="write a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--schema", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-task AUC / LogLoss of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run an ablation suite over seeds")
    s.add_argument("--suite", required=True)
    s.add_argument("--seeds", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("stats", help="target-in-sequence co-occurrence statistic")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("export", help="dump interest or bottom vectors")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--kind", required=True, choices=["interest", "bottom"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)
    return p


_EXPECTED = (ConfigError, SchemaError, CheckpointError, TrainingError, OSError, ValueError, KeyError, IndexError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except _EXPECTED as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"dtrn {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
