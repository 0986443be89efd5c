"""Command-line entry point: one subcommand per pipeline stage plus ``run``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .attack import AttackConfig
from .consistency import EstimatorConfig
from .embedding import TripletConfig
from .pipeline import (SEED_ENV, Meta, StageError, StageIO, config_hash, load_config, run,
                       stage_attack, stage_preprocess, stage_report, stage_synth, stage_train_embedding,
                       stage_train_surrogate, stage_train_targets)
from .preprocess import PreprocessConfig, SplitSpec
from .surrogate import SolverConfig
from .synth import SynthSpec

log = logging.getLogger("tabattack")


def _json_arg(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise StageError("config", f"config file not found: {p}", str(p), "FileNotFoundError")
    return json.loads(p.read_text())


def _seed(args, default: int = 0) -> int:
    if os.environ.get(SEED_ENV):
        return int(os.environ[SEED_ENV])
    return default if getattr(args, "seed", None) is None else args.seed


def _meta(stage: str, args, seed: int) -> Meta:
    doc = {k: v for k, v in vars(args).items() if k not in ("func", "out", "jobs", "verbose")}
    return Meta(config_hash(doc), seed, stage)


def _prep(data: Path) -> dict:
    return {"schema": data / "schema.json", "preprocessor": data / "preprocessor.json"}


def cmd_synth(args):
    seed = _seed(args)
    doc = _json_arg(args.config)
    spec = SynthSpec.from_dict({**doc, **({"n_samples": args.n_samples} if args.n_samples else {}), "seed": seed})
    out = Path(args.out)
    io = StageIO("synth", {}, {"raw_data": out / "data.csv", "raw_schema": out / "schema.json"})
    io.check()
    stage_synth(io, spec, _meta("synth", args, seed))


def cmd_preprocess(args):
    seed = _seed(args)
    doc = _json_arg(args.config)
    out = Path(args.out)
    io = StageIO("preprocess", {"raw_data": args.data, "raw_schema": args.schema},
                 {k: out / f for k, f in [("preprocessor", "preprocessor.json"), ("schema", "schema.json"),
                                          ("full", "full.csv"), ("train", "train.csv"),
                                          ("validation", "validation.csv"), ("attack", "attack.csv"),
                                          ("supports", "supports.json"), ("estimator", "estimator.json")]})
    io.check()
    stage_preprocess(io, PreprocessConfig.from_dict({**doc.get("preprocess", {}), "seed": seed}),
                     SplitSpec(**{**doc.get("split", {}), "seed": seed}),
                     EstimatorConfig.from_dict(doc.get("estimator")), _meta("preprocess", args, seed))


def cmd_train_embedding(args):
    seed = _seed(args)
    data = Path(args.data)
    io = StageIO("train-embedding", {**_prep(data), "train": data / "train.csv"}, {"embedding": args.out})
    io.check()
    doc = _json_arg(args.config)
    tcfg = TripletConfig.from_dict({**doc, "seed": seed, **({"epochs": args.epochs} if args.epochs else {})})
    stage_train_embedding(io, tcfg, args.dim, _meta("train-embedding", args, seed))


def cmd_train_surrogate(args):
    seed = _seed(args)
    data = Path(args.data)
    io = StageIO("train-surrogate", {**_prep(data), "train": data / "train.csv",
                                     "validation": data / "validation.csv", "embedding": args.embedding},
                 {"surrogate": args.out})
    io.check()
    scfg = SolverConfig.from_dict({**_json_arg(args.config), "seed": seed})
    stage_train_surrogate(io, scfg, _meta("train-surrogate", args, seed))


def cmd_train_targets(args):
    seed = _seed(args)
    data = Path(args.data)
    kinds = [k.strip() for k in args.models.split(",") if k.strip()]
    out = Path(args.out)
    inputs = {**_prep(data), "train": data / "train.csv", "validation": data / "validation.csv"}
    if args.surrogate:
        inputs["surrogate"] = args.surrogate
    io = StageIO("train-targets", inputs, {f"target_{k}": out / f"target_{k}.json" for k in kinds})
    io.check()
    stage_train_targets(io, kinds, _json_arg(args.config), _meta("train-targets", args, seed))


def cmd_attack(args):
    seed = _seed(args)
    data = Path(args.data)
    targets = {Path(t).stem.removeprefix("target_"): t for t in (args.target or [])}
    inputs = {**_prep(data), "attack": data / "attack.csv", "supports": data / "supports.json",
              "estimator": data / "estimator.json", "surrogate": args.surrogate}
    inputs.update({f"target_{n}": p for n, p in targets.items()})
    out = Path(args.out)
    select = None
    if args.mode == "importance":
        if len(targets) != 1:
            raise StageError("attack", "importance mode needs exactly one --target")
        select = next(iter(targets))
    stem = "results_gradient" if select is None else f"results_importance_{select}"
    io = StageIO("attack", inputs, {"results": out / f"{stem}.csv", "results_schema": out / f"{stem}.schema.json"})
    io.check()
    acfg = AttackConfig.from_dict(_json_arg(args.config))
    stage_attack(io, acfg, args.mode, {n: f"target_{n}" for n in targets}, _meta("attack", args, seed),
                 args.jobs, args.trace, select)


def cmd_report(args):
    seed = _seed(args)
    io = StageIO("report", {"results_dir": args.results}, {"report_dir": args.out})
    io.check()
    stage_report(io, args.dataset, _meta("report", args, seed))


def cmd_run(args):
    cfg = load_config(args.config)
    if args.seed is not None and not os.environ.get(SEED_ENV):
        cfg.seed = args.seed
    out = Path(args.out or cfg.paths.get("out") or "run")
    try:
        run(cfg, out, args.jobs)
    except StageError as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps(exc.record, indent=2))
        raise
    print(json.dumps({"status": "ok", "out": str(out)}))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tabattack", description="Validity-preserving l0 attacks on tabular models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset and its schema")
    p.add_argument("--config")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="clean, encode, scale and split a raw CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-embedding", help="train the triplet embedding")
    p.add_argument("--data", required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--epochs", type=int)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_embedding)

    p = sub.add_parser("train-surrogate", help="fit the task solver on a frozen embedding")
    p.add_argument("--data", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_surrogate)

    p = sub.add_parser("train-targets", help="train tree-based target models")
    p.add_argument("--data", required=True)
    p.add_argument("--models", default="dt,rf,gbm")
    p.add_argument("--config", help="JSON of per-model hyperparameters")
    p.add_argument("--surrogate", help="surrogate JSON; records validation agreement with each target")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_targets)

    p = sub.add_parser("attack", help="craft adversarial examples for the attack set")
    p.add_argument("--surrogate", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=["gradient", "importance"], default="gradient")
    p.add_argument("--target", action="append", help="target model JSON (repeatable)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="aggregate attack results into report tables")
    p.add_argument("--results", required=True)
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run the whole pipeline from a JSON config")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(json.dumps(exc.record), file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        record = {"stage": args.command, "error": type(exc).__name__, "message": str(exc), "path": None}
        print(json.dumps(record), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
