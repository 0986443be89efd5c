"""Stage functions and the end-to-end runner behind the command line.

Every stage declares the artifacts it reads and writes. The runner checks that
declared inputs exist before a stage starts, hands the stage only those paths,
and stamps each output with the config hash and the stage seed.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attack import GRADIENT, IMPORTANCE, AttackConfig, craft_many
from .consistency import (ConsistencyEstimator, EstimatorConfig, FeatureSupport, fit_estimator,
                          fit_supports)
from .embedding import EmbeddingModel, TripletConfig, train_embedding
from .evaluation import (is_fooled, l0_histogram, prediction_agreement, read_csv_rows, read_results,
                         result_rows, summary_from_rows, validity_row, write_csv, write_report)
from .preprocess import (PreprocessConfig, Preprocessor, SplitSpec, fit_preprocessor, load_dataset,
                         read_csv, save_dataset, split, transform)
from .schema import load_schema, parse_schema
from .surrogate import SolverConfig, SurrogateModel, build_surrogate
from .synth import SynthSpec, synth_generate
from .trees import SHORT, TreeModel, evaluate, train_tree_model

log = logging.getLogger(__name__)

STAGES = ("synth", "preprocess", "train-embedding", "train-surrogate", "train-targets", "attack", "report")
SEED_ENV = "TABATTACK_SEED"


class StageError(RuntimeError):
    """A stage failed; ``record`` is the machine-readable description."""

    def __init__(self, stage: str, message: str, path: str | None = None, kind: str = "StageError"):
        super().__init__(message)
        self.record = {"stage": stage, "error": kind, "message": message, "path": path}


# configuration

@dataclass
class RunConfig:
    seed: int = 0
    name: str = "synthetic"
    paths: dict = field(default_factory=lambda: {"data": None, "schema": None, "out": "run"})
    stages: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    preprocess: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    triplet: dict = field(default_factory=dict)
    embedding_dim: int = 16
    solver: dict = field(default_factory=dict)
    targets: list = field(default_factory=lambda: ["dt", "rf", "gbm"])
    tree_params: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = copy.deepcopy(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        cfg = cls(**d)
        cfg.paths = {"data": None, "schema": None, "out": "run", **cfg.paths}
        for k in cfg.targets:
            if k not in SHORT and k not in SHORT.values():
                raise ValueError(f"unknown target model {k!r}")
        return cfg

    def enabled(self, stage: str) -> bool:
        if stage == "synth" and self.paths.get("data"):
            return bool(self.stages.get("synth", False))
        return bool(self.stages.get(stage, True))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return apply_seed_env(RunConfig())
    p = Path(path)
    if not p.exists():
        raise StageError("config", f"config file not found: {p}", str(p), "FileNotFoundError")
    return apply_seed_env(RunConfig.from_dict(json.loads(p.read_text())))


def apply_seed_env(cfg: RunConfig) -> RunConfig:
    if os.environ.get(SEED_ENV):
        cfg.seed = int(os.environ[SEED_ENV])
    return cfg


def config_hash(doc: dict) -> str:
    """Hash of the canonical JSON config, ignoring where outputs go and how many workers run."""
    doc = copy.deepcopy(doc)
    doc.pop("jobs", None)
    if isinstance(doc.get("paths"), dict):
        doc["paths"] = {k: v for k, v in doc["paths"].items() if k != "out"}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stage_seed(seed: int, stage: str) -> int:
    """Seed for one stage, derived from the global seed and the stage's position."""
    return int(np.random.SeedSequence([int(seed), STAGES.index(stage)]).generate_state(1)[0] % (2 ** 31))


@dataclass
class Meta:
    config_hash: str
    seed: int
    stage: str

    def header(self) -> str:
        return f"config_hash={self.config_hash} seed={self.seed} stage={self.stage}"

    def as_dict(self) -> dict:
        return asdict(self)


def write_json(path, doc: dict, meta: Meta | None = None, indent: int | None = None):
    doc = dict(doc)
    if meta is not None:
        doc["_meta"] = meta.as_dict()
    Path(path).write_text(json.dumps(doc, indent=indent, sort_keys=indent is not None))


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


class StageIO:
    """Path broker for one stage; refuses anything the stage did not declare."""

    def __init__(self, stage: str, inputs: dict, outputs: dict):
        self.stage = stage
        self.inputs = {k: Path(v) for k, v in inputs.items()}
        self.outputs = {k: Path(v) for k, v in outputs.items()}

    def check(self):
        for key, p in self.inputs.items():
            if not p.exists():
                raise StageError(self.stage, f"missing input {key}: {p}", str(p), "FileNotFoundError")
        for p in self.outputs.values():
            p.parent.mkdir(parents=True, exist_ok=True)

    def input(self, key: str) -> Path:
        if key not in self.inputs:
            raise StageError(self.stage, f"stage {self.stage} did not declare input {key!r}")
        return self.inputs[key]

    def output(self, key: str) -> Path:
        if key not in self.outputs:
            raise StageError(self.stage, f"stage {self.stage} did not declare output {key!r}")
        return self.outputs[key]


# stages

def stage_synth(io: StageIO, spec: SynthSpec, meta: Meta):
    table, manifest = synth_generate(spec)
    data = io.output("raw_data")
    data.write_text(f"# {meta.header()}\n" + table.to_csv(index=False, float_format="%.17g"))
    write_json(io.output("raw_schema"), manifest, meta, indent=2)


def stage_preprocess(io: StageIO, pcfg: PreprocessConfig, sspec: SplitSpec, ecfg: EstimatorConfig,
                     meta: Meta):
    schema = load_schema(io.input("raw_schema"))
    table = read_csv(io.input("raw_data"))
    p = fit_preprocessor(table, schema, pcfg)
    ds = transform(p, table)
    parts = split(ds, sspec)
    write_json(io.output("preprocessor"), p.to_dict(), meta, indent=2)
    write_json(io.output("schema"), p.schema.to_dict(), meta, indent=2)
    save_dataset(ds, io.output("full"), meta.header())
    for key in ("train", "validation", "attack"):
        save_dataset(parts[key], io.output(key), meta.header())
    supports = fit_supports(ds, p.schema)
    write_json(io.output("supports"), supports.to_dict(), meta)
    est = fit_estimator(parts["train"], p.schema, supports, ecfg)
    write_json(io.output("estimator"), est.to_dict(), meta)


def load_prepared(io: StageIO, key: str) -> tuple:
    schema = parse_schema(read_json(io.input("schema")))
    p = Preprocessor.from_dict(read_json(io.input("preprocessor")))
    return load_dataset(io.input(key), schema, p), schema


def stage_train_embedding(io: StageIO, tcfg: TripletConfig, dim: int, meta: Meta):
    train, schema = load_prepared(io, "train")
    emb = train_embedding(train, schema, tcfg, e=dim)
    doc = emb.to_dict()
    doc["history"] = emb.history
    write_json(io.output("embedding"), doc, meta)


def stage_train_surrogate(io: StageIO, scfg: SolverConfig, meta: Meta):
    train, schema = load_prepared(io, "train")
    validation, _ = load_prepared(io, "validation")
    emb = EmbeddingModel.from_dict(read_json(io.input("embedding")))
    before = emb.checksum()
    sur = build_surrogate(emb, train, scfg, validation)
    if sur.embedding.checksum() != before:
        raise StageError(meta.stage, "embedding parameters changed while training the solver")
    sur.diagnostics = {"train": evaluate(sur, train), "validation": evaluate(sur, validation),
                       "metric": "auc" if schema.label_space.is_classification else "mse"}
    write_json(io.output("surrogate"), sur.to_dict(), meta)


def stage_train_targets(io: StageIO, kinds: list[str], tree_params: dict, meta: Meta):
    """Train each target; if a surrogate input is declared, also record validation agreement with it."""
    train, schema = load_prepared(io, "train")
    validation, _ = load_prepared(io, "validation")
    sur = SurrogateModel.from_dict(read_json(io.input("surrogate"))) if "surrogate" in io.inputs else None
    for k in kinds:
        m = train_tree_model(k, train, tree_params.get(k), seed=meta.seed)
        doc = m.to_dict()
        doc["diagnostics"] = {"train": evaluate(m, train), "validation": evaluate(m, validation)}
        if sur is not None:
            doc["diagnostics"]["agreement_with_surrogate"] = prediction_agreement(sur, m, validation.X)
        write_json(io.output(f"target_{k}"), doc, meta)


def load_target(path) -> TreeModel:
    return TreeModel.from_dict(read_json(path))


def stage_attack(io: StageIO, acfg: AttackConfig, mode: str, targets: dict[str, str], meta: Meta,
                 jobs: int = 1, trace: bool = False, select: str | None = None):
    """Attack every row of the attack set; ``targets`` maps names to declared input keys.

    In importance mode ``select`` names the target whose importance ranks features.
    """
    attack_set, schema = load_prepared(io, "attack")
    sur = SurrogateModel.from_dict(read_json(io.input("surrogate")))
    supports = FeatureSupport.from_dict(read_json(io.input("supports")))
    est = ConsistencyEstimator.from_dict(read_json(io.input("estimator")))
    models = {name: load_target(io.input(key)) for name, key in targets.items()}
    cfg = AttackConfig(**{**asdict(acfg), "selection_mode": IMPORTANCE if mode == "importance" else GRADIENT})
    ranker = models[select] if mode == "importance" else None
    if mode == "importance" and ranker is None:
        raise StageError(meta.stage, "importance mode needs a target model")
    results = craft_many(sur, attack_set.X, attack_set.y, cfg, supports, schema, ranker, est, jobs)
    rows = result_rows(results, schema, attack_set.preprocessor)
    tau = cfg.tau
    for name, m in models.items():
        for row, r in zip(rows, results):
            row[f"fooled_{name}"] = int(is_fooled(m, r.x_star, r.y, tau)) if r.succeeded else ""
    write_csv(io.output("results"), rows, header=meta.header())
    write_json(io.output("results_schema"), schema.to_dict(), meta, indent=2)
    if trace:
        tdir = io.output("results").parent / f"traces_{io.output('results').stem}"
        tdir.mkdir(exist_ok=True)
        for k, r in enumerate(results):
            write_json(tdir / f"{k:05d}.json", r.trace_dict(), meta)
    return results


def transfer_from_rows(rows: list[dict], name: str) -> float | None:
    """Percentage of perturbed successes whose ``fooled_<name>`` flag is set."""
    col = f"fooled_{name}"
    pool = [r for r in rows if r["succeeded"] == "1" and r["initially_adversarial"] == "0" and r.get(col, "") != ""]
    if not pool:
        return None
    return 100.0 * sum(r[col] == "1" for r in pool) / len(pool)


def stage_report(io: StageIO, dataset: str, meta: Meta):
    """Aggregate results_*.csv files in the results directory into the report bundle."""
    rdir = io.input("results_dir")
    schema = parse_schema(read_json(rdir / "results_gradient.schema.json"))
    base_rows = read_csv_rows(rdir / "results_gradient.csv")
    summary = [summary_from_rows(base_rows, schema, dataset)]
    names = sorted({c[len("fooled_"):] for c in base_rows[0] if c.startswith("fooled_")}) if base_rows else []
    transfer, validity = [], []
    base_results = read_results(rdir / "results_gradient.csv", schema)
    validity.append(validity_row(base_results, dataset, "gradient"))
    for name in names:
        adj_path = rdir / f"results_importance_{name}.csv"
        adjusted = None
        if adj_path.exists():
            adj_rows = read_csv_rows(adj_path)
            adjusted = transfer_from_rows(adj_rows, name)
            validity.append(validity_row(read_results(adj_path, schema), dataset, f"importance_{name}"))
        transfer.append({"dataset": dataset, "model": name, "base_pct": transfer_from_rows(base_rows, name),
                         "adjusted_pct": adjusted})
    hist = l0_histogram(base_results, schema)
    out = io.output("report_dir")
    write_report(out, summary, transfer, hist, validity, meta.header(), meta.as_dict())


# end-to-end runner

def artifact_paths(out: Path, cfg: RunConfig) -> dict[str, Path]:
    p = {
        "raw_data": Path(cfg.paths["data"]) if cfg.paths.get("data") else out / "synth" / "data.csv",
        "raw_schema": Path(cfg.paths["schema"]) if cfg.paths.get("schema") else out / "synth" / "schema.json",
        "preprocessor": out / "prep" / "preprocessor.json",
        "schema": out / "prep" / "schema.json",
        "full": out / "prep" / "full.csv",
        "train": out / "prep" / "train.csv",
        "validation": out / "prep" / "validation.csv",
        "attack": out / "prep" / "attack.csv",
        "supports": out / "prep" / "supports.json",
        "estimator": out / "prep" / "estimator.json",
        "embedding": out / "models" / "embedding.json",
        "surrogate": out / "models" / "surrogate.json",
        "results_dir": out / "results",
        "report_dir": out / "report",
    }
    for k in cfg.targets:
        p[f"target_{k}"] = out / "models" / f"target_{k}.json"
    return p


def _pick(paths: dict, *keys) -> dict:
    return {k: paths[k] for k in keys}


def run(cfg: RunConfig, out: str | Path | None = None, jobs: int | None = None) -> Path:
    """Execute every enabled stage in order; returns the output directory."""
    out = Path(out or cfg.paths.get("out") or "run")
    out.mkdir(parents=True, exist_ok=True)
    jobs = jobs or cfg.jobs
    h = config_hash(asdict(cfg))
    paths = artifact_paths(out, cfg)
    prep_in = _pick(paths, "schema", "preprocessor")
    targets = {k: f"target_{k}" for k in cfg.targets}

    def meta(stage):
        return Meta(h, stage_seed(cfg.seed, stage), stage)

    def execute(stage, inputs, outputs, fn):
        if not cfg.enabled(stage):
            log.info("stage %s disabled", stage)
            return
        io = StageIO(stage, inputs, outputs)
        io.check()
        log.info("stage %s", stage)
        try:
            fn(io)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}", kind=type(exc).__name__) from exc

    if cfg.enabled("synth"):
        m = meta("synth")
        spec = SynthSpec.from_dict({**cfg.synth, "seed": m.seed, "name": cfg.name})
        execute("synth", {}, _pick(paths, "raw_data", "raw_schema"), lambda io: stage_synth(io, spec, m))

    m_pre = meta("preprocess")
    execute("preprocess", _pick(paths, "raw_data", "raw_schema"),
            _pick(paths, "preprocessor", "schema", "full", "train", "validation", "attack", "supports", "estimator"),
            lambda io: stage_preprocess(io, PreprocessConfig.from_dict({**cfg.preprocess, "seed": m_pre.seed}),
                                        SplitSpec(**{**cfg.split, "seed": m_pre.seed}),
                                        EstimatorConfig.from_dict(cfg.estimator), m_pre))

    m_emb = meta("train-embedding")
    execute("train-embedding", {**prep_in, "train": paths["train"]}, _pick(paths, "embedding"),
            lambda io: stage_train_embedding(io, TripletConfig.from_dict({**cfg.triplet, "seed": m_emb.seed}),
                                             cfg.embedding_dim, m_emb))

    m_sur = meta("train-surrogate")
    execute("train-surrogate", {**prep_in, **_pick(paths, "train", "validation", "embedding")},
            _pick(paths, "surrogate"),
            lambda io: stage_train_surrogate(io, SolverConfig.from_dict({**cfg.solver, "seed": m_sur.seed}), m_sur))

    m_tgt = meta("train-targets")
    tgt_in = {**prep_in, **_pick(paths, "train", "validation")}
    if cfg.enabled("train-surrogate") or paths["surrogate"].exists():
        tgt_in["surrogate"] = paths["surrogate"]
    execute("train-targets", tgt_in,
            {f"target_{k}": paths[f"target_{k}"] for k in cfg.targets},
            lambda io: stage_train_targets(io, cfg.targets, cfg.tree_params, m_tgt))

    m_att = meta("attack")
    acfg = AttackConfig.from_dict(cfg.attack)
    attack_in = {**prep_in, **_pick(paths, "attack", "surrogate", "supports", "estimator"),
                 **{f"target_{k}": paths[f"target_{k}"] for k in cfg.targets}}
    rdir = paths["results_dir"]
    runs = [("gradient", None)] + [("importance", k) for k in cfg.targets]
    for mode, sel in runs:
        stem = "results_gradient" if sel is None else f"results_importance_{sel}"
        outputs = {"results": rdir / f"{stem}.csv", "results_schema": rdir / f"{stem}.schema.json"}
        # importance runs score transfer against the model that ranked the features
        tgt = targets if sel is None else {sel: targets[sel]}
        execute("attack", attack_in, outputs,
                lambda io, mode=mode, sel=sel, tgt=tgt: stage_attack(io, acfg, mode, tgt, m_att, jobs, select=sel))

    m_rep = meta("report")
    execute("report", _pick(paths, "results_dir"), _pick(paths, "report_dir"),
            lambda io: stage_report(io, cfg.name, m_rep))
    write_json(out / "run_manifest.json", {"config": asdict(cfg), "config_hash": h, "seed": cfg.seed,
                                          "stages": [s for s in STAGES if cfg.enabled(s)]}, indent=2)
    return out
