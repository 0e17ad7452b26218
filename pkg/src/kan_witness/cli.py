"""Command line pipeline: data generation, training, bootstrap ranking and witness extraction.

All randomness is derived from the root ``seed`` of the run configuration
by stage name, so re-running a command with the same configuration
reproduces its artifacts byte for byte.  Artifacts and a ``manifest.json``
(config snapshot, versions, SHA-256 digests, timings) go to ``--out``.

Exit codes: 0 success, 2 usage/config/schema error, 3 runtime/training error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import dataset as ds
from . import ranking, symbolic
from .kan import ClassificationReport, KanModel, ShapeError, TrainConfig, TrainingDivergedError, evaluate, predict, train
from .qstate import Family

log = logging.getLogger("kan_witness")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    family: str = "general9"
    n: int = 5000
    seed: int = 0
    noise_sigma: float = 0.0
    train_fraction: float = 0.70
    validation_fraction: float = 0.20
    test_fraction: float = 0.10
    architecture: str = ""
    epochs: int = 60
    batch_size: int = 256
    learning_rate: float = 1e-2
    l1_activation_penalty: float = 0.0
    early_stop_patience: int = 20
    lr_schedule: str = "constant"
    bootstrap_m: int = 3
    jobs: int = 1
    out: str = "runs/default"

    def split_spec(self) -> ds.SplitSpec:
        return ds.SplitSpec(self.train_fraction, self.validation_fraction, self.test_fraction)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.seed,
                           self.l1_activation_penalty, self.early_stop_patience, self.lr_schedule)

    def arch(self, family: Family | None = None) -> tuple[int, ...]:
        if self.architecture:
            return parse_architecture(self.architecture)
        return ranking.FULL_ARCHITECTURES[family or Family(self.family)]

    def validate(self) -> None:
        try:
            Family(self.family)
            self.split_spec()
            self.train_config()
            if self.architecture:
                parse_architecture(self.architecture)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.n < 2:
            raise ConfigError(f"n must be at least 2, got {self.n}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.bootstrap_m < 1:
            raise ConfigError("bootstrap_m must be at least 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")


PROFILES = {
    "smoke": {"n": 5000, "bootstrap_m": 3, "epochs": 60},
    "paper": {"n": 100_000, "bootstrap_m": 20, "epochs": 200},
}


def parse_architecture(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        widths = tuple(int(w) for w in text)
    else:
        try:
            widths = tuple(int(w) for w in str(text).replace(",", "-").split("-") if w.strip())
        except ValueError:
            raise ConfigError(f"bad architecture {text!r}") from None
    if len(widths) < 2 or widths[-1] != 1 or min(widths) < 1:
        raise ConfigError(f"architecture must be positive widths ending in 1, got {text!r}")
    return widths


def load_config(args) -> RunConfig:
    """Profile defaults, then the config file, then explicit flags."""
    values: dict = {}
    values.update(PROFILES[args.profile])
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
        values.update(file_values)
    names = {f.name for f in fields(RunConfig)}
    for key in names:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if isinstance(values.get("architecture"), (list, tuple)):
        values["architecture"] = "-".join(str(w) for w in values["architecture"])
    types = {f.name: f.type for f in fields(RunConfig)}
    try:
        for key, val in values.items():
            values[key] = {"int": int, "float": float, "str": str}[types[key]](val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# -- artifacts -------------------------------------------------------------------


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Stage:
    """Collects a stage's artifacts and writes them only when the stage succeeds."""

    def __init__(self, cfg: RunConfig, name: str, args=None):
        self.cfg = cfg
        skip = {f.name for f in fields(RunConfig)} | {"config", "profile", "verbose"}
        self.args = {k: v for k, v in vars(args or argparse.Namespace()).items() if k not in skip}
        self.name = name
        self.out = Path(cfg.out)
        self.pending: dict[Path, str] = {}
        self.start = time.perf_counter()

    def add(self, relpath: str, text: str) -> Path:
        path = self.out / relpath
        self.pending[path] = text
        return path

    def commit(self, extra: dict | None = None) -> dict:
        for path in self.pending:
            path.parent.mkdir(parents=True, exist_ok=True)
        for path, text in self.pending.items():
            ds.atomic_write_text(path, text)
        entry = {
            "config": asdict(self.cfg),
            "args": self.args,
            "artifacts": {str(p.relative_to(self.out)): sha256_text(t) for p, t in self.pending.items()},
            "seconds": round(time.perf_counter() - self.start, 3),
        }
        if extra:
            entry.update(extra)
        update_manifest(self.out, self.name, entry, self.cfg)
        return entry


def versions() -> dict:
    return {"kan_witness": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def update_manifest(out: Path, stage: str, entry: dict, cfg: RunConfig) -> None:
    path = out / "manifest.json"
    manifest = {}
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    manifest["config"] = asdict(cfg)
    manifest["versions"] = versions()
    manifest.setdefault("stages", {})[stage] = entry
    out.mkdir(parents=True, exist_ok=True)
    ds.atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True))


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _data_path(cfg: RunConfig, given, part: str) -> Path:
    return _require(given or Path(cfg.out) / "data" / f"{part}.csv")


def _load_model(path) -> KanModel:
    try:
        return KanModel.load(_require(path))
    except (KeyError, json.JSONDecodeError) as exc:
        raise ds.SchemaError(f"malformed model file {path}: {exc}") from None


def _dataset_for_model(data: ds.Dataset, model: KanModel) -> ds.Dataset:
    if model.observables:
        return ds.project(data, model.observables)
    if data.features.shape[1] != model.architecture[0]:
        raise ds.SchemaError(f"dataset has {data.features.shape[1]} features, model expects {model.architecture[0]}")
    return data


# -- commands --------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> dict:
    stage = Stage(cfg, "gen-data", args)
    data = ds.generate_dataset(cfg.family, cfg.n, cfg.seed, cfg.noise_sigma)
    parts = ds.split(data, cfg.split_spec(), cfg.seed)
    stage.add("data/dataset.csv", ds.dataset_to_text(data))
    for part in parts:
        stage.add(f"data/{part.meta['split']}.csv", ds.dataset_to_text(part))
    entry = stage.commit({"rows": len(data), "entangled": data.n_entangled, "separable": data.n_separable})
    print(f"wrote {len(data)} rows ({data.n_entangled} entangled) to {Path(cfg.out) / 'data'}")
    return entry


def cmd_split(cfg: RunConfig, args) -> dict:
    stage = Stage(cfg, "split", args)
    data = ds.load_dataset(_require(args.dataset))
    for part in ds.split(data, cfg.split_spec(), cfg.seed):
        stage.add(f"data/{part.meta['split']}.csv", ds.dataset_to_text(part))
    return stage.commit()


def cmd_train(cfg: RunConfig, args) -> dict:
    stage = Stage(cfg, f"train-{args.name}", args)
    tr = ds.load_dataset(_data_path(cfg, args.train, "train"))
    va = ds.load_dataset(_data_path(cfg, args.validation, "validation"))
    te = ds.load_dataset(_data_path(cfg, args.test, "test"))
    arch = cfg.arch(tr.family)
    if arch[0] != len(tr.observables):
        raise ds.SchemaError(f"architecture {'-'.join(map(str, arch))} expects {arch[0]} features, "
                             f"dataset has {len(tr.observables)}")
    config = cfg.train_config()
    model = KanModel.create(arch, seed=config.seed, observables=tr.observables)
    best, hist = train(model, tr, va, config, log=log.info)
    best.meta["dataset_seed"] = tr.seed
    best.meta["noise_sigma"] = tr.noise_sigma
    report = evaluate(best, te)
    stage.add(f"models/{args.name}.json", best.dumps())
    stage.add(f"models/{args.name}-report.json", _dump({
        "model": best.name, "test": report.to_dict(),
        "history": {"epochs_run": len(hist.train_loss), "best_epoch": hist.best_epoch,
                    "best_val_accuracy": hist.best_val_accuracy, "initial_loss": hist.initial_loss,
                    "best_train_loss": hist.best_train_loss},
    }))
    print(report.format())
    return stage.commit({"accuracy": report.accuracy})


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    stage = Stage(cfg, f"evaluate-{args.name}", args)
    model = _load_model(args.model)
    data = _dataset_for_model(ds.load_dataset(_require(args.dataset)), model)
    report = evaluate(model, data)
    stage.add(f"reports/{args.name}.json", _dump(report.to_dict()))
    print(report.format())
    return stage.commit({"accuracy": report.accuracy})


def cmd_bootstrap(cfg: RunConfig, args) -> dict:
    stage = Stage(cfg, "bootstrap", args)
    family = Family(cfg.family)
    config = cfg.train_config()
    result = ranking.bootstrap_rank(family, cfg.bootstrap_m, cfg.n, cfg.seed, config, cfg.jobs,
                                    cfg.arch(family))
    table = ranking.aggregate_topk(result.rankings)
    table.check()
    stage.add("bootstrap/rankings.json", ranking.rankings_to_json(result.rankings))
    stage.add("bootstrap/importance.csv", ranking.importance_to_csv(result.rankings))
    stage.add("bootstrap/topk.json", _dump(table.to_dict()))
    stage.add("bootstrap/topk.csv", table.to_csv())
    extra = {"failures": {str(k): v for k, v in result.failures.items()}}
    if not args.no_curve:
        if family is not Family.GENERAL9:
            raise ConfigError("the reduced-feature curve is defined for the general9 family")
        points = ranking.reduced_model_curve(table, family, cfg.n, cfg.seed, config)
        stage.add("bootstrap/curve.csv", ranking.curve_to_csv(points))
        extra["curve"] = {p.m: p.accuracy for p in points}
    print(table.to_csv(), end="")
    return stage.commit(extra)


def cmd_extract(cfg: RunConfig, args) -> dict:
    stage = Stage(cfg, f"extract-{args.name}", args)
    model = _load_model(args.model)
    probe = _dataset_for_model(ds.load_dataset(_require(args.probe), require_labels=False), model)
    holdout = None
    if args.holdout:
        holdout = _dataset_for_model(ds.load_dataset(_require(args.holdout), require_labels=False), model)
    witness, report = symbolic.extract_witness(model, probe, holdout, affine_deep=args.affine_deep)
    rendered = symbolic.render_witness(witness)
    doc = {"witness": witness.to_dict(), "rendered": rendered, "fit_report": report.to_dict()}
    stage.add(f"witness/{args.name}.json", _dump(doc))
    stage.add(f"witness/{args.name}.txt", rendered + "\n")
    print(rendered)
    print(f"agreement with network decisions: {report.agreement:.4f}")
    return stage.commit({"agreement": report.agreement})


def cmd_eval_witness(cfg: RunConfig, args) -> dict:
    stage = Stage(cfg, f"eval-witness-{args.name}", args)
    witness = symbolic.load_witness(_require(args.witness))
    data = ds.load_dataset(_require(args.dataset))
    decisions = witness.decide(data)
    out = {"witness": ds_report(data.labels, decisions)}
    if args.model:
        model = _load_model(args.model)
        md = predict(model, _dataset_for_model(data, model).features)
        out["model"] = ds_report(data.labels, md)
        out["agreement"] = float(np.mean(md == decisions))
    stage.add(f"reports/{args.name}.json", _dump(out))
    print(_dump(out))
    return stage.commit({"accuracy": out["witness"]["accuracy"]})


def ds_report(labels, decisions) -> dict:
    return ClassificationReport.from_predictions(labels, decisions).to_dict()


def cmd_report(cfg: RunConfig, args) -> dict:
    path = Path(cfg.out) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    bad = []
    for name, entry in sorted(manifest.get("stages", {}).items()):
        print(f"[{name}] {entry.get('seconds', 0):.1f}s")
        for rel, digest in sorted(entry.get("artifacts", {}).items()):
            p = Path(cfg.out) / rel
            ok = p.exists() and sha256_file(p) == digest
            if not ok:
                bad.append(rel)
            print(f"  {'ok ' if ok else 'BAD'} {rel} {digest[:12]}")
        for key in ("accuracy", "agreement", "curve"):
            if key in entry:
                print(f"  {key}: {entry[key]}")
    if bad:
        raise RuntimeError(f"{len(bad)} artifacts missing or modified: {bad}")
    return manifest


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bootstrap": cmd_bootstrap,
    "extract": cmd_extract,
    "eval-witness": cmd_eval_witness,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of run configuration keys")
    common.add_argument("--profile", choices=sorted(PROFILES), default="smoke")
    common.add_argument("--family", choices=[f.value for f in Family])
    common.add_argument("--n", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    common.add_argument("--train-fraction", dest="train_fraction", type=float)
    common.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    common.add_argument("--test-fraction", dest="test_fraction", type=float)
    common.add_argument("--architecture", help="layer widths, e.g. 9-6-3-1")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--learning-rate", dest="learning_rate", type=float)
    common.add_argument("--l1-activation-penalty", dest="l1_activation_penalty", type=float)
    common.add_argument("--early-stop-patience", dest="early_stop_patience", type=int)
    common.add_argument("--lr-schedule", dest="lr_schedule", choices=["constant", "cosine"])
    common.add_argument("--bootstrap-m", dest="bootstrap_m", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="kan-witness", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate, split and save a dataset")
    p = sub.add_parser("split", parents=[common], help="split an existing dataset file")
    p.add_argument("--dataset", required=True)
    p = sub.add_parser("train", parents=[common], help="train a KAN classifier")
    for part in ("train", "validation", "test"):
        p.add_argument(f"--{part}", help=f"{part} CSV (default: <out>/data/{part}.csv)")
    p.add_argument("--name", default="model")
    p = sub.add_parser("evaluate", parents=[common], help="classification report of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--name", default="evaluation")
    p = sub.add_parser("bootstrap", parents=[common], help="bootstrap feature ranking and reduced-model curve")
    p.add_argument("--no-curve", action="store_true")
    p = sub.add_parser("extract", parents=[common], help="extract a symbolic witness from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--holdout", help="dataset for the agreement check (default: probe)")
    p.add_argument("--affine-deep", action="store_true", help="fit deeper edges as affine to flatten the witness")
    p.add_argument("--name", default="witness")
    p = sub.add_parser("eval-witness", parents=[common], help="evaluate a witness against labels and a model")
    p.add_argument("--witness", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model")
    p.add_argument("--name", default="witness-eval")
    sub.add_parser("report", parents=[common], help="summarise and verify the run manifest")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ds.SchemaError, ds.DatasetFormatError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, ranking.BootstrapError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
