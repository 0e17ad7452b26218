"""Feature importance, bootstrap Top-k aggregation and reduced-feature models."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import dataset as ds
from ._seeds import derive_seed
from .kan import KanModel, TrainConfig, TrainingDivergedError, evaluate, train
from .qstate import GENERAL9, Family

log = logging.getLogger(__name__)

MIN_ATTRIBUTION_SAMPLES = 1000

# observable count -> architecture of the reduced model
REDUCED_ARCHITECTURES = {
    1: (1, 3, 1),
    2: (2, 3, 1),
    3: (3, 2, 1),
    4: (4, 2, 1),
    5: (5, 3, 1),
    6: (6, 3, 1),
    7: (7, 5, 3, 1),
    8: (8, 5, 3, 1),
}
FULL_ARCHITECTURES = {Family.GENERAL9: (9, 6, 3, 1), Family.SYMMETRIC5: (5, 3, 1)}


@dataclass
class ImportanceRanking:
    model_id: int
    scores: dict[str, float]
    degenerate: bool = False
    accuracy: float | None = None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.scores)

    @property
    def order(self) -> list[str]:
        """Labels by descending score; ties keep the fixed label order."""
        labels = list(self.scores)
        canon = {lab: i for i, lab in enumerate(sorted(labels, key=_label_key))}
        return sorted(labels, key=lambda lab: (-self.scores[lab], canon[lab]))

    def top(self, k: int) -> list[str]:
        return self.order[:k]

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "scores": self.scores, "order": self.order,
                "degenerate": self.degenerate, "accuracy": self.accuracy}

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceRanking":
        return cls(int(d["model_id"]), {k: float(v) for k, v in d["scores"].items()},
                   bool(d.get("degenerate", False)), d.get("accuracy"))


def _label_key(label: str):
    return (GENERAL9.index(label), label) if label in GENERAL9 else (len(GENERAL9), label)


def edge_scores(model: KanModel, x: np.ndarray) -> list[np.ndarray]:
    """Standard deviation of every edge's output over the samples ``x``."""
    inputs = model.node_values(x)
    return [layer.edge_outputs(h).std(axis=0) for layer, h in zip(model.layers, inputs[:-1])]


def propagate_attribution(scores: Sequence[np.ndarray]) -> np.ndarray:
    """Push unit attribution from the output back to the inputs.

    Each node hands its attribution to its incoming edges in proportion to
    their scores; a node whose incoming edges all score zero passes nothing.
    """
    attr = np.ones(scores[-1].shape[1])
    for e in reversed(scores):
        col = e.sum(axis=0)
        share = np.divide(e, col, out=np.zeros_like(e), where=col > 0)
        attr = share @ attr
    return attr


def attribute_importance(model: KanModel, data, model_id: int = 0) -> ImportanceRanking:
    x = data.features if hasattr(data, "features") else np.asarray(data, dtype=float)
    if x.shape[0] < MIN_ATTRIBUTION_SAMPLES:
        raise ValueError(f"attribution needs at least {MIN_ATTRIBUTION_SAMPLES} samples, got {x.shape[0]}")
    labels = model.observables or tuple(f"x{i}" for i in range(model.architecture[0]))
    scores = edge_scores(model, x)
    attr = propagate_attribution(scores)
    total = attr.sum()
    if not np.any(scores[0] > 0) or total <= 0:
        return ImportanceRanking(model_id, {lab: 1.0 / len(labels) for lab in labels}, degenerate=True)
    attr = attr / total
    return ImportanceRanking(model_id, dict(zip(labels, attr.tolist())))


def symbolic_importance(witness) -> dict[str, float]:
    """Per-feature share of ``|a*b|`` over sine terms (``|a|`` for affine ones).

    Uses the flattened witness when available, else the first-layer terms.
    """
    labels = witness.feature_labels
    acc = np.zeros(len(labels))
    terms = witness.flat_terms if witness.is_flat else [t for row in witness.layers[0] for t in row]
    for t in terms:
        acc[t.arg] += abs(t.a * t.b) if t.kind == "sine" else abs(t.a)
    total = acc.sum()
    acc = acc / total if total > 0 else np.full(len(labels), 1.0 / len(labels))
    return dict(zip(labels, acc.tolist()))


# -- training helpers ------------------------------------------------------------


def fit_projected(train_set, validation_set, test_set, observables: Sequence[str],
                  architecture: Sequence[int], config: TrainConfig):
    """Train a fresh model on the selected columns; returns ``(model, report)``."""
    parts = [ds.project(d, observables) for d in (train_set, validation_set, test_set)]
    model = KanModel.create(architecture, seed=config.seed, observables=observables)
    best, _ = train(model, parts[0], parts[1], config)
    best.meta["dataset_seed"] = train_set.seed
    return best, evaluate(best, parts[2])


def _bootstrap_job(args):
    family, n, base_seed, config, model_id, architecture = args
    data_seed = derive_seed(base_seed, "bootstrap-data", model_id)
    data = ds.generate_dataset(family, n, data_seed)
    tr, va, te = ds.split(data, seed=data_seed)
    cfg = replace(config, seed=derive_seed(base_seed, "bootstrap-model", model_id))
    model = KanModel.create(architecture, seed=cfg.seed, observables=data.observables)
    try:
        best, _ = train(model, tr, va, cfg)
    except TrainingDivergedError as exc:
        return model_id, None, str(exc)
    ranking = attribute_importance(best, tr, model_id)
    ranking.accuracy = evaluate(best, te).accuracy
    return model_id, ranking, None


class BootstrapError(RuntimeError):
    pass


@dataclass
class BootstrapResult:
    rankings: list[ImportanceRanking]
    failures: dict[int, str] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.rankings)

    def __len__(self):
        return len(self.rankings)

    def __getitem__(self, i):
        return self.rankings[i]


def bootstrap_rank(family: Family | str = Family.GENERAL9, m: int = 20, n: int = 100_000,
                   base_seed: int = 0, train_config: TrainConfig | None = None, jobs: int = 1,
                   architecture: Sequence[int] | None = None) -> BootstrapResult:
    """Train ``m`` independent models on independent datasets and rank features in each."""
    family = Family(family)
    if m < 1:
        raise ValueError("bootstrap needs at least one model")
    config = train_config or TrainConfig()
    arch = tuple(architecture or FULL_ARCHITECTURES[family])
    tasks = [(family, n, base_seed, config, model_id, arch) for model_id in range(1, m + 1)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_bootstrap_job, tasks))
    else:
        results = [_bootstrap_job(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    rankings = [r for _, r, _ in results if r is not None]
    failures = {mid: err for mid, _, err in results if err is not None}
    for mid, err in failures.items():
        log.warning("bootstrap model %d failed: %s", mid, err)
    if len(rankings) < m / 2:
        raise BootstrapError(f"only {len(rankings)} of {m} bootstrap models trained successfully")
    return BootstrapResult(rankings, failures)


# -- Top-k tables ----------------------------------------------------------------


@dataclass
class TopKFrequencyTable:
    labels: tuple[str, ...]
    counts: np.ndarray  # (max_k, n_labels); row k-1 is the Top-k group
    n_models: int

    def __post_init__(self):
        self.labels = tuple(self.labels)
        self.counts = np.asarray(self.counts, dtype=int)
        if self.counts.shape[1] != len(self.labels):
            raise ValueError("count columns do not match labels")

    @property
    def max_k(self) -> int:
        return self.counts.shape[0]

    def count(self, k: int, label: str) -> int:
        return int(self.counts[k - 1, self.labels.index(label)])

    def group(self, k: int) -> dict[str, int]:
        return dict(zip(self.labels, self.counts[k - 1].tolist()))

    def check(self) -> None:
        """Raise if row sums or Top-k nesting are violated."""
        for k in range(1, self.max_k + 1):
            if int(self.counts[k - 1].sum()) != k * self.n_models:
                raise ValueError(f"Top-{k} counts sum to {self.counts[k - 1].sum()}, expected {k * self.n_models}")
        if np.any(np.diff(self.counts, axis=0) < 0):
            raise ValueError("Top-k counts are not nested")
        if np.any(self.counts < 0) or np.any(self.counts > self.n_models):
            raise ValueError("counts out of range")

    def to_dict(self) -> dict:
        return {"n_models": self.n_models, "labels": list(self.labels),
                "groups": {f"top{k}": self.group(k) for k in range(1, self.max_k + 1)}}

    @classmethod
    def from_dict(cls, d: dict) -> "TopKFrequencyTable":
        labels = tuple(d["labels"])
        groups = d["groups"]
        ks = sorted(int(key[3:]) for key in groups)
        counts = np.array([[groups[f"top{k}"][lab] for lab in labels] for k in ks])
        return cls(labels, counts, int(d["n_models"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", *self.labels])
        for k in range(1, self.max_k + 1):
            w.writerow([f"Top-{k}", *self.counts[k - 1].tolist()])
        return buf.getvalue()


def aggregate_topk(rankings: Iterable[ImportanceRanking], max_k: int | None = None) -> TopKFrequencyTable:
    rankings = list(rankings)
    if not rankings:
        raise ValueError("need at least one ranking")
    labels = tuple(sorted(rankings[0].labels, key=_label_key))
    for r in rankings[1:]:
        if set(r.labels) != set(labels):
            raise ValueError(f"ranking {r.model_id} has labels {sorted(r.labels)}, expected {sorted(labels)}")
    max_k = max_k or len(labels) - 1
    counts = np.zeros((max_k, len(labels)), dtype=int)
    for r in rankings:
        order = r.order
        for k in range(1, max_k + 1):
            for lab in order[:k]:
                counts[k - 1, labels.index(lab)] += 1
    return TopKFrequencyTable(labels, counts, len(rankings))


@dataclass
class FeatureSelection:
    m: int
    observables: tuple[str, ...]
    architecture: tuple[int, ...]


def select_features(table: TopKFrequencyTable, m: int) -> FeatureSelection:
    """Pick the ``m`` most frequent members of the Top-m group.

    Ties on the Top-m count are broken by the counts in Top-(m-1), ...,
    Top-1, then Top-(m+1), ..., and finally by the fixed label order.
    """
    if not 1 <= m <= table.max_k:
        raise ValueError(f"m must be in 1..{table.max_k}, got {m}")
    tie_rows = [m] + list(range(m - 1, 0, -1)) + list(range(m + 1, table.max_k + 1))
    canon = {lab: i for i, lab in enumerate(sorted(table.labels, key=_label_key))}
    ranked = sorted(
        table.labels,
        key=lambda lab: tuple(-table.count(k, lab) for k in tie_rows) + (canon[lab],),
    )
    chosen = tuple(sorted(ranked[:m], key=_label_key))
    arch = REDUCED_ARCHITECTURES.get(m, (m, max(2, m // 2), 1))
    return FeatureSelection(m, chosen, arch)


@dataclass
class CurvePoint:
    m: int
    observables: tuple[str, ...]
    architecture: tuple[int, ...]
    accuracy: float


def reduced_model_curve(table: TopKFrequencyTable, family: Family | str = Family.GENERAL9, n: int = 100_000,
                        seed: int = 0, train_config: TrainConfig | None = None,
                        ms: Sequence[int] | None = None) -> list[CurvePoint]:
    """Train the reduced model for each ``m`` on one shared dataset and record test accuracy."""
    family = Family(family)
    config = train_config or TrainConfig()
    tr, va, te = curve_splits(family, n, seed)
    points = []
    for m in ms or range(1, table.max_k + 1):
        sel = select_features(table, m)
        cfg = replace(config, seed=derive_seed(seed, "curve-model", m))
        _, report = fit_projected(tr, va, te, sel.observables, sel.architecture, cfg)
        points.append(CurvePoint(m, sel.observables, sel.architecture, report.accuracy))
    return points


def curve_splits(family: Family | str, n: int, seed: int):
    data_seed = derive_seed(seed, "curve-data")
    return ds.split(ds.generate_dataset(family, n, data_seed), seed=data_seed)


def curve_to_csv(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "architecture", "observables", "accuracy"])
    for p in points:
        w.writerow([p.m, "-".join(map(str, p.architecture)), " ".join(p.observables), repr(p.accuracy)])
    return buf.getvalue()


def rankings_to_json(rankings: Sequence[ImportanceRanking]) -> str:
    return json.dumps([r.to_dict() for r in rankings], indent=1, sort_keys=True)


def importance_to_csv(rankings: Sequence[ImportanceRanking]) -> str:
    labels = sorted(rankings[0].labels, key=_label_key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model_id", *labels])
    for r in rankings:
        w.writerow([r.model_id, *(repr(r.scores[lab]) for lab in labels)])
    return buf.getvalue()
