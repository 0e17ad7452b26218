"""Balanced, labelled datasets of Pauli correlation features."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import qstate
from ._seeds import derive_rng
from .qstate import GENERAL9, Family

FORMAT_VERSION = "kan-witness-dataset/1"
SEPARABLE, ENTANGLED = 0, 1
_CHUNK = 4096


class DatasetFormatError(ValueError):
    """Malformed dataset file; carries the offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(ValueError):
    pass


@dataclass
class Dataset:
    family: Family
    features: np.ndarray
    labels: np.ndarray
    observables: tuple[str, ...] = ()
    seed: int | None = None
    noise_sigma: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.family = Family(self.family)
        if not self.observables:
            self.observables = self.family.observables
        self.observables = tuple(self.observables)
        unknown = [o for o in self.observables if o not in self.family.observables]
        if unknown:
            raise SchemaError(f"observables {unknown} do not belong to family {self.family.value}")
        self.features = np.asarray(self.features, dtype=float).reshape(-1, len(self.observables))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise SchemaError("feature rows and labels differ in length")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def noisy(self) -> bool:
        return self.noise_sigma > 0

    @property
    def n_entangled(self) -> int:
        return int(np.sum(self.labels == ENTANGLED))

    @property
    def n_separable(self) -> int:
        return int(np.sum(self.labels == SEPARABLE))

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx], meta=dict(self.meta))

    def feature_vector(self, i: int) -> qstate.FeatureVector:
        return qstate.FeatureVector(self.observables, self.features[i], noisy=self.noisy)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.family == other.family
            and self.observables == other.observables
            and self.seed == other.seed
            and self.noise_sigma == other.noise_sigma
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def _quota_indices(labels: np.ndarray, need_ent: int, need_sep: int) -> np.ndarray:
    """Indices (in generation order) filling the remaining per-class quotas."""
    ent = np.flatnonzero(labels)[:need_ent]
    sep = np.flatnonzero(~labels)[:need_sep]
    return np.sort(np.concatenate([ent, sep]))


def generate_dataset(family: Family | str, n: int, seed: int, noise_sigma: float = 0.0) -> Dataset:
    """Generate ``ceil(n/2)`` entangled and ``floor(n/2)`` separable samples.

    General states are random local rotations of uniformly drawn X-states;
    labels come from the PPT test on the X-state.  Symmetric states are
    drawn directly from their three-parameter family.  With
    ``noise_sigma > 0`` Gaussian noise is added to every feature after
    labelling; the clean part is identical to the noise-free dataset with
    the same seed.
    """
    family = Family(family)
    if n < 2:
        raise ValueError(f"dataset size must be at least 2, got {n}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = derive_rng(seed, f"dataset-{family.value}")
    need_ent, need_sep = math.ceil(n / 2), n // 2
    feats, labs = [], []
    while need_ent > 0 or need_sep > 0:
        if family is Family.GENERAL9:
            t, _ = qstate.sample_x_states(rng, _CHUNK)
            ent = qstate.entangled_mask(qstate.x_state_density(t))
            idx = _quota_indices(ent, need_ent, need_sep)
            t, ent = t[idx], ent[idx]
            u1 = qstate.haar_unitaries(rng, len(idx))
            u2 = qstate.haar_unitaries(rng, len(idx))
            rho = qstate.rotate_locally(t, u1, u2)
            values = qstate.pauli_values(rho, GENERAL9)
        else:
            p = qstate.sample_symmetric_params(rng, _CHUNK)
            ent = qstate.entangled_mask(qstate.symmetric_density(p[:, 0], p[:, 1], p[:, 2]))
            idx = _quota_indices(ent, need_ent, need_sep)
            p, ent = p[idx], ent[idx]
            values = np.stack([p[:, 0], p[:, 1], -p[:, 1], p[:, 0], p[:, 2]], axis=1)
        feats.append(values)
        labs.append(ent.astype(np.int64))
        need_ent -= int(ent.sum())
        need_sep -= int((~ent).sum())
    features = np.concatenate(feats)
    labels = np.concatenate(labs)
    if noise_sigma > 0:
        noise_rng = derive_rng(seed, f"noise-{family.value}")
        features = features + noise_rng.normal(0.0, noise_sigma, size=features.shape)
    return Dataset(family, features, labels, family.observables, int(seed), float(noise_sigma),
                   {"generator": FORMAT_VERSION})


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    validation_fraction: float = 0.20
    test_fraction: float = 0.10

    def __post_init__(self):
        fr = (self.train_fraction, self.validation_fraction, self.test_fraction)
        if any(not (0.0 < f < 1.0) for f in fr) or abs(sum(fr) - 1.0) > 1e-12:
            raise ValueError(f"split fractions must lie in (0, 1) and sum to 1, got {fr}")


def split(dataset: Dataset, spec: SplitSpec = SplitSpec(), seed: int = 0):
    """Stratified, seeded partition into ``(train, validation, test)``."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    rng = derive_rng(seed, "split")
    n_val = round(n * spec.validation_fraction)
    n_test = round(n * spec.test_fraction)
    ent = rng.permutation(np.flatnonzero(dataset.labels == ENTANGLED))
    sep = rng.permutation(np.flatnonzero(dataset.labels != ENTANGLED))
    share = len(ent) / n
    v_e = round(n_val * share)
    t_e = round(n_test * share)
    v_s, t_s = n_val - v_e, n_test - t_e
    val = np.concatenate([ent[:v_e], sep[:v_s]])
    test = np.concatenate([ent[v_e:v_e + t_e], sep[v_s:v_s + t_s]])
    train = np.concatenate([ent[v_e + t_e:], sep[v_s + t_s:]])
    parts = []
    for name, idx in (("train", train), ("validation", val), ("test", test)):
        sub = dataset.subset(rng.permutation(idx))
        sub.meta["split"] = name
        parts.append(sub)
    return tuple(parts)


def project(dataset: Dataset, observables: Sequence[str]) -> Dataset:
    """Keep only the given feature columns (in the given order)."""
    missing = [o for o in observables if o not in dataset.observables]
    if missing:
        raise SchemaError(f"dataset lacks observables {missing}")
    cols = [dataset.observables.index(o) for o in observables]
    return replace(dataset, features=dataset.features[:, cols], observables=tuple(observables),
                   meta=dict(dataset.meta))


# -- CSV persistence -------------------------------------------------------------


def dataset_to_text(dataset: Dataset) -> str:
    lines = [
        f"# format={FORMAT_VERSION}",
        f"# family={dataset.family.value}",
        f"# seed={'' if dataset.seed is None else dataset.seed}",
        f"# noise_sigma={dataset.noise_sigma!r}",
        f"# noisy={'true' if dataset.noisy else 'false'}",
    ]
    for key in sorted(dataset.meta):
        if key not in ("format", "family", "seed", "noise_sigma", "noisy"):
            lines.append(f"# {key}={dataset.meta[key]}")
    lines.append(",".join(dataset.observables + ("label",)))
    for row, lab in zip(dataset.features, dataset.labels):
        lines.append(",".join(format(v, ".17g") for v in row) + f",{int(lab)}")
    return "\n".join(lines) + "\n"


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_dataset(dataset: Dataset, path) -> None:
    atomic_write_text(path, dataset_to_text(dataset))


def parse_dataset(text: str, require_labels: bool = True) -> Dataset:
    header: dict[str, str] = {}
    columns = None
    rows, labels = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if columns is None and "=" in line:
                key, _, value = line[1:].partition("=")
                header[key.strip()] = value.strip()
            continue
        if columns is None:
            columns = [c.strip() for c in line.split(",")]
            if "family" not in header:
                raise SchemaError("missing '# family=' header")
            try:
                family = Family(header["family"])
            except ValueError:
                raise SchemaError(f"unknown family {header['family']!r}") from None
            has_label = columns[-1] == "label"
            if require_labels and not has_label:
                raise SchemaError("dataset has no 'label' column")
            obs = columns[:-1] if has_label else columns
            bad = [o for o in obs if o not in family.observables]
            if bad or len(set(obs)) != len(obs) or not obs:
                raise SchemaError(f"columns {obs} do not match family {family.value}")
            continue
        fields = line.split(",")
        if len(fields) != len(columns):
            raise DatasetFormatError(lineno, f"expected {len(columns)} fields, got {len(fields)}")
        try:
            values = [float(f) for f in (fields[:-1] if has_label else fields)]
            if has_label:
                lab = int(fields[-1])
                if lab not in (SEPARABLE, ENTANGLED):
                    raise ValueError(lab)
                labels.append(lab)
        except ValueError as exc:
            raise DatasetFormatError(lineno, f"cannot parse row: {exc}") from None
        rows.append(values)
    if columns is None:
        raise SchemaError("file has no column header")
    seed = header.get("seed", "")
    meta = {k: v for k, v in header.items() if k not in ("family", "seed", "noise_sigma", "noisy", "format")}
    if "format" in header:
        meta.setdefault("generator", header["format"])
    feats = np.array(rows, dtype=float).reshape(-1, len(obs))
    labs = np.array(labels if has_label else [-1] * len(rows), dtype=np.int64)
    return Dataset(family, feats, labs, tuple(obs), int(seed) if seed else None,
                   float(header.get("noise_sigma", 0.0)), meta)


def load_dataset(path, require_labels: bool = True) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh.read(), require_labels)
