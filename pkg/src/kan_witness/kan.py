"""Kolmogorov-Arnold network in plain numpy.

Every edge ``i -> j`` of a layer carries a learnable univariate function::

    phi(x) = w_b * silu(x) + w_s * sum_m c_m B_m(x)

where ``B_m`` are cubic B-splines on a uniform grid.  Node outputs are the
sums of their incoming edges; the final scalar is squashed by a logistic
function to give a score in ``(0, 1)``.  Gradients are computed
analytically (no autodiff) and trained with Adam.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._seeds import derive_rng

GRID_RANGE = (-1.2, 1.2)
GRID_SIZE = 5
SPLINE_ORDER = 3
EVAL_CHUNK = 8192


class ShapeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, message: str = "loss became NaN"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


# -- splines -----------------------------------------------------------------


def make_knots(grid_range=GRID_RANGE, grid_size: int = GRID_SIZE, order: int = SPLINE_ORDER) -> np.ndarray:
    lo, hi = grid_range
    h = (hi - lo) / grid_size
    return lo + h * np.arange(-order, grid_size + order + 1, dtype=float)


def bspline_basis(x: np.ndarray, knots: np.ndarray, order: int = SPLINE_ORDER, derivative: bool = False):
    """Cox-de Boor evaluation of the ``len(knots) - order - 1`` basis functions.

    ``x`` of shape ``(...)`` gives an array ``(..., n_basis)``.  With
    ``derivative=True`` a second array holds ``dB/dx``.  ``x`` is expected
    to lie within ``[knots[order], knots[-order-1]]``.
    """
    x = np.asarray(x, dtype=float)[..., None]
    t = knots
    b = ((x >= t[:-1]) & (x < t[1:])).astype(float)
    prev = b
    for k in range(1, order + 1):
        prev = b
        left = (x - t[: -k - 1]) / (t[k:-1] - t[: -k - 1]) * b[..., :-1]
        right = (t[k + 1:] - x) / (t[k + 1:] - t[1:-k]) * b[..., 1:]
        b = left + right
    if not derivative:
        return b
    k = order
    d = k * (prev[..., :-1] / (t[k:-1] - t[: -k - 1]) - prev[..., 1:] / (t[k + 1:] - t[1:-k]))
    return b, d


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


@dataclass
class SplineActivation:
    """A single edge function, detached from its layer (for inspection and fitting)."""

    knots: np.ndarray
    coefficients: np.ndarray
    base_weight: float
    spline_weight: float
    order: int = SPLINE_ORDER

    @property
    def grid_range(self) -> tuple[float, float]:
        return float(self.knots[self.order]), float(self.knots[-self.order - 1])

    def __call__(self, x) -> np.ndarray:
        return edge_eval(self, x)


def edge_eval(act: SplineActivation, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lo, hi = act.grid_range
    basis = bspline_basis(np.clip(x, lo, hi), act.knots, act.order)
    return act.base_weight * silu(x) + act.spline_weight * (basis @ act.coefficients)


def fit_spline_coefficients(fn, knots: np.ndarray, order: int = SPLINE_ORDER, n: int = 401) -> np.ndarray:
    """Least-squares spline coefficients approximating ``fn`` on the grid."""
    lo, hi = knots[order], knots[-order - 1]
    xs = np.linspace(lo, hi, n)
    basis = bspline_basis(xs, knots, order)
    coef, *_ = np.linalg.lstsq(basis, fn(xs), rcond=None)
    return coef


# -- layers and model ----------------------------------------------------------


@dataclass
class KanLayer:
    n_in: int
    n_out: int
    knots: np.ndarray
    coef: np.ndarray  # (n_in, n_out, n_basis)
    base_weight: np.ndarray  # (n_in, n_out)
    spline_weight: np.ndarray  # (n_in, n_out)
    order: int = SPLINE_ORDER

    @property
    def grid_range(self) -> tuple[float, float]:
        return float(self.knots[self.order]), float(self.knots[-self.order - 1])

    @property
    def n_basis(self) -> int:
        return self.coef.shape[-1]

    def activation(self, i: int, j: int) -> SplineActivation:
        return SplineActivation(
            self.knots.copy(), self.coef[i, j].copy(), float(self.base_weight[i, j]),
            float(self.spline_weight[i, j]), self.order,
        )

    def edge_outputs(self, x: np.ndarray) -> np.ndarray:
        """``(batch, n_in, n_out)`` array of every edge's value."""
        lo, hi = self.grid_range
        basis = bspline_basis(np.clip(x, lo, hi), self.knots, self.order)
        spline = np.einsum("bim,iom->bio", basis, self.coef)
        return self.base_weight * silu(x)[:, :, None] + self.spline_weight * spline

    def forward(self, x: np.ndarray, cache: bool = False):
        lo, hi = self.grid_range
        xc = np.clip(x, lo, hi)
        if cache:
            basis, dbasis = bspline_basis(xc, self.knots, self.order, derivative=True)
        else:
            basis = bspline_basis(xc, self.knots, self.order)
        spline = np.einsum("bim,iom->bio", basis, self.coef)
        sx = silu(x)
        edges = self.base_weight * sx[:, :, None] + self.spline_weight * spline
        out = edges.sum(axis=1)
        if not cache:
            return out
        inside = (x > lo) & (x < hi)
        return out, dict(x=x, sx=sx, basis=basis, dbasis=dbasis, spline=spline, edges=edges, inside=inside)

    def backward(self, d_edges: np.ndarray, c: dict):
        """Gradients given ``dL/d edge`` of shape ``(batch, n_in, n_out)``."""
        g_base = np.einsum("bio,bi->io", d_edges, c["sx"])
        g_spw = np.einsum("bio,bio->io", d_edges, c["spline"])
        g_coef = np.einsum("bio,bim->iom", d_edges * self.spline_weight, c["basis"])
        dspline = np.einsum("bim,iom->bio", c["dbasis"], self.coef) * c["inside"][:, :, None]
        dphi = self.base_weight * silu_grad(c["x"])[:, :, None] + self.spline_weight * dspline
        d_x = np.sum(d_edges * dphi, axis=2)
        return d_x, (g_coef, g_base, g_spw)


@dataclass
class KanModel:
    architecture: tuple[int, ...]
    layers: list[KanLayer]
    observables: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.architecture = tuple(int(w) for w in self.architecture)
        if len(self.architecture) < 2 or self.architecture[-1] != 1:
            raise ShapeError(f"architecture must end in a single output: {self.architecture}")
        if len(self.layers) != len(self.architecture) - 1:
            raise ShapeError("layer count does not match architecture")
        for layer, (a, b) in zip(self.layers, zip(self.architecture[:-1], self.architecture[1:])):
            if (layer.n_in, layer.n_out) != (a, b):
                raise ShapeError(f"layer {layer.n_in}->{layer.n_out} does not match {a}->{b}")
        if self.observables and len(self.observables) != self.architecture[0]:
            raise ShapeError(
                f"{len(self.observables)} observables for input width {self.architecture[0]}"
            )
        self.observables = tuple(self.observables)

    @property
    def name(self) -> str:
        return "-".join(str(w) for w in self.architecture)

    # construction

    @classmethod
    def create(cls, architecture: Sequence[int], seed: int = 0, observables: Sequence[str] = (),
               grid_range=GRID_RANGE, grid_size: int = GRID_SIZE, order: int = SPLINE_ORDER,
               hidden_grid_range=None) -> "KanModel":
        """Randomly initialised model: small spline coefficients, unit spline weights.

        ``hidden_grid_range`` optionally gives layers after the first a
        wider spline domain, since summed node values exceed the feature range.
        """
        rng = derive_rng(seed, "kan-init")
        nb = grid_size + order
        layers = []
        for li, (a, b) in enumerate(zip(architecture[:-1], architecture[1:])):
            rng_range = grid_range if li == 0 or hidden_grid_range is None else hidden_grid_range
            layers.append(KanLayer(
                a, b, make_knots(rng_range, grid_size, order),
                rng.normal(0.0, 0.1 / math.sqrt(nb), size=(a, b, nb)),
                rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)),
                np.ones((a, b)),
                order,
            ))
        return cls(tuple(architecture), layers, tuple(observables))

    @classmethod
    def zeros(cls, architecture: Sequence[int], observables: Sequence[str] = (),
              grid_range=GRID_RANGE, grid_size: int = GRID_SIZE, order: int = SPLINE_ORDER) -> "KanModel":
        knots = make_knots(grid_range, grid_size, order)
        layers = [
            KanLayer(a, b, knots.copy(), np.zeros((a, b, grid_size + order)), np.zeros((a, b)),
                     np.ones((a, b)), order)
            for a, b in zip(architecture[:-1], architecture[1:])
        ]
        return cls(tuple(architecture), layers, tuple(observables))

    def copy(self) -> "KanModel":
        return copy.deepcopy(self)

    # parameters

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.coef, layer.base_weight, layer.spline_weight])
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.parameters():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # evaluation

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.architecture[0]:
            raise ShapeError(f"model expects {self.architecture[0]} features, got {x.shape[-1]}")
        return x

    def logits(self, x) -> np.ndarray:
        """Pre-squash output for a batch ``(n, n_in)``; evaluated in chunks."""
        x = self._check_input(x)
        out = np.empty(x.shape[0])
        for s in range(0, x.shape[0], EVAL_CHUNK):
            h = x[s:s + EVAL_CHUNK]
            for layer in self.layers:
                h = layer.forward(h)
            out[s:s + EVAL_CHUNK] = h[:, 0]
        return out

    def node_values(self, x) -> list[np.ndarray]:
        """Inputs to every layer, plus the final output: ``len(layers) + 1`` arrays."""
        h = self._check_input(x)
        values = [h]
        for layer in self.layers:
            h = layer.forward(h)
            values.append(h)
        return values

    def scores(self, x) -> np.ndarray:
        return sigmoid(self.logits(x))

    # serialisation

    def to_dict(self) -> dict:
        return {
            "architecture": list(self.architecture),
            "observables": list(self.observables),
            "meta": self.meta,
            "layers": [
                {
                    "n_in": layer.n_in, "n_out": layer.n_out, "order": layer.order,
                    "knots": layer.knots.tolist(), "coef": layer.coef.tolist(),
                    "base_weight": layer.base_weight.tolist(),
                    "spline_weight": layer.spline_weight.tolist(),
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KanModel":
        layers = [
            KanLayer(
                int(ld["n_in"]), int(ld["n_out"]), np.array(ld["knots"], dtype=float),
                np.array(ld["coef"], dtype=float).reshape(ld["n_in"], ld["n_out"], -1),
                np.array(ld["base_weight"], dtype=float).reshape(ld["n_in"], ld["n_out"]),
                np.array(ld["spline_weight"], dtype=float).reshape(ld["n_in"], ld["n_out"]),
                int(ld.get("order", SPLINE_ORDER)),
            )
            for ld in d["layers"]
        ]
        return cls(tuple(d["architecture"]), layers, tuple(d.get("observables", ())), dict(d.get("meta", {})))

    def dumps(self) -> str:
        # repr of floats round-trips exactly through json
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "KanModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def forward(model: KanModel, features) -> float:
    """Score in ``(0, 1)`` for a single feature vector."""
    values = getattr(features, "values", features)
    return float(model.scores(values)[0])


def predict(model: KanModel, features) -> np.ndarray:
    """1 (entangled) where the score is at least 0.5, else 0 (separable)."""
    values = getattr(features, "values", features)
    return (model.logits(values) >= 0.0).astype(int)


def label_from_score(score) -> np.ndarray:
    return (np.asarray(score) >= 0.5).astype(int)


# -- loss and gradients ------------------------------------------------------


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample binary cross-entropy of ``sigmoid(z)`` against labels ``y``."""
    return np.logaddexp(0.0, z) - y * z


def _loss_and_grads(model: KanModel, x: np.ndarray, y: np.ndarray, l1: float = 0.0, mean: bool = False):
    x = model._check_input(x)
    y = np.asarray(y, dtype=float).reshape(-1)
    h = x
    caches = []
    for layer in model.layers:
        h, c = layer.forward(h, cache=True)
        caches.append(c)
    z = h[:, 0]
    n = x.shape[0]
    scale = 1.0 / n if mean else 1.0
    loss = float(np.sum(bce_with_logits(z, y))) * scale
    dz = (sigmoid(z) - y) * scale
    n_edges = sum(layer.n_in * layer.n_out for layer in model.layers)
    if l1 > 0:
        pen_scale = l1 / (n * n_edges) if mean else l1 / n_edges
        loss += pen_scale * sum(float(np.sum(np.abs(c["edges"]))) for c in caches)
    d_out = dz[:, None]
    grads: list = []
    for layer, c in zip(reversed(model.layers), reversed(caches)):
        d_edges = np.broadcast_to(d_out[:, None, :], c["edges"].shape)
        if l1 > 0:
            d_edges = d_edges + pen_scale * np.sign(c["edges"])
        d_out, g = layer.backward(d_edges, c)
        grads[:0] = list(g)
    return loss, grads


def loss(model: KanModel, x, y, l1: float = 0.0) -> float:
    """Summed BCE (plus optional activation penalty) over the batch."""
    return _loss_and_grads(model, x, y, l1)[0]


def backward(model: KanModel, x, y, l1: float = 0.0) -> list[np.ndarray]:
    """Exact gradient of the summed BCE w.r.t. ``model.parameters()``."""
    return _loss_and_grads(model, x, y, l1)[1]


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-2
    seed: int = 0
    l1_activation_penalty: float = 0.0
    early_stop_patience: int = 20
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.l1_activation_penalty < 0:
            raise ValueError("l1_activation_penalty must be non-negative")
        if self.early_stop_patience <= 0:
            raise ValueError("early_stop_patience must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine":
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    best_epoch: int = -1
    best_val_accuracy: float = 0.0
    best_train_loss: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * corr * m / (np.sqrt(v) + self.eps)


def accuracy(model: KanModel, x, y) -> float:
    return float(np.mean(predict(model, x) == np.asarray(y)))


def _xy(data):
    if isinstance(data, tuple):
        return np.asarray(data[0], float), np.asarray(data[1])
    return data.features, data.labels


def train(model: KanModel, train_data, validation_data, config: TrainConfig, log=None):
    """Adam on mean BCE; returns the best-validation snapshot and its history.

    ``train_data``/``validation_data`` are datasets (``.features``,
    ``.labels``) or ``(x, y)`` tuples.
    """
    x, y = _xy(train_data)
    xv, yv = _xy(validation_data)
    model._check_input(x)
    model._check_input(xv)
    model = model.copy()
    rng = derive_rng(config.seed, "kan-train")
    opt = Adam(model.parameters(), config.learning_rate)
    hist = TrainHistory()
    hist.initial_loss = loss(model, x, y) / x.shape[0]
    best = model.copy()
    best_acc = accuracy(model, xv, yv)
    hist.best_val_accuracy = best_acc
    stale = 0
    n = x.shape[0]
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            batch_loss, grads = _loss_and_grads(model, x[idx], y[idx], config.l1_activation_penalty, mean=True)
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(epoch)
            opt.step(grads)
            total += batch_loss * idx.size
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch)
        acc = accuracy(model, xv, yv)
        hist.train_loss.append(epoch_loss)
        hist.val_accuracy.append(acc)
        if log is not None:
            log(f"epoch {epoch:3d} loss {epoch_loss:.4f} val_acc {acc:.4f}")
        if acc > best_acc:
            best_acc = acc
            best = model.copy()
            hist.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    hist.best_val_accuracy = best_acc
    hist.best_train_loss = loss(best, x, y) / n
    best.meta = dict(best.meta, train_config=config.to_dict())
    return best, hist


# -- evaluation ----------------------------------------------------------------


@dataclass
class ClassificationReport:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @staticmethod
    def _ratio(a, b) -> float:
        return a / b if b else 0.0

    def precision(self, cls: int) -> float:
        return self._ratio(self.tp, self.tp + self.fp) if cls == 1 else self._ratio(self.tn, self.tn + self.fn)

    def recall(self, cls: int) -> float:
        return self._ratio(self.tp, self.tp + self.fn) if cls == 1 else self._ratio(self.tn, self.tn + self.fp)

    def f1(self, cls: int) -> float:
        p, r = self.precision(cls), self.recall(cls)
        return self._ratio(2 * p * r, p + r)

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ClassificationReport":
        y_true = np.asarray(y_true).astype(int)
        y_pred = np.asarray(y_pred).astype(int)
        if y_true.size == 0:
            raise ValueError("cannot evaluate on an empty set")
        return cls(
            tp=int(np.sum((y_true == 1) & (y_pred == 1))),
            fn=int(np.sum((y_true == 1) & (y_pred == 0))),
            tn=int(np.sum((y_true == 0) & (y_pred == 0))),
            fp=int(np.sum((y_true == 0) & (y_pred == 1))),
        )

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion": {"tp": self.tp, "fn": self.fn, "tn": self.tn, "fp": self.fp},
            "separable": {"precision": self.precision(0), "recall": self.recall(0), "f1": self.f1(0)},
            "entangled": {"precision": self.precision(1), "recall": self.recall(1), "f1": self.f1(1)},
        }

    def format(self) -> str:
        rows = ["              precision  recall  f1-score"]
        for name, c in (("Separable", 0), ("Entangled", 1)):
            rows.append(f"{name:<12}  {self.precision(c):9.2f}  {self.recall(c):6.2f}  {self.f1(c):8.2f}")
        rows.append(f"{'accuracy':<12}  {'':9}  {'':6}  {self.accuracy:8.2f}")
        return "\n".join(rows)


def evaluate(model: KanModel, test) -> ClassificationReport:
    x, y = _xy(test)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return ClassificationReport.from_predictions(y, predict(model, x))
