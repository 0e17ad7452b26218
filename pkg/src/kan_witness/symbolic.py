"""Closed-form witnesses from trained KANs.

Every edge function is replaced by the better of an affine map
``a*x + d`` or a sinusoid ``a*sin(b*x + c) + d``.  When every edge past
the first layer is affine, the whole network collapses to a sum of
sinusoids of the raw features plus a constant.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares

from .dataset import atomic_write_text
from .kan import KanModel, SplineActivation, edge_eval, predict

SINE, AFFINE = "sine", "affine"
FREQ_MIN, FREQ_MAX, FREQ_STEP = 0.1, 12.0, 0.02
AFFINE_PREFERENCE = 0.01
MAX_FIT_POINTS = 400
MIN_FIT_POINTS = 50
MIN_PROBE = 100


@dataclass
class SymbolicTerm:
    kind: str
    a: float
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    arg: int = 0

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == SINE:
            return self.a * np.sin(self.b * x + self.c) + self.d
        return self.a * x + self.d

    def scaled(self, w: float) -> "SymbolicTerm":
        return SymbolicTerm(self.kind, w * self.a, self.b, self.c, w * self.d, self.arg)


def r_squared(y: np.ndarray, yhat: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - yhat) ** 2))
    if ss_tot <= 0.0:
        return 1.0 if ss_res <= 1e-24 else -math.inf
    return 1.0 - ss_res / ss_tot


def _wrap_phase(c: float) -> float:
    return (c + math.pi) % (2 * math.pi) - math.pi


def _fit_affine(x, y) -> tuple[SymbolicTerm, float]:
    a, d = np.polyfit(x, y, 1)
    term = SymbolicTerm(AFFINE, float(a), d=float(d))
    return term, r_squared(y, term(x))


def _fit_sine(x, y) -> tuple[SymbolicTerm, float]:
    freqs = np.arange(FREQ_MIN, FREQ_MAX + 1e-9, FREQ_STEP)
    arg = np.outer(freqs, x)
    s, c = np.sin(arg), np.cos(arg)
    one = np.ones_like(s)
    basis = np.stack([s, c, one], axis=-1)  # (F, N, 3)
    gram = np.einsum("fni,fnj->fij", basis, basis)
    rhs = np.einsum("fni,n->fi", basis, y)
    gram += 1e-12 * np.eye(3)
    beta = np.linalg.solve(gram, rhs[..., None])[..., 0]
    resid = np.sum((np.einsum("fni,fi->fn", basis, beta) - y) ** 2, axis=1)
    k = int(np.argmin(resid))
    bs, bc, d0 = beta[k]
    # a sin(bx + c) = a cos(c) sin(bx) + a sin(c) cos(bx)
    p0 = np.array([math.hypot(bs, bc), min(max(freqs[k], FREQ_MIN), FREQ_MAX), math.atan2(bc, bs), d0])

    def residual(p):
        return p[0] * np.sin(p[1] * x + p[2]) + p[3] - y

    lower = [-np.inf, FREQ_MIN, -np.inf, -np.inf]
    upper = [np.inf, FREQ_MAX, np.inf, np.inf]
    sol = least_squares(residual, p0, bounds=(lower, upper), method="trf",
                        xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=2000)
    p = sol.x if np.sum(sol.fun ** 2) <= np.sum(residual(p0) ** 2) else p0
    a, b, ph, d = (float(v) for v in p)
    if b < 0:
        a, b, ph = -a, -b, -ph + math.pi
    if a < 0:
        a, ph = -a, ph + math.pi
    term = SymbolicTerm(SINE, a, b, _wrap_phase(ph), d)
    return term, r_squared(y, term(x))


def fit_curve(x, y, kind: str | None = None) -> tuple[SymbolicTerm, float]:
    """Best of affine and sine fits to samples ``(x, y)`` with the R^2 achieved.

    ``kind`` forces one of the two forms.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.var(y) < 1e-12:
        return SymbolicTerm(AFFINE, 0.0, d=float(np.mean(y))), 1.0
    if np.ptp(x) == 0.0:
        return SymbolicTerm(AFFINE, 0.0, d=float(np.mean(y))), 0.0
    aff, r2_aff = _fit_affine(x, y)
    if kind == AFFINE:
        return aff, r2_aff
    sin_, r2_sin = _fit_sine(x, y)
    if kind == SINE:
        return sin_, r2_sin
    if r2_sin - r2_aff < AFFINE_PREFERENCE:
        return aff, r2_aff
    return sin_, r2_sin


def fit_edge(act: SplineActivation, sample_xs, kind: str | None = None) -> tuple[SymbolicTerm, float]:
    """Fit a sine or affine term to an edge function sampled at ``sample_xs``."""
    xs = np.asarray(sample_xs, dtype=float)
    if xs.size < MIN_FIT_POINTS:
        raise ValueError(f"need at least {MIN_FIT_POINTS} sample points, got {xs.size}")
    return fit_curve(xs, edge_eval(act, xs), kind)


def _quantile_sample(values: np.ndarray, m: int = MAX_FIT_POINTS) -> np.ndarray:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size <= m:
        return v
    return v[np.linspace(0, v.size - 1, m).round().astype(int)]


@dataclass
class EdgeFit:
    layer: int
    i: int
    j: int
    term: SymbolicTerm
    r2: float


@dataclass
class WitnessExpression:
    """Witness value as a function of named features.

    ``layers[l][i][j]`` holds the term for edge ``i -> j`` of layer ``l``
    (the tree form).  ``flat_terms``/``constant`` hold the collapsed form
    over raw features when available.  A state is flagged entangled when
    the value is at least ``decision_threshold``.
    """

    feature_labels: tuple[str, ...]
    layers: list | None = None
    flat_terms: list[SymbolicTerm] | None = None
    constant: float = 0.0
    decision_threshold: float = 0.5
    fit_quality: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.feature_labels = tuple(self.feature_labels)
        if self.layers is None and self.flat_terms is None:
            self.flat_terms = []

    @property
    def is_flat(self) -> bool:
        return self.flat_terms is not None

    def _matrix(self, features) -> np.ndarray:
        if isinstance(features, Mapping):
            missing = [k for k in self.feature_labels if k not in features]
            if missing:
                raise ValueError(f"missing feature {missing[0]}")
            return np.array([[float(features[k]) for k in self.feature_labels]])
        obs = getattr(features, "observables", None)
        if obs is not None:
            missing = [k for k in self.feature_labels if k not in obs]
            if missing:
                raise ValueError(f"missing feature {missing[0]}")
            vals = np.asarray(features.values if hasattr(features, "values") else features.features, float)
            cols = [tuple(obs).index(k) for k in self.feature_labels]
            return vals.reshape(-1, len(obs))[:, cols]
        x = np.asarray(features, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != len(self.feature_labels):
            raise ValueError(f"expected {len(self.feature_labels)} features, got {x.shape[1]}")
        return x

    def tree_value(self, x: np.ndarray) -> np.ndarray:
        h = x
        for layer in self.layers:
            n_out = len(layer[0])
            h = np.stack([sum(layer[i][j](h[:, i]) for i in range(len(layer))) for j in range(n_out)], axis=1)
        return h[:, 0]

    def flat_value(self, x: np.ndarray) -> np.ndarray:
        out = np.full(x.shape[0], float(self.constant))
        for t in self.flat_terms:
            out += t(x[:, t.arg])
        return out

    def value(self, features) -> np.ndarray:
        x = self._matrix(features)
        return self.flat_value(x) if self.is_flat else self.tree_value(x)

    def decide(self, features) -> np.ndarray:
        return (self.value(features) >= self.decision_threshold).astype(int)

    def signed_value(self, features) -> np.ndarray:
        """``threshold - W``: negative exactly when the state is flagged entangled."""
        return self.decision_threshold - self.value(features)

    # serialisation

    def to_dict(self) -> dict:
        return {
            "feature_labels": list(self.feature_labels),
            "layers": None if self.layers is None else [
                [[asdict(t) for t in row] for row in layer] for layer in self.layers
            ],
            "flat_terms": None if self.flat_terms is None else [asdict(t) for t in self.flat_terms],
            "constant": self.constant,
            "decision_threshold": self.decision_threshold,
            "fit_quality": list(self.fit_quality),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WitnessExpression":
        layers = d.get("layers")
        if layers is not None:
            layers = [[[SymbolicTerm(**t) for t in row] for row in layer] for layer in layers]
        flat = d.get("flat_terms")
        if flat is not None:
            flat = [SymbolicTerm(**t) for t in flat]
        return cls(tuple(d["feature_labels"]), layers, flat, float(d.get("constant", 0.0)),
                   float(d.get("decision_threshold", 0.5)), list(d.get("fit_quality", [])))


@dataclass
class FitReport:
    edges: list[EdgeFit]
    agreement: float

    def to_dict(self) -> dict:
        return {
            "agreement": self.agreement,
            "edges": [
                {"layer": e.layer, "i": e.i, "j": e.j, "kind": e.term.kind, "r2": e.r2,
                 "params": {"a": e.term.a, "b": e.term.b, "c": e.term.c, "d": e.term.d}}
                for e in self.edges
            ],
        }


def _flatten(layers: list) -> tuple[list[SymbolicTerm], float] | None:
    """Collapse the tree when every edge past the first layer is affine."""
    if any(t.kind != AFFINE for layer in layers[1:] for row in layer for t in row):
        return None
    first = layers[0]
    n_in, n_hidden = len(first), len(first[0])
    # each node as (weights over first-layer edges, constant)
    weights = np.zeros((n_hidden, n_in, n_hidden))
    for j in range(n_hidden):
        weights[j, :, j] = 1.0
    const = np.zeros(n_hidden)
    for layer in layers[1:]:
        n_out = len(layer[0])
        w_new = np.zeros((n_out, n_in, n_hidden))
        c_new = np.zeros(n_out)
        for k in range(n_out):
            for j in range(len(layer)):
                t = layer[j][k]
                w_new[k] += t.a * weights[j]
                c_new[k] += t.a * const[j] + t.d
        weights, const = w_new, c_new
    w = weights[0]
    constant = float(const[0])
    terms: list[SymbolicTerm] = []
    slopes = np.zeros(n_in)
    for i in range(n_in):
        for j in range(n_hidden):
            t = first[i][j].scaled(w[i, j])
            constant += t.d
            if t.kind == AFFINE:
                slopes[i] += t.a
            elif t.a != 0.0:
                terms.append(SymbolicTerm(SINE, t.a, t.b, t.c, 0.0, i))
    for i in range(n_in):
        if slopes[i] != 0.0:
            terms.append(SymbolicTerm(AFFINE, float(slopes[i]), arg=i))
    terms.sort(key=lambda t: (t.arg, t.kind != AFFINE, t.b))
    return terms, constant


def extract_witness(model: KanModel, probe, agreement_set=None, affine_deep: bool = False):
    """Fit every edge on the inputs it sees when ``probe`` flows through ``model``.

    Returns ``(WitnessExpression, FitReport)``.  Agreement with the network's
    own decisions is measured on ``agreement_set`` (defaults to the probe).
    ``affine_deep`` fits every edge past the first layer as affine, which
    always yields the flattened form.
    """
    x = probe.features if hasattr(probe, "features") else np.asarray(probe, dtype=float)
    if x.shape[0] < MIN_PROBE:
        raise ValueError(f"probe set needs at least {MIN_PROBE} samples, got {x.shape[0]}")
    labels = model.observables or tuple(f"x{i}" for i in range(model.architecture[0]))
    inputs = model.node_values(x)
    layers, fits = [], []
    for li, layer in enumerate(model.layers):
        rows = []
        for i in range(layer.n_in):
            xs = _quantile_sample(inputs[li][:, i])
            row = []
            for j in range(layer.n_out):
                kind = AFFINE if (affine_deep and li > 0) else None
                term, r2 = fit_edge(layer.activation(i, j), xs, kind)
                term.arg = i
                row.append(term)
                fits.append(EdgeFit(li, i, j, term, r2))
            rows.append(row)
        layers.append(rows)
    flat = _flatten(layers)
    witness = WitnessExpression(
        labels, layers=layers,
        flat_terms=None if flat is None else flat[0],
        constant=0.0 if flat is None else flat[1],
        decision_threshold=0.0,
        fit_quality=[f.r2 for f in fits],
    )
    check = x if agreement_set is None else (
        agreement_set.features if hasattr(agreement_set, "features") else np.asarray(agreement_set, float))
    agreement = float(np.mean(witness.decide(check) == predict(model, check)))
    return witness, FitReport(fits, agreement)


def evaluate_witness(w: WitnessExpression, features) -> tuple[float, int]:
    """Value and label (1 = entangled) of the witness on one feature vector."""
    value = float(w.value(features)[0])
    return value, int(value >= w.decision_threshold)


# -- rendering -------------------------------------------------------------------


def _num(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _signed(v: float, first: bool) -> str:
    s = _num(v)
    if first:
        return s
    return f"- {s[1:]}" if s.startswith("-") else f"+ {s}"


def _term_text(t: SymbolicTerm, arg: str) -> tuple[float, str]:
    if t.kind == SINE:
        ph = _num(t.c)
        inner = f"{_num(t.b)}*{arg}" + ("" if ph == "0.00" else (f" - {ph[1:]}" if ph.startswith("-") else f" + {ph}"))
        return t.a, f"sin({inner})"
    return t.a, f"{arg}"


def _render_sum(pieces: list[tuple[float, str]], constant: float) -> str:
    out = []
    for coef, body in pieces:
        if _num(coef) == "0.00":
            continue
        out.append(f"{_signed(coef, not out)} {body}")
    if _num(constant) != "0.00" or not out:
        out.append(_signed(constant, not out))
    return " ".join(out)


def render_witness(w: WitnessExpression) -> str:
    """Human-readable form with coefficients rounded to two decimals."""
    if w.is_flat:
        order = sorted(w.flat_terms, key=lambda t: (t.arg, t.kind != SINE, t.b, t.c))
        pieces = [_term_text(t, w.feature_labels[t.arg]) for t in order]
        offsets = sum(t.d for t in order)
        return _render_sum(pieces, w.constant + offsets)
    lines = []
    names = list(w.feature_labels)
    for li, layer in enumerate(w.layers):
        n_out = len(layer[0])
        last = li == len(w.layers) - 1
        new_names = []
        for j in range(n_out):
            terms = sorted((layer[i][j] for i in range(len(layer))), key=lambda t: (t.arg, t.b))
            pieces = [_term_text(t, names[t.arg]) for t in terms]
            name = "W" if last else f"h{li + 1}_{j}"
            lines.append(f"{name} = {_render_sum(pieces, sum(t.d for t in terms))}")
            new_names.append(name)
        names = new_names
    return "\n".join(lines)


def witness_from_terms(feature_labels: Sequence[str], terms: Sequence[tuple], constant: float,
                       decision_threshold: float = 0.5) -> WitnessExpression:
    """Build a flat witness from ``(label, a, b, c)`` sine tuples."""
    labels = tuple(feature_labels)
    flat = [SymbolicTerm(SINE, float(a), float(b), float(c), 0.0, labels.index(lab)) for lab, a, b, c in terms]
    return WitnessExpression(labels, flat_terms=flat, constant=float(constant),
                             decision_threshold=decision_threshold)


def save_witness(w: WitnessExpression, path, report: FitReport | None = None) -> str:
    doc = {"witness": w.to_dict(), "rendered": render_witness(w)}
    if report is not None:
        doc["fit_report"] = report.to_dict()
    text = json.dumps(doc, indent=1, sort_keys=True)
    atomic_write_text(path, text)
    return text


def load_witness(path) -> WitnessExpression:
    with open(path, encoding="utf-8") as fh:
        return WitnessExpression.from_dict(json.load(fh)["witness"])
