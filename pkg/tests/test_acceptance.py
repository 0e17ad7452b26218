"""End-to-end acceptance checks, one test per criterion.

``KAN_WITNESS_SCALE=smoke`` switches the two full-size classification
runs to their 20,000-sample variants; everything else is fixed.  Each test
records a single PASS/FAIL line that is repeated in the terminal summary.
"""

import functools
import json
import os
import time

import numpy as np

from kan_witness import dataset as ds
from kan_witness import kan, qstate, ranking, symbolic
from kan_witness._seeds import derive_seed
from kan_witness.kan import KanModel, TrainConfig
from kan_witness.qstate import Family
from kan_witness.ranking import TopKFrequencyTable

from oracles import witness_by_hand, finite_difference_check, load_published_witness, load_published_topk

SCALE = os.environ.get("KAN_WITNESS_SCALE", "full")
FULL_N = 20_000 if SCALE == "smoke" else 100_000
SEED = 0
WITNESS_OBSERVABLES = ("XY", "XZ", "YX", "YY")


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def classification_run(family, n, seed, noise_sigma=0.0):
    """Generate, split, train the full architecture and evaluate on the test split."""
    t0 = time.perf_counter()
    data = ds.generate_dataset(family, n, seed, noise_sigma)
    tr, va, te = ds.split(data, seed=seed)
    config = TrainConfig(seed=seed)
    model = KanModel.create(ranking.FULL_ARCHITECTURES[Family(family)], seed=seed, observables=data.observables)
    best, hist = kan.train(model, tr, va, config)
    best.meta["dataset_seed"] = seed
    return best, hist, kan.evaluate(best, te), time.perf_counter() - t0


def witness_run(seed):
    """Train the four-observable model and extract its witness; returns serialised artifacts."""
    t0 = time.perf_counter()
    data = ds.generate_dataset("general9", 20_000, seed)
    tr, va, te = ds.split(data, seed=seed)
    model, _ = ranking.fit_projected(tr, va, te, WITNESS_OBSERVABLES, (4, 2, 1), TrainConfig(seed=seed))
    probe, held_out = ds.project(va, WITNESS_OBSERVABLES), ds.project(te, WITNESS_OBSERVABLES)
    witness, report = symbolic.extract_witness(model, probe, held_out)
    text = json.dumps({"witness": witness.to_dict(), "rendered": symbolic.render_witness(witness),
                       "fit_report": report.to_dict()}, sort_keys=True)
    return model.dumps(), text, report.agreement, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def cached_witness_run(seed):
    return witness_run(seed)


# -- 1 -------------------------------------------------------------------------------


def test_c01_ppt_oracle_exactness(criterion):
    rng = np.random.default_rng(derive_seed(SEED, "acceptance-1"))
    t0 = time.perf_counter()
    checked = agree = 0
    for _ in range(10_000):
        x = qstate.sample_x_state(rng)
        s = abs(x.t1) + abs(x.t2) + abs(x.t3)
        if abs(s - 1) <= 1e-9:
            continue
        checked += 1
        agree += qstate.is_entangled_ppt(qstate.x_state_density(x)) == (s > 1)
    dt = time.perf_counter() - t0
    criterion(1, agree == checked and dt < 10, f"PPT agrees on {agree}/{checked} X-states in {dt:.1f}s")


# -- 2 -------------------------------------------------------------------------------


def test_c02_haar_sanity(criterion):
    rng = np.random.default_rng(derive_seed(SEED, "acceptance-2"))
    u, dt = timed(qstate.haar_unitaries, rng, 100_000)
    resid = np.abs(u @ np.conj(np.swapaxes(u, -1, -2)) - np.eye(2)).max()
    mean = float(np.mean(np.abs(u[:, 0, 0]) ** 2))
    ok = abs(mean - 0.5) <= 0.01 and resid <= 1e-12 and dt < 30
    criterion(2, ok, f"mean |U00|^2 = {mean:.4f}, max unitarity residual {resid:.1e}, {dt:.2f}s")


# -- 3 -------------------------------------------------------------------------------


def test_c03_tetrahedron_rate(criterion):
    rng = np.random.default_rng(derive_seed(SEED, "acceptance-3"))
    t0 = time.perf_counter()
    cand = rng.uniform(-1, 1, (100_000, 3))
    rate = float(qstate.in_tetrahedron(cand).mean())
    pts, drawn = qstate.sample_x_states(rng, 33_000)
    sampler_rate = len(pts) / drawn
    dt = time.perf_counter() - t0
    ok = abs(rate - 1 / 3) <= 0.01 and abs(sampler_rate - 1 / 3) <= 0.01 and dt < 5
    criterion(3, ok, f"acceptance rate {rate:.4f} (sampler {sampler_rate:.4f}), target 0.3333, {dt:.2f}s")


# -- 4 -------------------------------------------------------------------------------


def test_c04_label_invariance(criterion):
    rng = np.random.default_rng(derive_seed(SEED, "acceptance-4"))
    t0 = time.perf_counter()
    same = 0
    for _ in range(10_000):
        x = qstate.sample_x_state(rng)
        u1, u2 = qstate.haar_unitary(rng), qstate.haar_unitary(rng)
        before = qstate.is_entangled_ppt(qstate.x_state_density(x))
        same += qstate.is_entangled_ppt(qstate.rotate_locally(x, u1, u2)) == before
    dt = time.perf_counter() - t0
    criterion(4, same == 10_000 and dt < 60, f"verdict unchanged on {same}/10000 rotated states in {dt:.1f}s")


# -- 5 -------------------------------------------------------------------------------


def test_c05_gradient_check(criterion):
    rng = np.random.default_rng(derive_seed(SEED, "acceptance-5"))
    t0 = time.perf_counter()
    worst, total = 0.0, 0
    for model_idx in range(20):
        arch = (2, 2, 1) if model_idx % 2 == 0 else (3, 2, 1)
        m = KanModel.create(arch, seed=int(rng.integers(2**31)))
        probes = 0
        # small models have fewer than 100 parameters, so later batches re-probe them on fresh inputs
        while probes < 100:
            x = rng.uniform(-1, 1, (8, arch[0]))
            y = rng.integers(0, 2, 8)
            err, k = finite_difference_check(m, x, y, 100 - probes, rng)
            worst, probes = max(worst, err), probes + k
        total += probes
    dt = time.perf_counter() - t0
    criterion(5, worst < 1e-5 and dt < 60,
              f"worst relative gradient error {worst:.1e} over 20 models, {total} probes, {dt:.1f}s")


# -- 6 -------------------------------------------------------------------------------


def test_c06_general9_classification(criterion):
    best, hist, report, dt = classification_run("general9", FULL_N, SEED)
    if FULL_N == 100_000:
        acc_min, budget = 0.92, 45 * 60
        per_class = min(report.precision(0), report.precision(1), report.recall(0), report.recall(1))
        ok = report.accuracy >= acc_min and per_class >= 0.90
    else:
        acc_min, budget = 0.90, 8 * 60
        per_class = min(report.precision(0), report.precision(1), report.recall(0), report.recall(1))
        ok = report.accuracy >= acc_min
    ok = ok and dt <= budget and hist.best_train_loss < hist.initial_loss
    criterion(6, ok, f"9-6-3-1 on {FULL_N} clean general9: accuracy {report.accuracy:.4f} (>= {acc_min}), "
                     f"min precision/recall {per_class:.4f}, {dt:.0f}s")


# -- 7 -------------------------------------------------------------------------------


def test_c07_symmetric5_classification(criterion):
    best, hist, report, dt = classification_run("symmetric5", FULL_N, SEED)
    acc_min = 0.96 if FULL_N == 100_000 else 0.95
    ok = report.accuracy >= acc_min and hist.best_train_loss < hist.initial_loss
    criterion(7, ok, f"5-3-1 on {FULL_N} clean symmetric5: accuracy {report.accuracy:.4f} (>= {acc_min}), {dt:.0f}s")


# -- 8 -------------------------------------------------------------------------------


def test_c08_noise_experiment(criterion):
    accs = {}
    for family in ("general9", "symmetric5"):
        _, _, report, _ = classification_run(family, FULL_N, SEED, 0.1)
        accs[family] = report.accuracy
    ok = all(a >= 0.87 for a in accs.values())
    criterion(8, ok, "noise sigma 0.1 on all splits: " +
              ", ".join(f"{k} {v:.4f}" for k, v in accs.items()) + " (each >= 0.87)")


# -- 9 -------------------------------------------------------------------------------


def test_c09_reduced_feature_curve(criterion):
    n = 20_000
    t0 = time.perf_counter()
    config = TrainConfig(seed=SEED)
    boot = ranking.bootstrap_rank("general9", m=20, n=n, base_seed=SEED, train_config=config)
    table = ranking.aggregate_topk(boot.rankings)
    table.check()
    points = ranking.reduced_model_curve(table, "general9", n, SEED, config)
    tr, va, te = ranking.curve_splits("general9", n, SEED)
    base_cfg = TrainConfig(seed=derive_seed(SEED, "curve-model", 9))
    _, base = ranking.fit_projected(tr, va, te, qstate.GENERAL9, (9, 6, 3, 1), base_cfg)
    dt = time.perf_counter() - t0
    published = load_published_topk()["curve_accuracy"]
    # the published curve sits under a 0.94 full-feature model; shift it to the local baseline
    shift = base.accuracy - 0.94
    accs = [p.accuracy for p in points]
    band = all(abs(a - (ref + shift)) <= 0.04 for a, ref in zip(accs, published))
    monotone = all(b >= a - 0.01 for a, b in zip(accs, accs[1:]))
    absolute = accs[3] >= 0.75 and accs[7] >= 0.84
    criterion(9, band and monotone and absolute and len(boot) == 20,
              f"curve {[round(a, 3) for a in accs]}, local 9-feature {base.accuracy:.3f}; "
              f"band {band}, monotone {monotone}, m4/m8 absolute {absolute}; {dt:.0f}s")


# -- 10 ------------------------------------------------------------------------------


def test_c10_published_topk_logic(criterion):
    doc = load_published_topk()
    t0 = time.perf_counter()
    table = TopKFrequencyTable(doc["labels"], doc["counts"], doc["n_models"])
    sums = all(int(table.counts[k - 1].sum()) == 20 * k for k in range(1, 9))
    nested = bool(np.all(np.diff(table.counts, axis=0) >= 0))
    wrong = []
    for m, want in doc["selections"].items():
        sel = ranking.select_features(table, int(m))
        if set(sel.observables) != set(want["observables"]) or sel.architecture != tuple(want["architecture"]):
            wrong.append(m)
    dt = time.perf_counter() - t0
    criterion(10, sums and nested and not wrong and dt < 1,
              f"row sums {sums}, nesting {nested}, selections differing for m in {wrong or 'none'}, {dt * 1e3:.1f}ms")


# -- 11 ------------------------------------------------------------------------------


def synthetic_fits_ok():
    xs = np.linspace(-1.2, 1.2, 200)
    knots = kan.make_knots()

    def fit(fn):
        act = kan.SplineActivation(knots, kan.fit_spline_coefficients(fn, knots, n=2001), 0.0, 1.0)
        return symbolic.fit_edge(act, xs)

    sine, r2_s = fit(lambda x: 0.5 * np.sin(3 * x - 1) + 0.2)
    aff, r2_a = fit(lambda x: 2 * x + 0.3)
    const, _ = fit(lambda x: np.full_like(x, 0.7))
    dphase = abs((sine.c + 1 + np.pi) % (2 * np.pi) - np.pi)
    return (sine.kind == symbolic.SINE and abs(sine.a - 0.5) <= 0.02 and abs(sine.b - 3) <= 0.05
            and dphase <= 0.05 and r2_s >= 0.999
            and aff.kind == symbolic.AFFINE and abs(aff.a - 2) <= 1e-3 and abs(aff.d - 0.3) <= 1e-3 and r2_a >= 0.9999
            and const.kind == symbolic.AFFINE and abs(const.a) <= 1e-6 and abs(const.d - 0.7) <= 1e-6)


def test_c11_extraction_fidelity(criterion):
    _, _, agreement, dt = cached_witness_run(SEED)
    fits = synthetic_fits_ok()
    criterion(11, agreement >= 0.95 and fits and dt < 300,
              f"4-2-1 witness agrees with network on {agreement:.4f} of held-out states; "
              f"synthetic edge fits {'ok' if fits else 'off'}; {dt:.0f}s")


# -- 12 ------------------------------------------------------------------------------


def test_c12_published_witness_fixture(criterion):
    doc = load_published_witness()
    t0 = time.perf_counter()
    w = symbolic.witness_from_terms(doc["feature_labels"], doc["terms"], doc["constant"])
    value, _ = symbolic.evaluate_witness(w, {k: 0.0 for k in doc["feature_labels"]})
    by_hand = witness_by_hand({})
    dt = time.perf_counter() - t0
    ok = abs(value - 1.22) <= 0.01 and abs(value - by_hand) <= 1e-12 and dt < 1
    criterion(12, ok, f"published witness at zero features = {value:.4f} (by hand {by_hand:.4f}), target 1.22")


# -- 13 ------------------------------------------------------------------------------


def test_c13_determinism(criterion):
    first, _, _, _ = classification_run("general9", FULL_N, SEED)
    again, _, _, _ = classification_run.__wrapped__("general9", FULL_N, SEED)
    model_same = first.dumps() == again.dumps()
    m1, w1, _, _ = cached_witness_run(SEED)
    m2, w2, _, _ = witness_run(SEED)
    witness_same = m1 == m2 and w1 == w2
    criterion(13, model_same and witness_same,
              f"repeat of run 6 model identical: {model_same}; repeat of run 11 model and witness identical: {witness_same}")
