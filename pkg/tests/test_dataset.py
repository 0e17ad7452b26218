from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kan_witness import dataset as ds
from kan_witness import qstate
from kan_witness.qstate import GENERAL9, SYMMETRIC5, Family

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def general():
    return ds.generate_dataset("general9", 1000, seed=7)


def test_balance_and_range(general):
    assert len(general) == 1000
    assert general.n_entangled == 500 and general.n_separable == 500
    assert np.all(np.abs(general.features) <= 1 + 1e-12)
    assert general.observables == GENERAL9
    assert not general.noisy


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 300), st.sampled_from(list(Family)), st.integers(0, 10**6))
def test_balance_any_size(n, family, seed):
    d = ds.generate_dataset(family, n, seed)
    assert len(d) == n
    assert d.n_entangled - d.n_separable in (0, 1)


def test_deterministic(general):
    again = ds.generate_dataset("general9", 1000, seed=7)
    assert again.equals(general)
    assert not ds.generate_dataset("general9", 1000, seed=8).equals(general)


def test_labels_reproduced_from_features(general):
    rho = qstate.density_from_values(general.features)
    assert np.all(qstate.min_eigenvalues(rho) >= -1e-10)
    assert np.array_equal(qstate.entangled_mask(rho).astype(int), general.labels)


def test_symmetric_dataset_structure():
    d = ds.generate_dataset("symmetric5", 2000, seed=3)
    f = d.features
    assert d.observables == SYMMETRIC5
    assert np.allclose(f[:, 0], f[:, 3], atol=1e-10)
    assert np.allclose(f[:, 1], -f[:, 2], atol=1e-10)
    rho = qstate.density_from_values(f, SYMMETRIC5)
    assert np.array_equal(qstate.entangled_mask(rho).astype(int), d.labels)


def test_noise_statistics_and_labels():
    clean = ds.generate_dataset("general9", 100_000, seed=5)
    noisy = ds.generate_dataset("general9", 100_000, seed=5, noise_sigma=0.1)
    assert noisy.noisy
    assert np.array_equal(noisy.labels, clean.labels)
    diff = noisy.features - clean.features
    assert np.all(np.abs(diff.mean(axis=0)) <= 0.002)
    assert np.all(np.abs(diff.std(axis=0) - 0.1) <= 0.002)


def test_bad_arguments():
    with pytest.raises(ValueError):
        ds.generate_dataset("general9", 1, 0)
    with pytest.raises(ValueError):
        ds.generate_dataset("general9", 10, 0, noise_sigma=-0.1)
    with pytest.raises(ValueError):
        ds.SplitSpec(0.5, 0.2, 0.1)
    with pytest.raises(ValueError):
        ds.SplitSpec(1.0, 0.0, 0.0)


def test_split_sizes_and_partition():
    d = ds.generate_dataset("symmetric5", 100_000, seed=1)
    tr, va, te = ds.split(d, ds.SplitSpec(), seed=1)
    assert (len(tr), len(va), len(te)) == (70_000, 20_000, 10_000)
    for part in (tr, va, te):
        assert abs(part.labels.mean() - 0.5) <= 0.01
    rows = lambda x: sorted(map(tuple, np.column_stack([x.features, x.labels]).tolist()))
    merged = np.concatenate([p.features for p in (tr, va, te)])
    labels = np.concatenate([p.labels for p in (tr, va, te)])
    assert rows(d) == rows(ds.Dataset(d.family, merged, labels))


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 500), st.integers(0, 1000))
def test_split_remainder_to_train(n, seed):
    d = ds.generate_dataset("symmetric5", n, seed)
    tr, va, te = ds.split(d, seed=seed)
    assert len(va) == round(n * 0.2) and len(te) == round(n * 0.1)
    assert len(tr) + len(va) + len(te) == n


def test_project():
    d = ds.generate_dataset("general9", 20, seed=2)
    p = ds.project(d, ("YY", "XZ"))
    assert p.observables == ("YY", "XZ")
    assert np.array_equal(p.features, d.features[:, [4, 2]])
    with pytest.raises(ds.SchemaError):
        ds.project(ds.generate_dataset("symmetric5", 10, 0), ("XZ",))


def test_csv_roundtrip(tmp_path, general):
    noisy = ds.generate_dataset("symmetric5", 300, seed=4, noise_sigma=0.1)
    for d in (general, noisy):
        path = tmp_path / "d.csv"
        ds.save_dataset(d, path)
        back = ds.load_dataset(path)
        assert back.equals(d)
        assert back.noisy == d.noisy
    text = ds.dataset_to_text(noisy)
    assert "# noise_sigma=0.1" in text and "# noisy=true" in text


def test_two_row_fixture():
    d = ds.load_dataset(FIXTURES / "two_rows.csv")
    assert d.family is Family.GENERAL9 and d.seed is None
    assert d.feature_vector(0).as_dict() == {"XX": 1, "XY": 0, "XZ": 0, "YX": 0, "YY": -1, "YZ": 0,
                                             "ZX": 0, "ZY": 0, "ZZ": 1}
    fv = d.feature_vector(1)
    assert (fv["XX"], fv["YY"], fv["ZX"], fv["ZZ"]) == (-0.25, 0.125, 0.5, -0.0625)
    assert d.labels.tolist() == [1, 0]


def test_missing_label_column():
    text = "# family=general9\nXX,XY,XZ,YX,YY,YZ,ZX,ZY,ZZ\n" + ",".join(["0"] * 9) + "\n"
    with pytest.raises(ds.SchemaError):
        ds.parse_dataset(text)
    unlabeled = ds.parse_dataset(text, require_labels=False)
    assert unlabeled.features.shape == (1, 9)


def test_schema_errors():
    with pytest.raises(ds.SchemaError):
        ds.parse_dataset("XX,label\n0,1\n")
    with pytest.raises(ds.SchemaError):
        ds.parse_dataset("# family=symmetric5\nXX,XZ,label\n0,0,1\n")
    with pytest.raises(ds.SchemaError):
        ds.parse_dataset("# family=qutrit\nXX,label\n0,1\n")


def test_format_errors_name_line():
    head = "# family=symmetric5\nXX,XY,YX,YY,ZZ,label\n"
    with pytest.raises(ds.DatasetFormatError) as exc:
        ds.parse_dataset(head + "0,0,0,0,0,1\n0,0,0,0,1\n")
    assert exc.value.line == 4
    with pytest.raises(ds.DatasetFormatError) as exc:
        ds.parse_dataset(head + "0,0,zero,0,0,1\n")
    assert exc.value.line == 3
    with pytest.raises(ds.DatasetFormatError):
        ds.parse_dataset(head + "0,0,0,0,0,2\n")
