import json

import pytest

from kan_witness import cli
from kan_witness import dataset as ds
from kan_witness import ranking

FAST = ["--epochs", "4", "--batch-size", "128"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("gen-data", "--family", "general9", "--n", 3000, "--seed", 7, "--out", out) == 0
    assert run("train", *FAST, "--seed", 7, "--out", out) == 0
    assert run("extract", "--model", out / "models/model.json", "--probe", out / "data/validation.csv",
               "--holdout", out / "data/test.csv", "--out", out) == 0
    return out


def test_gen_data(tmp_path):
    assert run("gen-data", "--family", "general9", "--n", 1000, "--seed", 7, "--out", tmp_path) == 0
    d = ds.load_dataset(tmp_path / "data/dataset.csv")
    assert len(d) == 1000 and d.n_entangled == 500
    sizes = [len(ds.load_dataset(tmp_path / f"data/{p}.csv")) for p in ("train", "validation", "test")]
    assert sizes == [700, 200, 100]
    stage = manifest(tmp_path)["stages"]["gen-data"]
    assert set(stage["artifacts"]) == {"data/dataset.csv", "data/train.csv", "data/validation.csv", "data/test.csv"}
    assert stage["config"]["seed"] == 7


def test_gen_data_noise_header(tmp_path):
    assert run("gen-data", "--n", 200, "--noise-sigma", 0.1, "--out", tmp_path) == 0
    text = (tmp_path / "data/dataset.csv").read_text()
    assert "# noise_sigma=0.1" in text and "# noisy=true" in text


def test_invalid_fractions_leave_nothing(tmp_path):
    out = tmp_path / "bad"
    assert run("gen-data", "--train-fraction", 0.5, "--out", out) == 2
    assert not out.exists()


def test_usage_errors(tmp_path):
    assert run("no-such-command") == 2
    assert run("gen-data", "--n", 1, "--out", tmp_path) == 2
    assert run("gen-data", "--architecture", "9-6-2", "--out", tmp_path) == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"n": 300, "seed": 3, "architecture": [9, 4, 1]}))
    out = tmp_path / "o"
    assert run("gen-data", "--config", cfg, "--seed", 5, "--out", out) == 0
    snap = manifest(out)["config"]
    assert (snap["n"], snap["seed"], snap["architecture"]) == (300, 5, "9-4-1")
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("gen-data", "--config", cfg, "--out", out) == 2
    assert run("gen-data", "--config", tmp_path / "missing.json", "--out", out) == 2


def test_profiles():
    parser = cli.build_parser()
    smoke = cli.load_config(parser.parse_args(["bootstrap"]))
    paper = cli.load_config(parser.parse_args(["bootstrap", "--profile", "paper"]))
    assert (smoke.n, smoke.bootstrap_m) == (5000, 3)
    assert (paper.n, paper.bootstrap_m, paper.epochs) == (100_000, 20, 200)


def test_train_outputs_and_idempotence(pipeline, tmp_path):
    report = json.loads((pipeline / "models/model-report.json").read_text())
    assert "accuracy" in report["test"] and report["model"] == "9-6-3-1"
    model = json.loads((pipeline / "models/model.json").read_text())
    assert model["meta"]["dataset_seed"] == 7
    assert model["meta"]["train_config"]["epochs"] == 4
    before = manifest(pipeline)["stages"]["train-model"]["artifacts"]
    assert run("train", *FAST, "--seed", 7, "--out", pipeline) == 0
    assert manifest(pipeline)["stages"]["train-model"]["artifacts"] == before


def test_train_architecture_mismatch(pipeline, tmp_path):
    assert run("train", *FAST, "--architecture", "5-3-1", "--train", pipeline / "data/train.csv",
               "--validation", pipeline / "data/validation.csv", "--test", pipeline / "data/test.csv",
               "--out", tmp_path) == 2
    assert not (tmp_path / "models").exists()


def test_train_divergence_exit_code(tmp_path):
    head = "# family=symmetric5\nXX,XY,YX,YY,ZZ,label\n"
    bad = tmp_path / "nan.csv"
    bad.write_text(head + "nan,0,0,0,0,1\n0,0,0,0,0,0\n")
    assert run("train", *FAST, "--train", bad, "--validation", bad, "--test", bad, "--out", tmp_path) == 3


def test_evaluate(pipeline):
    assert run("evaluate", "--model", pipeline / "models/model.json", "--dataset", pipeline / "data/test.csv",
               "--out", pipeline) == 0
    report = json.loads((pipeline / "reports/evaluation.json").read_text())
    assert set(report["confusion"]) == {"tp", "fn", "tn", "fp"}


def test_extract_outputs(pipeline):
    doc = json.loads((pipeline / "witness/witness.json").read_text())
    assert "agreement" in doc["fit_report"]
    assert manifest(pipeline)["stages"]["extract-witness"]["agreement"] == doc["fit_report"]["agreement"]
    assert (pipeline / "witness/witness.txt").read_text().strip() == doc["rendered"]


def test_extract_missing_probe(pipeline):
    assert run("extract", "--model", pipeline / "models/model.json", "--probe", pipeline / "nope.csv",
               "--out", pipeline) == 2


def test_eval_witness(pipeline):
    assert run("eval-witness", "--witness", pipeline / "witness/witness.json", "--dataset",
               pipeline / "data/validation.csv", "--model", pipeline / "models/model.json", "--out", pipeline) == 0
    rep = json.loads((pipeline / "reports/witness-eval.json").read_text())
    assert set(rep["witness"]["confusion"]) == {"tp", "fn", "tn", "fp"}
    assert abs(rep["witness"]["accuracy"] - rep["model"]["accuracy"]) <= 0.03


def test_eval_witness_needs_labels(pipeline, tmp_path):
    text = (pipeline / "data/test.csv").read_text().splitlines()
    stripped = [",".join(line.split(",")[:-1]) if not line.startswith("#") else line for line in text]
    path = tmp_path / "unlabelled.csv"
    path.write_text("\n".join(stripped) + "\n")
    assert run("eval-witness", "--witness", pipeline / "witness/witness.json", "--dataset", path,
               "--out", tmp_path) == 2


def test_split_command(pipeline, tmp_path):
    assert run("split", "--dataset", pipeline / "data/dataset.csv", "--seed", 7, "--out", tmp_path) == 0
    assert (tmp_path / "data/train.csv").read_text() == (pipeline / "data/train.csv").read_text()


def test_report_verifies_digests(pipeline, tmp_path, capsys):
    assert run("report", "--out", pipeline) == 0
    assert "ok " in capsys.readouterr().out
    assert run("report", "--out", tmp_path) == 2
    copy = tmp_path / "copy"
    copy.mkdir()
    (copy / "manifest.json").write_text((pipeline / "manifest.json").read_text())
    assert run("report", "--out", copy) == 3


def test_bootstrap_smoke(tmp_path):
    args = ["bootstrap", "--n", 1500, "--bootstrap-m", 3, "--epochs", 2, "--batch-size", 256, "--seed", 2]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(*args, "--out", a) == 0
    assert run(*args, "--jobs", 2, "--out", b) == 0
    topk = (a / "bootstrap/topk.csv").read_text().splitlines()
    assert len(topk) == 9 and all(len(row.split(",")) == 10 for row in topk)
    table = ranking.TopKFrequencyTable.from_dict(json.loads((a / "bootstrap/topk.json").read_text()))
    table.check()
    curve = (a / "bootstrap/curve.csv").read_text().splitlines()[1:]
    assert [row.split(",")[1] for row in curve] == ["-".join(map(str, ranking.REDUCED_ARCHITECTURES[m]))
                                                    for m in range(1, 9)]
    assert manifest(a)["stages"]["bootstrap"]["artifacts"] == manifest(b)["stages"]["bootstrap"]["artifacts"]
