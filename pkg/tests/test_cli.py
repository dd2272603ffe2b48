import csv
import json

import numpy as np
import pytest

from localicl.cli import main
from localicl.config import ConfigError, ExperimentConfig, load_config, parse_config
from localicl.datagen import DataError
from localicl.io import ingest_csv, sha256_file, write_csv
from localicl.model import init_params, load_checkpoint, save_checkpoint

TINY_MODEL = {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "D_max": 4, "C_max": 3, "L_ctx_max": 900}
TINY_PRIOR = {"dims": [2, 4], "depth": [1, 2], "width": [4, 16], "classes": [2, 3], "size": [48, 96]}


def write_config(path, **overrides):
    doc = {
        "model": TINY_MODEL,
        "prior": TINY_PRIOR,
        "train": {"prior_fit": {"max_steps": 4, "eval_every": 2, "B": 2}, "finetune": {"max_steps": 4, "eval_every": 2, "N_qy": 8}},
        "retrieval": {"k_max": 50},
        "eval": {"folds": 2, "bootstrap_resamples": 50, "circles": {"n": 200, "seeds": 2, "pairs": [1, 3], "ks": [10, 30]}},
        "seed": 3,
    }
    for k, v in overrides.items():
        doc[k] = v
    path.write_text(json.dumps(doc))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def strip_wallclock(path):
    return [{k: v for k, v in r.items() if k != "wallclock_ms"} for r in read_rows(path)]


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.lcpf"
    save_checkpoint(init_params(parse_config({"model": TINY_MODEL}).model_config(), 0), path)
    return path


# -- config -------------------------------------------------------------------


def test_config_defaults_materialized():
    d = ExperimentConfig().to_dict()
    assert d["retrieval"]["k_max"] == 1000
    assert d["train"]["finetune"]["eval_every"] == 30
    assert d["model"]["C_max"] == 10


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"train": {"finetune": {"lr": 0.1, "typo": 2}}},
        {"model": {"d_model": 10, "n_heads": 4}},
        {"model": {"depth": 3}},
        {"retrieval": {"embedding": "encoder"}},
        {"prior": {"classes": [1, 3]}},
    ],
)
def test_config_rejects(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


def test_missing_config_exit_code(tmp_path, capsys):
    assert main(["priorfit", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "config" in capsys.readouterr().err


# -- ingestion ----------------------------------------------------------------


def _csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def test_ingest_nan_cell_rejected_with_location(tmp_path):
    p = _csv(tmp_path / "d.csv", ["a", "b", "y"], [[1, 2, 0], [3, "nan", 1]])
    with pytest.raises(DataError, match=r"row 3.*'b'"):
        ingest_csv(p, "y")


def test_ingest_unparseable_and_empty(tmp_path):
    with pytest.raises(DataError, match="row 2"):
        ingest_csv(_csv(tmp_path / "a.csv", ["a", "y"], [["x1", 0], [2, 1]]), "y")
    with pytest.raises(DataError, match="row 3"):
        ingest_csv(_csv(tmp_path / "b.csv", ["a", "y"], [[1, 0], ["", 1]]), "y")


def test_ingest_too_many_classes(tmp_path):
    p = _csv(tmp_path / "d.csv", ["a", "y"], [[i, i] for i in range(11)])
    with pytest.raises(DataError, match="11 classes"):
        ingest_csv(p, "y")


def test_ingest_labels_by_first_appearance(tmp_path):
    p = _csv(tmp_path / "d.csv", ["a", "c", "y"], [[1, "red", "yes"], [2, "blue", "no"], [3, "red", "yes"]])
    ds = ingest_csv(p, "y", cat_cols=["c"])
    np.testing.assert_array_equal(ds.labels, [0, 1, 0])
    np.testing.assert_array_equal(ds.features[:, 1], [0, 1, 0])
    assert ds.cat_mask.tolist() == [False, True]


def test_write_csv_atomic_and_nan(tmp_path):
    p = tmp_path / "o.csv"
    write_csv(p, ["a", "b"], [{"a": 1, "b": float("nan")}])
    assert p.read_text().splitlines() == ["a,b", "1,"]
    assert not [f for f in tmp_path.iterdir() if f.name != "o.csv"]


# -- commands -----------------------------------------------------------------


def test_priorfit_manifest_and_determinism(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    outs = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        assert main(["priorfit", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out)
    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["outputs"]["prior.lcpf"] == sha256_file(outs[0] / "prior.lcpf")
    for name in ("train_log.csv", "config.resolved.json"):
        assert name in man["outputs"]
    assert man["config"]["seed"] == 3 and "prior_fit" in man["wallclock_ms"]
    assert (outs[0] / "prior.lcpf").read_bytes() == (outs[1] / "prior.lcpf").read_bytes()
    assert strip_wallclock(outs[0] / "train_log.csv") == strip_wallclock(outs[1] / "train_log.csv")
    assert [r["step"] for r in read_rows(outs[0] / "train_log.csv")] == ["2", "4"]
    load_checkpoint(outs[0] / "prior.lcpf")


def test_evaluate_rows_and_determinism(tmp_path, checkpoint):
    cfg = write_config(tmp_path / "c.json")
    methods = "icl_full,icl_knn,icl_ensemble,icl_chunked,knn_baseline"
    outs = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        argv = ["evaluate", "--config", str(cfg), "--checkpoint", str(checkpoint), "--out", str(out), "--methods", methods,
                "--generator", "circles:pairs=2,n=150,seed=1", "--generator", "prior:seed=4,n=120"]
        assert main(argv) == 0
        outs.append(out)
    rows = read_rows(outs[0] / "records.csv")
    # datasets x folds x methods x metrics, unless the prior task is skipped for width
    agg = json.loads((outs[0] / "aggregates.json").read_text())
    n_ds = 2 - len(agg["skipped"])
    assert len(rows) == n_ds * 2 * 5 * 3
    assert (outs[0] / "records.csv").read_bytes() == (outs[1] / "records.csv").read_bytes()
    assert (outs[0] / "aggregates.json").read_bytes() == (outs[1] / "aggregates.json").read_bytes()
    # small datasets: icl_full has every training row, so it matches icl_knn with k=N
    by = {(r["dataset"], r["fold"], r["method"], r["metric"]): float(r["value"]) for r in rows}
    for (d, f, m, met), v in by.items():
        if m == "icl_full":
            assert abs(by[(d, f, "icl_chunked", met)] - v) <= 1e-10


def test_evaluate_skips_wide_dataset(tmp_path, checkpoint):
    p = _csv(tmp_path / "wide.csv", [f"x{i}" for i in range(6)] + ["y"], [[*range(6), i % 2] for i in range(40)])
    out = tmp_path / "o"
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--out", str(out), "--dataset", str(p), "--label-col", "y",
                 "--generator", "circles:pairs=1,n=100,seed=0", "--folds", "1", "--methods", "icl_knn"]) == 0
    agg = json.loads((out / "aggregates.json").read_text())
    assert "wide" in agg["skipped"]


def test_evaluate_bad_method_and_missing_checkpoint(tmp_path, checkpoint):
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--out", str(tmp_path), "--methods", "magic",
                 "--generator", "circles:n=100"]) == 2
    assert main(["evaluate", "--checkpoint", str(tmp_path / "none.lcpf"), "--out", str(tmp_path),
                 "--generator", "circles:n=100"]) == 2


def test_sweep_counts_and_full_duplicate(tmp_path, checkpoint):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "s"
    assert main(["circles-sweep", "--config", str(cfg), "--checkpoint", str(checkpoint), "--out", str(out),
                 "--k", "10,1000"]) == 0
    rows = read_rows(out / "sweep.csv")
    assert len(rows) == 2 * 2 * 3
    full = {(r["pairs"], r["seed"]): float(r["auc"]) for r in rows if r["k"] == "full"}
    for r in rows:
        if r["k"] == "1000":
            assert abs(float(r["auc"]) - full[(r["pairs"], r["seed"])]) <= 1e-10
    out2 = tmp_path / "s2"
    main(["circles-sweep", "--config", str(cfg), "--checkpoint", str(checkpoint), "--out", str(out2), "--k", "10,1000"])
    assert (out / "sweep.csv").read_bytes() == (out2 / "sweep.csv").read_bytes()


def test_finetune_step0_matches_evaluate(tmp_path, checkpoint):
    cfg = write_config(tmp_path / "c.json")
    gen = "circles:pairs=2,n=300,seed=5"
    ft = tmp_path / "ft"
    assert main(["finetune", "--config", str(cfg), "--checkpoint", str(checkpoint), "--out", str(ft), "--generator", gen]) == 0
    metrics = json.loads((ft / "metrics.json").read_text())
    assert set(metrics["wallclock_ms"]) == {"eval_before", "finetune", "eval_after"}
    ev = tmp_path / "ev"
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(checkpoint), "--out", str(ev), "--generator", gen,
                 "--methods", "icl_knn", "--folds", "1"]) == 0
    rec = {r["metric"]: float(r["value"]) for r in read_rows(ev / "records.csv")}
    for metric, value in metrics["before"].items():
        assert value == pytest.approx(rec[metric], abs=1e-12)
    man = json.loads((ft / "manifest.json").read_text())
    assert set(man["outputs"]) == {"finetuned.lcpf", "finetune_log.csv", "metrics.json"}
    load_checkpoint(ft / "finetuned.lcpf")


def test_report_and_generate(tmp_path, checkpoint):
    gen_path = tmp_path / "g.csv"
    assert main(["generate", "circles", "--out", str(gen_path), "--n", "120", "--pairs", "2"]) == 0
    ev = tmp_path / "ev"
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--out", str(ev), "--dataset", str(gen_path), "--label-col",
                 "label", "--generator", "circles:pairs=1,n=120", "--folds", "2", "--methods", "icl_knn,knn_baseline"]) == 0
    rep = tmp_path / "rep"
    assert main(["report", "--records", str(ev / "records.csv"), "--aggregates", str(ev / "aggregates.json"), "--out",
                 str(rep), "--bins", "2", "--size-edges", "100"]) == 0
    result = json.loads((rep / "report.json").read_text())
    assert {"aggregates", "complexity_bins", "size_bins"} <= set(result)


def test_corrupt_data_exit_code(tmp_path, checkpoint):
    p = _csv(tmp_path / "bad.csv", ["a", "y"], [[1, 0], ["oops", 1]])
    assert main(["finetune", "--checkpoint", str(checkpoint), "--out", str(tmp_path / "o"), "--dataset", str(p),
                 "--label-col", "y"]) == 3
