import json
import math
import os

import numpy as np
import pytest

from listda.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, compare_reports, main
from listda.data import Dataset, read_config, write_letor
from listda.metrics import MetricReport, RankedList
from listda.models import MLPScorer, save_checkpoint


def _write_spec(path, **values):
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return str(path)


@pytest.fixture
def generated(tmp_path):
    spec = _write_spec(tmp_path / "spec.cfg", n_lists=40, shift="affine")
    assert main(["gen", "--spec", spec, "--seed", "1", "--out", str(tmp_path / "g")]) == EXIT_OK
    return tmp_path / "g"


def test_gen_writes_deterministic_bundle(tmp_path, generated):
    assert sorted(os.listdir(generated)) == ["features.manifest", "manifest.json", "source.letor",
                                             "spec.cfg", "target.letor", "truth.cfg"]
    spec = str(tmp_path / "spec.cfg")
    assert main(["gen", "--spec", spec, "--seed", "1", "--out", str(tmp_path / "again")]) == EXIT_OK
    for name in os.listdir(generated):
        if name != "manifest.json":
            assert (generated / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    manifest = json.loads((generated / "manifest.json").read_text())
    assert manifest["seed"] == 1 and "numpy" in manifest["versions"]


def test_gen_listwise_truth_flags(tmp_path):
    spec = _write_spec(tmp_path / "s.cfg", n_lists=64, shift="listwise_correlation")
    assert main(["gen", "--spec", spec, "--out", str(tmp_path / "g")]) == EXIT_OK
    truth = read_config(tmp_path / "g" / "truth.cfg")
    assert truth["item_level_closer"] == "true" and truth["list_level_positive"] == "true"
    assert float(truth["w1_list"]) > float(truth["w1_item"])


def test_gen_errors(tmp_path, generated, capsys):
    assert main(["gen", "--spec", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert "spec file not found" in capsys.readouterr().err
    spec = str(tmp_path / "spec.cfg")
    assert main(["gen", "--spec", spec, "--seed", "1", "--out", str(generated)]) == EXIT_USAGE
    assert main(["gen", "--spec", spec, "--seed", "2", "--out", str(generated), "--force"]) == EXIT_OK
    bad = _write_spec(tmp_path / "bad.cfg", shift="sideways")
    assert main(["gen", "--spec", bad, "--out", str(tmp_path / "y")]) == EXIT_USAGE
    assert not (tmp_path / "y").exists()


def _train(g, out, *extra):
    return main(["train", "--source", str(g / "source.letor"), "--target", str(g / "target.letor"),
                 "--manifest", str(g / "features.manifest"), "--eval", str(g / "target.letor"),
                 "--steps", "20", "--out", str(out), *extra])


def test_train_outputs_and_determinism(tmp_path, generated):
    assert _train(generated, tmp_path / "a", "--mode", "list_da", "--seed", "3") == EXIT_OK
    assert _train(generated, tmp_path / "b", "--mode", "list_da", "--seed", "3") == EXIT_OK
    for name in ("checkpoint.ckpt", "train_log.tsv", "report.tsv", "train.cfg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "train_log.tsv").read_text().splitlines()) == 20


def test_train_zero_shot_reports_ndcg(tmp_path, generated, capsys):
    assert main(["train", "--source", str(generated / "source.letor"), "--mode", "zero_shot",
                 "--steps", "10", "--out", str(tmp_path / "z")]) == EXIT_OK
    report = MetricReport.from_tsv((tmp_path / "z" / "report.tsv").read_text())
    assert any(m.startswith("ndcg") for m in report.metrics)
    assert "ndcg" in capsys.readouterr().out


def test_train_precedence_and_validation(tmp_path, generated):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("steps = 4\nlambda = 0.5\neta_ad = 0.2\n")
    assert _train(generated, tmp_path / "p", "--config", str(cfg), "--lambda", "0.25") == EXIT_OK
    saved = read_config(tmp_path / "p" / "train.cfg")
    assert (saved["lambda"], saved["eta_ad"], saved["steps"]) == ("0.25", "0.2", "20")
    assert main(["train", "--source", str(generated / "source.letor"), "--mode", "list_da",
                 "--out", str(tmp_path / "nt")]) == EXIT_USAGE
    cfg.write_text("lambda = lots\n")
    assert _train(generated, tmp_path / "bad", "--config", str(cfg)) == EXIT_USAGE
    assert not (tmp_path / "bad").exists()


def test_train_numerical_abort_exit_code(tmp_path, generated, capsys):
    with np.errstate(all="ignore"):
        code = _train(generated, tmp_path / "n", "--eta-rank", "1e8", "--eta-ad", "1e8")
    assert code == EXIT_NUMERIC
    assert "numerical abort" in capsys.readouterr().err
    assert not (tmp_path / "n").exists()


def test_grid_driver(tmp_path, generated):
    code = _train(generated, tmp_path / "grid", "--steps", "3", "--grid-lambda", "0.1,1", "--grid-eta-ad", "0.05",
                  "--jobs", "2")
    assert code == EXIT_OK
    rows = (tmp_path / "grid" / "grid.tsv").read_text().splitlines()
    assert rows[0] == "point\texit_code\tmeans"
    assert [r.split("\t")[:2] for r in rows[1:]] == [["lambda=0.1_eta_ad=0.05", "0"], ["lambda=1.0_eta_ad=0.05", "0"]]


def _perfect_bundle(tmp_path):
    """Items whose first feature orders the grades, and a scorer that outputs that feature."""
    rng = np.random.default_rng(0)
    lists = []
    for i in range(12):
        x = rng.random((5, 3))
        lists.append(RankedList(x, np.floor(4 * x[:, 0]) + (np.arange(5) == np.argmax(x[:, 0])), f"q{i}"))
    write_letor(tmp_path / "perfect.letor", Dataset(tuple(lists), 3))
    scorer = MLPScorer(3, hidden=3, k=3)
    for name in ("shared.0", "shared.1", "merge"):
        scorer.params[f"{name}.w"] = np.eye(3)
        scorer.params[f"{name}.b"] = np.zeros(3)
    scorer.params["head.w"] = np.array([[1.0], [0.0], [0.0]])
    scorer.params["head.b"] = np.zeros(1)
    save_checkpoint(tmp_path / "perfect.ckpt", {"scorer": scorer}, {"feature_dim": 3})
    return tmp_path / "perfect.letor", tmp_path / "perfect.ckpt"


def test_eval_perfect_scorer_and_repeatability(tmp_path):
    data, ckpt = _perfect_bundle(tmp_path)
    args = ["eval", "--checkpoint", str(ckpt), "--data", str(data), "--metric", "ndcg,mrr", "--cutoff", "1,3,5"]
    assert main(args + ["--out", str(tmp_path / "e1")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "e2")]) == EXIT_OK
    a = (tmp_path / "e1" / "report.tsv").read_text()
    assert a == (tmp_path / "e2" / "report.tsv").read_text()
    agg = MetricReport.from_tsv(a).aggregate()
    assert all(agg[f"ndcg@{k}"] == 1.0 for k in (1, 3, 5))
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--metric", "precision"]) == EXIT_USAGE


def _report(values):
    r = MetricReport()
    for i, v in enumerate(values):
        r.add(f"q{i}", "ndcg", v)
    return r


def test_compare_examples(tmp_path, capsys):
    rows = compare_reports(_report([1, 2, 3]), _report([0, 0, 0]))
    assert rows[0][4] == pytest.approx(3.4641, abs=1e-4)
    assert rows[0][6] == "-"
    same = compare_reports(_report([0.1, 0.5]), _report([0.1, 0.5]))
    assert same[0][6] == "not comparable"
    strong = compare_reports(_report(np.linspace(1, 2, 20)), _report(np.zeros(20)))
    assert strong[0][5] <= 0.05 and strong[0][6] == "significant"
    (tmp_path / "a.tsv").write_text(_report([1, 2, 3]).to_tsv())
    (tmp_path / "b.tsv").write_text(_report([0, 0, 0]).to_tsv())
    assert main(["compare", str(tmp_path / "a.tsv"), str(tmp_path / "b.tsv"), "--out", str(tmp_path / "c")]) == 0
    assert "3.4641" in capsys.readouterr().out
    assert (tmp_path / "c" / "compare.tsv").exists()


def test_bound_on_no_shift_instance(tmp_path):
    spec = _write_spec(tmp_path / "s.cfg", n_lists=24, shift="none")
    g = tmp_path / "g"
    assert main(["gen", "--spec", spec, "--out", str(g)]) == EXIT_OK
    assert _train(g, tmp_path / "t", "--steps", "5") == EXIT_OK
    base = ["bound", "--checkpoint", str(tmp_path / "t" / "checkpoint.ckpt"), "--source", str(g / "source.letor"),
            "--target", str(g / "target.letor"), "--truth", str(g / "truth.cfg"), "--spec", str(g / "spec.cfg"),
            "--lambda-steps", "5"]
    assert main(base + ["--out", str(tmp_path / "b")]) == EXIT_OK
    rows = dict(line.split("\t", 1) for line in (tmp_path / "b" / "bound.tsv").read_text().splitlines())
    assert float(rows["slack"]) >= 0
    assert json.loads((tmp_path / "b" / "bound.json").read_text())["metric"] == "ndcg"
    assert main(base + ["--metric", "map", "--out", str(tmp_path / "b2")]) == EXIT_USAGE


def test_bound_example_lists_with_identity_features(tmp_path):
    def ds(rows, prefix):
        lists = [RankedList(np.array(r, dtype=float)[:, None], [1, 0, 0], f"{prefix}{i}") for i, r in enumerate(rows)]
        return Dataset(tuple(lists), 1)

    write_letor(tmp_path / "s.letor", ds([[1, 2, 3], [4, 5, 6]], "s"))
    write_letor(tmp_path / "t.letor", ds([[1, 3, 5], [2, 4, 6]], "t"))
    scorer = MLPScorer(1, hidden=1, k=1)
    for name in ("shared.0", "shared.1", "merge"):
        scorer.params[f"{name}.w"] = np.ones((1, 1))
    save_checkpoint(tmp_path / "id.ckpt", {"scorer": scorer}, {"feature_dim": 1})
    assert main(["bound", "--checkpoint", str(tmp_path / "id.ckpt"), "--source", str(tmp_path / "s.letor"),
                 "--target", str(tmp_path / "t.letor"), "--metric", "rr", "--lambda-steps", "3",
                 "--out", str(tmp_path / "b")]) == EXIT_OK
    rows = dict(line.split("\t", 1) for line in (tmp_path / "b" / "bound.tsv").read_text().splitlines())
    assert float(rows["w1_list"]) == pytest.approx(math.sqrt(5), abs=1e-9)


def test_version_and_help(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == EXIT_USAGE
