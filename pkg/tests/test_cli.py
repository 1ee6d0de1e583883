import json

import numpy as np
import pytest

from tsatree import autodiff as ad
from tsatree import cli, powersim, trainer


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--sigma-tree", "abc"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 2


def test_runtime_errors_exit_1(capsys, tmp_path):
    code, _, err = run_cli(capsys, "train", "--dataset", tmp_path / "missing", "--out", tmp_path)
    assert code == 1 and "error" in err
    code, _, _ = run_cli(capsys, "eval", "--run", tmp_path / "nope")
    assert code == 1


def test_gen_writes_a_dataset(capsys, tmp_path):
    (tmp_path / "mc.json").write_text(json.dumps({"monte_carlo": {"dt": 0.01}}))
    sysfile = tmp_path / "sys.json"
    sysfile.write_text(json.dumps(powersim.default_system().to_dict()))
    code, out, _ = run_cli(capsys, "gen", "--n", 8, "--seed", 1, "--out", tmp_path / "d",
                           "--config", tmp_path / "mc.json", "--system", sysfile)
    assert code == 0
    doc = json.loads(out)
    assert (doc["n"], doc["train"], doc["test"]) == (8, 6, 2)
    assert powersim.load_dataset(tmp_path / "d").features.shape == (8, 10, 27)


def test_train_eval_explain(capsys, tmp_path, small_dataset_dir):
    cfg = {"hidden": 5, "epochs": 2, "B": 3, "s_leaf": 3, "max_depth": 4,
           "surrogate_hidden": [8, 4], "surrogate_max_steps": 20, "batch_size": 12}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    code, out, _ = run_cli(capsys, "train", "--config", tmp_path / "cfg.json", "--dataset", small_dataset_dir,
                           "--sigma-tree", 0.5, "--seed", 2, "--out", tmp_path)
    assert code == 0
    doc = json.loads(out)
    run_dir = doc["run_dir"]
    saved = json.loads(open(f"{run_dir}/config.json").read())
    assert saved["sigma_tree"] == 0.5 and saved["hidden"] == 5 and saved["seed"] == 2
    assert doc["final"]["fidelity"] == trainer.read_table(f"{run_dir}/metrics.tsv")[-1]["fidelity"]

    before = {p.name: p.read_bytes() for p in small_dataset_dir.iterdir()}
    code, first, _ = run_cli(capsys, "eval", "--run", run_dir)
    blob = open(f"{run_dir}/eval_predictions.tsv").read()
    code2, second, _ = run_cli(capsys, "eval", "--run", run_dir)
    assert code == code2 == 0 and first == second
    assert open(f"{run_dir}/eval_predictions.tsv").read() == blob

    ds = powersim.load_dataset(small_dataset_dir)
    _, test = ds.split()
    preds = {r["index"]: r for r in trainer.read_table(f"{run_dir}/eval_predictions.tsv")}
    for idx in test.indices[:4]:
        code, out, _ = run_cli(capsys, "explain", "--run", run_dir, "--sample", idx,
                               "--json", tmp_path / "rule.json")
        assert code == 0 and f"sample {idx}" in out
        rule = json.loads((tmp_path / "rule.json").read_text())
        assert rule["tree_probability"] == preds[idx]["p_tree"]
        # one-row and batched matmuls may round differently in the last bit
        assert rule["nnem_probability"] == pytest.approx(preds[idx]["p_nnem"], rel=1e-12)
        assert rule["nnem_label"] == int(preds[idx]["p_nnem"] >= 0.5)
        assert rule["agree"] == (rule["nnem_label"] == rule["tree_label"])
        assert len(rule["rule"]["path"]) == preds[idx]["path_length"]

    assert {p.name: p.read_bytes() for p in small_dataset_dir.iterdir()} == before

    np.save(tmp_path / "one.npy", ds.features[0])
    code, out, _ = run_cli(capsys, "explain", "--run", run_dir, "--features", tmp_path / "one.npy")
    assert code == 0 and ("THEN" in out or "ALWAYS" in out)
    code, _, err = run_cli(capsys, "explain", "--run", run_dir, "--sample", 10_000)
    assert code == 1 and "10000" in err


def test_selftest_passes(capsys):
    code, out, _ = run_cli(capsys, "selftest")
    assert code == 0
    assert out.count("PASS") == 4


def test_selftest_catches_a_broken_adjoint(capsys, monkeypatch):
    def bad_tanh(a):
        t = np.tanh(a.value)
        return a.tape._record(t, (a,), lambda g: (g * (1.0 - t),))  # wrong derivative

    monkeypatch.setattr(ad, "tanh", bad_tanh)
    code, out, _ = run_cli(capsys, "selftest")
    assert code == 1
    assert "FAIL  gradient" in out
