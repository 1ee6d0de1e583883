import dataclasses
import json
import math

import numpy as np
import pytest

from tsatree import autodiff as ad
from tsatree import featurebase as fb
from tsatree import nnem, powersim, regtree, trainer
from tsatree.errors import SchemaMismatch, StageError

from conftest import tiny_config


def test_one_metrics_row_per_epoch(tiny_run):
    m = tiny_run.metrics
    assert [r["epoch"] for r in m] == [1, 2, 3]
    assert set(trainer.METRIC_COLUMNS) == set(m[0])
    assert all(0.0 <= r["fidelity"] <= 1.0 for r in m)
    assert all(r["n_augmented"] == 4 - r["epoch"] for r in m)
    # initial record plus one per epoch
    assert [r.epoch for r in tiny_run.records] == [0, 1, 2, 3]


def test_artifacts_on_disk(tiny_run):
    d = tiny_run.directory
    for name in ("config.json", "metrics.tsv", "nnem.json", "nnem.bin", "tree.json",
                 "tree_inputs.json", "surrogate.json", "surrogate.bin", "surrogate_log.tsv"):
        assert (d / name).exists(), name
    rows = trainer.read_table(d / "metrics.tsv")
    assert len(rows) == 3
    assert rows[-1]["fidelity"] == tiny_run.metrics[-1]["fidelity"]
    assert d.name == tiny_run.config.run_name()


def test_runs_are_deterministic(small_dataset):
    cfg = tiny_config("unused", epochs=2)
    a = trainer.run(cfg, dataset=small_dataset)
    b = trainer.run(cfg, dataset=small_dataset)
    assert a.metrics == b.metrics
    np.testing.assert_array_equal(nnem.flatten(a.state), nnem.flatten(b.state))
    c = trainer.run(tiny_config("unused", epochs=2, seed=4), dataset=small_dataset)
    assert not np.array_equal(nnem.flatten(a.state), nnem.flatten(c.state))


def test_no_regularization_equals_plain_training(small_dataset):
    cfg = tiny_config("unused", epochs=2, reg_mode="none")
    art = trainer.run(cfg, dataset=small_dataset)
    P = trainer.prepare(small_dataset, cfg)
    arch = nnem.Arch(27, cfg.hidden)
    state = nnem.init_state(arch, np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, 0])))
    settings = nnem.TrainSettings(cfg.batch_size, ad.AdamState(lr=cfg.lr))
    for k in (1, 2):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, k]))
        nnem.train_epoch(state, P.X_train, P.train.labels.astype(float), nnem.LossConfig(), settings, rng)
    np.testing.assert_array_equal(nnem.flatten(art.state), nnem.flatten(state))
    assert art.surrogate is None
    assert all(math.isnan(r["mu_hat"]) for r in art.metrics)
    tree = regtree.fit(P.Z_train, nnem.predict_proba(state, P.X_train), cfg.s_leaf, cfg.max_depth)
    assert art.metrics[-1]["mu_bar"] == regtree.average_depth(tree, P.Z_train)


def test_config_round_trip_and_validation(tmp_path):
    cfg = trainer.RunConfig(sigma_tree=0.1, expert_groups=("dq",))
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert trainer.load_config(tmp_path / "c.json") == cfg
    with pytest.raises((ValueError, KeyError)):
        trainer.RunConfig.from_dict({"sigma": 1.0})
    with pytest.raises(ValueError):
        trainer.RunConfig(reg_mode="tree", sigma_tree=-1.0)
    # the digest ignores the seed, so seeds of one setting share a hash prefix
    assert cfg.digest() == trainer.RunConfig(sigma_tree=0.1, expert_groups=("dq",), seed=9).digest()


def test_evaluate_matches_training_metrics(tiny_run, small_dataset):
    ev = trainer.evaluate(tiny_run, small_dataset)
    last = tiny_run.metrics[-1]
    assert ev.metrics["fidelity"] == last["fidelity"]
    assert ev.metrics["nnem_accuracy"] == last["test_acc"]
    assert ev.metrics["tree_accuracy"] == last["tree_test_acc"]
    assert ev.metrics["n"] == 12
    loaded = trainer.evaluate(trainer.load_run(tiny_run.directory), small_dataset)
    assert loaded.metrics == ev.metrics
    np.testing.assert_array_equal(loaded.p_nnem, ev.p_nnem)


def test_evaluate_rejects_other_schema(tiny_run, small_dataset):
    ds = small_dataset
    other = powersim.Dataset(ds.features, ds.labels, ds.indices, ds.provenance, fb.raw_schema(2, 3, 9))
    with pytest.raises(SchemaMismatch):
        trainer.evaluate(tiny_run, other)
    bad = dataclasses.replace(trainer.load_run(tiny_run.directory), families=("sin_delta",))
    with pytest.raises(SchemaMismatch):
        trainer.model_inputs(bad, ds)


def test_stage_errors_carry_position(small_dataset, monkeypatch):
    cfg = tiny_config("unused", epochs=2)

    def broken(*a, **kw):
        raise FloatingPointError("boom")

    monkeypatch.setattr(trainer.nnem, "train_epoch", broken)
    with pytest.raises(StageError) as info:
        trainer.run(cfg, dataset=small_dataset)
    assert (info.value.epoch, info.value.stage) == (1, "nnem")
    assert isinstance(info.value.cause, FloatingPointError)


def test_sweep_rows(small_dataset_dir, tmp_path):
    rows = trainer.sweep(tiny_config(small_dataset_dir, epochs=1), [0.0, 1.0], tmp_path)
    assert [r["sigma_tree"] for r in rows] == [0.0, 1.0]
    assert (tmp_path / "sweep.tsv").read_text().count("\n") == 3


def test_ablation_grid():
    rows = trainer.ablation_configs(trainer.RunConfig(), "nonlinear")
    assert len(rows) == 8
    labels = [label for label, _ in rows]
    assert labels[0] == "none" and labels[-1] == "Non_1+Non_2+Non_3"
    assert rows[0][1].expert_groups == () and rows[-1][1].expert_groups == ("dq", "current", "load")
    strat = dict(trainer.ablation_configs(trainer.RunConfig(), "strategy"))
    assert strat["TR-like"].augmentation == "none" and not strat["TR-like"].reweight
    with pytest.raises(ValueError):
        trainer.ablation_configs(trainer.RunConfig(), "bogus")
