"""Command-line entry point: ``tsatree {gen,train,eval,sweep,ablate,explain,selftest}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, nnem, powersim, regtree, selftest, trainer
from .errors import SampleNotFound, TsaTreeError

FORMAT_VERSION = 1

# flag -> RunConfig field, for flags that override the config file
OVERRIDES = {
    "dataset": "dataset", "sigma_tree": "sigma_tree", "reg_mode": "reg_mode", "epochs": "epochs",
    "s_leaf": "s_leaf", "max_depth": "max_depth", "B": "B", "sigma_surr": "sigma_surr",
    "augmentation": "augmentation", "hidden": "hidden", "batch_size": "batch_size",
    "tree_input": "tree_input", "eval_split": "eval_split", "seed": "seed",
    "surrogate_max_steps": "surrogate_max_steps",
}


def _add_run_flags(p):
    p.add_argument("--config", type=Path, help="JSON run config; flags below override it")
    p.add_argument("--dataset", help="dataset directory written by 'gen'")
    p.add_argument("--sigma-tree", type=float, help="tree regularization strength")
    p.add_argument("--reg-mode", choices=nnem.REG_MODES)
    p.add_argument("--epochs", type=int, help="training epochs N_max")
    p.add_argument("--s-leaf", type=int, help="minimum samples per tree leaf")
    p.add_argument("--max-depth", type=int, help="maximum tree depth in nodes (root = 1)")
    p.add_argument("--B", type=int, help="surrogate base sample size")
    p.add_argument("--sigma-surr", type=float, help="surrogate L2 coefficient")
    p.add_argument("--surrogate-max-steps", type=int)
    p.add_argument("--augmentation", choices=("gaussian", "dirichlet", "none"))
    p.add_argument("--no-reweight", action="store_true", help="uniform surrogate record weights")
    p.add_argument("--expert-groups", help="comma list of dq,current,load; empty string for none")
    p.add_argument("--tree-input", choices=("flattened_window", "final_snapshot"))
    p.add_argument("--eval-split", choices=("train", "test"))
    p.add_argument("--hidden", type=int, help="GRU hidden size")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")


def build_parser():
    ap = argparse.ArgumentParser(prog="tsatree", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="simulate a labelled Monte-Carlo dataset")
    p.add_argument("--n", type=int, default=2000, help="number of samples")
    p.add_argument("--out", type=Path, default=Path("data"), help="dataset directory")
    p.add_argument("--system", type=Path, help="JSON system description (SystemSpec.to_dict layout)")
    p.add_argument("--config", type=Path, help='JSON with optional "system" and "monte_carlo" objects')
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("train", help="train one run")
    _add_run_flags(p)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="evaluate a run directory on a dataset")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--dataset", help="defaults to the dataset recorded in the run config")
    p.add_argument("--split", choices=("train", "test", "all"))
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")

    p = sub.add_parser("sweep", help="one run per sigma_tree value")
    _add_run_flags(p)
    p.add_argument("--sigmas", default="1e-3,1e-2,1e-1,1,10", help="comma-separated grid")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("ablate", help="expert-term or surrogate-strategy ablation")
    _add_run_flags(p)
    p.add_argument("--kind", choices=("nonlinear", "strategy"), default="nonlinear")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("explain", help="render the decision rule for one sample")
    p.add_argument("--run", type=Path, required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--sample", type=int, help="dataset index of the sample")
    src.add_argument("--features", type=Path, help=".npy file with one raw (T, F) block")
    p.add_argument("--dataset", help="defaults to the dataset recorded in the run config")
    p.add_argument("--json", type=Path, help="also write the structured rule here")
    p.add_argument("--seed", type=int, default=0, help="picks a random test sample when none is given")

    p = sub.add_parser("selftest", help="gradient, CART, identity and equilibrium checks")
    p.add_argument("--seed", type=int, default=0)
    return ap


def config_from_args(args):
    cfg = trainer.load_config(args.config) if args.config else trainer.RunConfig()
    changes = {}
    for flag, fld in OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            changes[fld] = val
    if getattr(args, "no_reweight", False):
        changes["reweight"] = False
    if getattr(args, "expert_groups", None) is not None:
        changes["expert_groups"] = tuple(g for g in args.expert_groups.split(",") if g)
    cfg = replace(cfg, **changes)
    if cfg.dataset is None:
        raise ValueError("no dataset: pass --dataset or set it in the config")
    if not Path(cfg.dataset).is_dir():
        raise FileNotFoundError(f"dataset directory {cfg.dataset} does not exist")
    return cfg


def _print_json(doc):
    print(json.dumps(doc, indent=1, sort_keys=True))


def cmd_gen(args):
    sys_, mc = powersim.default_system(), powersim.MonteCarloSpec()
    if args.config:
        doc = json.loads(args.config.read_text())
        if "system" in doc:
            sys_ = powersim.SystemSpec.from_dict(doc["system"])
        if "monte_carlo" in doc:
            mc = powersim.MonteCarloSpec.from_dict(doc["monte_carlo"])
    if args.system:
        sys_ = powersim.SystemSpec.from_dict(json.loads(args.system.read_text()))
    ds = powersim.generate_dataset(sys_, mc, args.n, args.seed, jobs=args.jobs)
    powersim.save_dataset(ds, args.out)
    train, test = ds.split()
    _print_json({"format_version": FORMAT_VERSION, "dataset": str(args.out), "n": len(ds),
                 "train": len(train), "test": len(test), "stable_fraction": ds.meta["stable_fraction"],
                 "seed": args.seed})
    return 0


def cmd_train(args):
    cfg = config_from_args(args)
    art = trainer.run(cfg, args.out)
    last = art.metrics[-1]
    _print_json({"format_version": FORMAT_VERSION, "run_dir": str(art.directory),
                 "sigma_tree": cfg.sigma_tree, "seed": cfg.seed, "epochs": cfg.epochs,
                 "final": {k: last[k] for k in ("test_acc", "tree_test_acc", "fidelity", "mu_bar", "mu_hat")}})
    return 0


def _dataset_for(run_, path):
    path = path or run_.config.dataset
    if path is None:
        raise ValueError("no dataset recorded in the run; pass --dataset")
    return powersim.load_dataset(path)


def cmd_eval(args):
    run_ = trainer.load_run(args.run)
    ds = _dataset_for(run_, args.dataset)
    ev = trainer.evaluate(run_, ds, args.split)
    trainer.write_evaluation(ev, args.run)
    _print_json(ev.metrics)
    return 0


def cmd_sweep(args):
    cfg = config_from_args(args)
    sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    rows = trainer.sweep(cfg, sigmas, args.out, args.jobs)
    _print_json({"format_version": FORMAT_VERSION, "rows": rows})
    return 0


def cmd_ablate(args):
    cfg = config_from_args(args)
    rows = trainer.ablate(cfg, args.kind, args.out, args.jobs)
    _print_json({"format_version": FORMAT_VERSION, "kind": args.kind, "rows": rows})
    return 0


def explain_sample(run_, raw, index=None):
    """Structured explanation of one raw (T, F) block under a loaded run."""
    one = powersim.Dataset(raw[None], np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64),
                           [{}], run_.raw_schema)
    X, Z = trainer.model_inputs(run_, one)
    p = float(nnem.predict_proba(run_.state, X)[0])
    rule = regtree.render_rule(run_.tree, Z[0], run_.tree_schema, run_.tree_std)
    t = float(regtree.predict(run_.tree, Z[0]))
    hn, ht = nnem.hard_label(p), nnem.hard_label(t)
    return {
        "format_version": FORMAT_VERSION,
        "sample": index,
        "nnem_probability": p, "nnem_label": hn,
        "tree_probability": t, "tree_label": ht,
        "agree": hn == ht,
        "tie_rule": "p >= 0.5 is labelled stable",
        "rule": rule.to_dict(),
        "rule_text": rule.text(),
    }


def cmd_explain(args):
    run_ = trainer.load_run(args.run)
    if args.features is not None:
        raw = np.load(args.features)
        if raw.ndim != 2:
            raise ValueError(f"expected one (T, F) block, got shape {raw.shape}")
        index = None
    else:
        ds = _dataset_for(run_, args.dataset)
        if args.sample is None:
            _, test = ds.split(run_.config.split)
            index = int(np.random.default_rng(args.seed).choice(test.indices))
        else:
            index = args.sample
        rows = np.nonzero(ds.indices == index)[0]
        if len(rows) == 0:
            raise SampleNotFound(f"sample index {index} is not in the dataset")
        raw = ds.features[rows[0]]
    doc = explain_sample(run_, raw, index)
    if args.json:
        args.json.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    label = {1: "stable", 0: "unstable"}
    print(f"sample {index}")
    print(f"NNEM  p = {doc['nnem_probability']:.6f} -> {label[doc['nnem_label']]}")
    print(f"tree  p = {doc['tree_probability']:.6f} -> {label[doc['tree_label']]}")
    print(f"agree: {'yes' if doc['agree'] else 'no'}   ({doc['tie_rule']})")
    print(doc["rule_text"])
    return 0


def cmd_selftest(args):
    results = selftest.run_all(args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "ablate": cmd_ablate, "explain": cmd_explain, "selftest": cmd_selftest}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (TsaTreeError, OSError, ValueError, KeyError) as exc:
        print(f"tsatree {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
