"""End-to-end training loop: surrogate, evaluation model and distilled tree
trained together epoch by epoch, plus evaluation, σ sweeps and ablations.

Per epoch k = 1..N:

1. fit the surrogate on the (ω, μ̄) records gathered so far (k of them),
2. train the evaluation model for one epoch with the tree penalty,
3. distill a tree from the model's train-set probabilities and append
   (ω_k, μ̄_k) to the records.

Random streams are derived from the master seed with ``SeedSequence([seed,
stream, epoch])``; nothing depends on wall-clock time.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import featurebase as fb
from . import nnem, powersim, regtree
from . import surrogate as sg
from .errors import SchemaMismatch, StageError

FORMAT_VERSION = 1
# stream ids for SeedSequence([seed, stream, epoch])
STREAM_INIT, STREAM_ORDER, STREAM_SURROGATE = 1, 2, 3

METRIC_COLUMNS = ("epoch", "train_loss", "train_mse", "reg", "train_acc", "test_acc", "tree_test_acc",
                  "fidelity", "mu_bar", "mu_hat", "surr_loss", "surr_steps", "n_augmented")


@dataclass
class RunConfig:
    dataset: str | None = None
    hidden: int = 32
    layers: int = 1
    sigma_tree: float = 1.0
    reg_mode: str = "tree"
    s_leaf: int = 10
    max_depth: int = 12
    epochs: int = 60
    B: int = 20
    sigma_surr: float = 0.0
    surrogate_hidden: tuple = (128, 25)
    surrogate_max_steps: int = 500
    augmentation: str = "gaussian"
    aug_zero_mean: bool = False
    reweight: bool = True
    expert_groups: tuple = ("dq", "current", "load")
    tree_input: str = "flattened_window"
    batch_size: int = 32
    lr: float = 1e-3
    split: tuple = (3, 1)
    eval_split: str = "test"
    seed: int = 0

    def __post_init__(self):
        self.surrogate_hidden = tuple(self.surrogate_hidden)
        self.expert_groups = tuple(self.expert_groups)
        self.split = tuple(self.split)
        if not self.sigma_tree >= 0:
            raise ValueError("sigma_tree must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.reg_mode not in nnem.REG_MODES:
            raise ValueError(f"reg_mode must be one of {nnem.REG_MODES}")
        if self.augmentation not in sg.AUG_MODES:
            raise ValueError(f"augmentation must be one of {sg.AUG_MODES}")
        if self.tree_input not in fb.POLICIES:
            raise ValueError(f"tree_input must be one of {fb.POLICIES}")
        if self.eval_split not in ("train", "test"):
            raise ValueError("eval_split must be 'train' or 'test'")
        unknown = set(self.expert_groups) - set(fb.FAMILY_GROUPS)
        if unknown:
            raise ValueError(f"unknown expert groups {sorted(unknown)}")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known - {"format_version"}
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self):
        """Short hash of everything but the seed and dataset location."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("dataset")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_name(self):
        return f"run-{self.digest()}-s{self.seed}"


def load_config(path):
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def _rng(seed, stream, epoch=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(epoch)]))


# -- data preparation -------------------------------------------------------------

@dataclass
class Prepared:
    """Everything derived once from the dataset before the loop."""
    train: powersim.Dataset
    test: powersim.Dataset
    seq_std: fb.Standardizer
    tree_std: fb.Standardizer
    tree_schema: fb.FeatureSchema
    families: tuple
    X_train: np.ndarray      # standardized sequences
    X_test: np.ndarray
    Z_train: np.ndarray      # standardized tree inputs
    Z_test: np.ndarray


def tree_inputs(raw, raw_schema, families, policy, std=None):
    em = fb.expand_expert(raw, raw_schema, families, policy)
    if std is None:
        std = fb.Standardizer.fit(em.values)
    return std.apply(em.values), em.schema, std


def prepare(ds, cfg):
    train, test = ds.split(cfg.split)
    F = ds.features.shape[2]
    seq_std = fb.Standardizer.fit(train.features.reshape(-1, F))
    families = fb.families_for_groups(cfg.expert_groups)
    Z_train, schema, tree_std = tree_inputs(train.features, ds.schema, families, cfg.tree_input)
    Z_test, _, _ = tree_inputs(test.features, ds.schema, families, cfg.tree_input, tree_std)
    return Prepared(train, test, seq_std, tree_std, schema, families,
                    seq_std.apply(train.features), seq_std.apply(test.features), Z_train, Z_test)


# -- the training loop ------------------------------------------------------------

@dataclass
class RunArtifacts:
    config: RunConfig
    state: nnem.EvalModelState
    tree: regtree.RegressionTree
    surrogate: sg.SurrogateModel | None
    metrics: list                 # one dict per epoch
    surrogate_log: list           # (k, mu_bar, mu_hat)
    records: list = field(repr=False, default_factory=list)
    prepared: Prepared | None = field(repr=False, default=None)
    directory: Path | None = None


def _stage(epoch, stage, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # any module error aborts with its position in the loop
        raise StageError(epoch, stage, exc) from exc


def run(cfg, out_dir=None, dataset=None, prepared=None):
    """Train per the epoch loop above; write artifacts under ``out_dir`` if given."""
    if prepared is None:
        if dataset is None:
            if cfg.dataset is None:
                raise ValueError("config has no dataset path and none was passed")
            dataset = powersim.load_dataset(cfg.dataset)
        prepared = prepare(dataset, cfg)
    P = prepared
    arch = nnem.Arch(P.X_train.shape[2], cfg.hidden, cfg.layers)
    state = nnem.init_state(arch, _rng(cfg.seed, STREAM_INIT))
    state.standardizer = P.seq_std
    y_train = P.train.labels.astype(np.float64)
    settings = nnem.TrainSettings(cfg.batch_size, ad.AdamState(lr=cfg.lr))

    def depth_of(omega):
        return sg.depth_for_params(omega, arch, P.X_train, P.Z_train, cfg.s_leaf, cfg.max_depth)

    omega = nnem.flatten(state)
    records = [sg.Record(omega, _stage(0, "initial depth", depth_of, omega), 0)]
    metrics, log = [], []
    model = None
    tree = None
    for k in range(1, cfg.epochs + 1):
        surr_loss, surr_steps, n_aug = math.nan, 0, 0
        if cfg.reg_mode == "tree":
            model, _, info = _stage(k, "surrogate", sg.train, records, cfg.B, cfg.sigma_surr,
                                    _rng(cfg.seed, STREAM_SURROGATE, k), depth_of, cfg.augmentation,
                                    cfg.aug_zero_mean, cfg.reweight, cfg.surrogate_hidden,
                                    max_steps=cfg.surrogate_max_steps)
            surr_loss, surr_steps, n_aug = info.loss, info.steps, info.n_augmented
        loss_cfg = nnem.LossConfig(cfg.sigma_tree, cfg.reg_mode, model)
        stats = _stage(k, "nnem", nnem.train_epoch, state, P.X_train, y_train, loss_cfg, settings,
                       _rng(cfg.seed, STREAM_ORDER, k))
        p_train = nnem.predict_proba(state, P.X_train)
        tree = _stage(k, "tree", regtree.fit, P.Z_train, p_train, cfg.s_leaf, cfg.max_depth, P.tree_schema)
        mu_bar = regtree.average_depth(tree, P.Z_train)
        omega = nnem.flatten(state)
        mu_hat = sg.predict_depth(model, omega) if model is not None else math.nan
        records.append(sg.Record(omega, mu_bar, k))
        log.append((k, mu_bar, mu_hat))

        X_eval, Z_eval, ds_eval = _eval_arrays(P, cfg.eval_split)
        p_eval = nnem.predict_proba(state, X_eval)
        t_eval = regtree.predict(tree, Z_eval)
        labels = ds_eval.labels
        metrics.append({
            "epoch": k, "train_loss": stats.loss, "train_mse": stats.mse, "reg": stats.reg,
            "train_acc": stats.accuracy,
            "test_acc": float(np.mean(nnem.hard_label(p_eval) == labels)),
            "tree_test_acc": float(np.mean(nnem.hard_label(t_eval) == labels)),
            "fidelity": regtree.fidelity(p_eval, t_eval),
            "mu_bar": mu_bar, "mu_hat": mu_hat,
            "surr_loss": surr_loss, "surr_steps": surr_steps, "n_augmented": n_aug,
        })
    art = RunArtifacts(cfg, state, tree, model, metrics, log, records, P)
    if out_dir is not None:
        art.directory = write_artifacts(art, out_dir)
    return art


def _eval_arrays(P, split):
    if split == "train":
        return P.X_train, P.Z_train, P.train
    return P.X_test, P.Z_test, P.test


# -- artifacts --------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_table(path, rows, columns):
    lines = ["\t".join(columns)]
    lines += ["\t".join(_fmt(r[c]) for c in columns) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path):
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        vals = line.split("\t")
        out.append({c: (int(v) if v.lstrip("-").isdigit() else float(v)) for c, v in zip(cols, vals)})
    return out


def _dump(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_artifacts(art, out_dir):
    cfg = art.config
    d = Path(out_dir) / cfg.run_name()
    d.mkdir(parents=True, exist_ok=True)
    _dump(d / "config.json", {"format_version": FORMAT_VERSION, **cfg.to_dict()})
    write_table(d / "metrics.tsv", art.metrics, METRIC_COLUMNS)
    nnem.save_checkpoint(art.state, d / "nnem", epoch=cfg.epochs, sigma_tree=cfg.sigma_tree,
                         reg_mode=cfg.reg_mode, seed=cfg.seed)
    tree_doc = art.tree.to_dict()
    _dump(d / "tree.json", tree_doc)
    P = art.prepared
    _dump(d / "tree_inputs.json", {
        "format_version": FORMAT_VERSION, "families": list(P.families), "policy": cfg.tree_input,
        "standardizer": P.tree_std.to_dict(), "schema": P.tree_schema.to_list(),
        "raw_schema": P.train.schema.to_list(),
    })
    if art.surrogate is not None:
        sg.save_checkpoint(art.surrogate, d / "surrogate", epoch=cfg.epochs, seed=cfg.seed)
    sg.write_log(d / "surrogate_log.tsv", art.surrogate_log)
    return d


@dataclass
class LoadedRun:
    config: RunConfig
    state: nnem.EvalModelState
    tree: regtree.RegressionTree
    tree_std: fb.Standardizer
    tree_schema: fb.FeatureSchema
    families: tuple
    raw_schema: fb.FeatureSchema
    directory: Path


def load_run(directory):
    d = Path(directory)
    cfg_doc = json.loads((d / "config.json").read_text())
    cfg_doc.pop("format_version", None)
    cfg = RunConfig.from_dict(cfg_doc)
    state, _ = nnem.load_checkpoint(d / "nnem")
    ti = json.loads((d / "tree_inputs.json").read_text())
    schema = fb.FeatureSchema.from_list(ti["schema"])
    tree = regtree.RegressionTree.load(d / "tree.json", schema)
    return LoadedRun(cfg, state, tree, fb.Standardizer.from_dict(ti["standardizer"]), schema,
                     tuple(ti["families"]), fb.FeatureSchema.from_list(ti["raw_schema"]), d)


def _as_loaded(art):
    if isinstance(art, LoadedRun):
        return art
    if isinstance(art, RunArtifacts):
        P = art.prepared
        return LoadedRun(art.config, art.state, art.tree, P.tree_std, P.tree_schema, P.families,
                         P.train.schema, art.directory)
    return load_run(art)


# -- evaluation -------------------------------------------------------------------

@dataclass
class Evaluation:
    metrics: dict
    indices: np.ndarray
    labels: np.ndarray
    p_nnem: np.ndarray
    p_tree: np.ndarray
    path_length: np.ndarray
    Z: np.ndarray


def model_inputs(run_, ds):
    """Standardized sequences and tree inputs for ``ds`` under a trained run."""
    if ds.schema != run_.raw_schema:
        raise SchemaMismatch("dataset features do not match the run's raw schema")
    if fb.expanded_schema(ds.schema, run_.families, run_.config.tree_input) != run_.tree_schema:
        raise SchemaMismatch("expanded features do not match the tree's schema")
    X = run_.state.standardizer.apply(ds.features)
    Z, _, _ = tree_inputs(ds.features, ds.schema, run_.families, run_.config.tree_input, run_.tree_std)
    return X, Z


def evaluate(art, dataset, split=None):
    """Accuracy, fidelity and tree-structure metrics on one split of ``dataset``.

    ``split`` is "train", "test" or "all"; default is the run's eval split.
    Side-effect free.
    """
    run_ = _as_loaded(art)
    split = split or run_.config.eval_split
    if split == "all":
        ds = dataset
    else:
        tr, te = dataset.split(run_.config.split)
        ds = tr if split == "train" else te
    X, Z = model_inputs(run_, ds)
    p = nnem.predict_proba(run_.state, X)
    t = regtree.predict(run_.tree, Z)
    lengths = regtree.path_lengths(run_.tree, Z)
    labels = ds.labels
    metrics = {
        "format_version": FORMAT_VERSION,
        "split": split,
        "n": int(len(labels)),
        "nnem_accuracy": float(np.mean(nnem.hard_label(p) == labels)),
        "tree_accuracy": float(np.mean(nnem.hard_label(t) == labels)),
        "fidelity": regtree.fidelity(p, t),
        "average_depth": regtree.average_depth(run_.tree, Z),
        "nonlinear_frequency": regtree.nonlinear_frequency(run_.tree, Z, run_.tree_schema),
        "nonlinear_layer_number": regtree.nonlinear_layer_number(run_.tree, run_.tree_schema),
        "n_nodes": int(run_.tree.n_nodes),
    }
    return Evaluation(metrics, ds.indices, labels, p, t, lengths, Z)


def write_evaluation(ev, directory, name="eval"):
    d = Path(directory)
    _dump(d / f"{name}_metrics.json", ev.metrics)
    rows = [{"index": int(i), "label": int(y), "p_nnem": float(a), "p_tree": float(b), "path_length": int(n)}
            for i, y, a, b, n in zip(ev.indices, ev.labels, ev.p_nnem, ev.p_tree, ev.path_length)]
    write_table(d / f"{name}_predictions.tsv", rows, ("index", "label", "p_nnem", "p_tree", "path_length"))


# -- sweeps and ablations ---------------------------------------------------------

SUMMARY_COLUMNS = ("test_acc", "tree_test_acc", "fidelity", "mu_bar", "mu_hat")


def _summary(art, label):
    last = art.metrics[-1]
    errs = [abs(m["mu_hat"] - m["mu_bar"]) for m in art.metrics if not math.isnan(m["mu_hat"])]
    row = {"label": label, "sigma_tree": art.config.sigma_tree, "seed": art.config.seed}
    row.update({c: last[c] for c in SUMMARY_COLUMNS})
    row["surrogate_error"] = float(np.mean(errs)) if errs else math.nan
    return row


def _run_job(args):
    cfg, out_dir, label = args
    return _summary(run(cfg, out_dir), label)


def run_many(jobs_list, jobs=1):
    """Run (config, out_dir, label) jobs, in parallel processes when ``jobs > 1``; order preserved."""
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_run_job, jobs_list))
    return [_run_job(j) for j in jobs_list]


def _write_summary(rows, out_dir, name):
    if out_dir is None:
        return
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    cols = ("label", "sigma_tree", "seed") + SUMMARY_COLUMNS + ("surrogate_error",)
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(str(r[c]) if c == "label" else _fmt(r[c]) for c in cols))
    (d / f"{name}.tsv").write_text("\n".join(lines) + "\n")
    _dump(d / f"{name}.json", {"format_version": FORMAT_VERSION, "rows": rows})


def sweep(base, sigmas, out_dir=None, jobs=1):
    """One run per σ_tree with everything else (seed included) held fixed."""
    if not len(sigmas):
        raise ValueError("empty σ grid")
    jobs_list = [(replace(base, sigma_tree=float(s)), out_dir, f"sigma={s:g}") for s in sigmas]
    rows = run_many(jobs_list, jobs)
    _write_summary(rows, out_dir, "sweep")
    return rows


NONLINEAR_GROUPS = (("Non_1", "dq"), ("Non_2", "current"), ("Non_3", "load"))


def ablation_configs(base, kind="nonlinear"):
    """(label, config) pairs.

    ``nonlinear``: all 8 on/off combinations of the three expert-term groups.
    ``strategy``: the full method, each of expert terms / reweighting /
    augmentation switched off alone, and all three off together.
    """
    out = []
    if kind == "nonlinear":
        for flags in product((False, True), repeat=3):
            groups = tuple(g for (_, g), on in zip(NONLINEAR_GROUPS, flags) if on)
            label = "+".join(n for (n, _), on in zip(NONLINEAR_GROUPS, flags) if on) or "none"
            out.append((label, replace(base, expert_groups=groups)))
    elif kind == "strategy":
        no_expert = {"expert_groups": ()}
        no_reweight = {"reweight": False}
        no_aug = {"augmentation": "none"}
        out = [("full", base),
               ("-expert", replace(base, **no_expert)),
               ("-reweight", replace(base, **no_reweight)),
               ("-augmentation", replace(base, **no_aug)),
               ("TR-like", replace(base, **no_expert, **no_reweight, **no_aug))]
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    return out


def ablate(base, kind="nonlinear", out_dir=None, jobs=1):
    rows = run_many([(cfg, out_dir, label) for label, cfg in ablation_configs(base, kind)], jobs)
    _write_summary(rows, out_dir, f"ablate-{kind}")
    return rows
