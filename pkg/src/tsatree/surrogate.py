"""Surrogate MLP approximating the average decision-path length of the tree
distilled from a given evaluation-model parameter vector.

The surrogate makes the tree penalty differentiable: the evaluation model's
loss adds ``σ · S(flatten(ω))`` and gradients flow through ``S`` with the
surrogate's own weights frozen.

Training records are ``(ω_k, μ̄_k)`` pairs, one observed per epoch.  While
fewer than ``B`` records exist, the latest ``ω`` is perturbed with noise and
each perturbed vector gets its own freshly measured depth.  Early records are
down-weighted so the fit tracks the recent part of the trajectory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nnem, regtree
from .errors import EmptyTrainingSet, WidthMismatch

AUG_MODES = ("gaussian", "dirichlet", "none")
AUG_VARIANCE = 0.01

# hidden widths (h1, h2)
PRESETS = {"desk": (128, 25), "micro": (8,), "full": (1000, 25)}


@dataclass
class SurrogateModel:
    weights: list          # [W1, b1, W2, b2, ..., w_out, b_out]
    sigma: float = 0.0     # L2 coefficient on the surrogate weights
    activation: str = "relu"

    @property
    def width(self):
        return self.weights[0].shape[0]

    @property
    def hidden(self):
        return tuple(W.shape[1] for W in self.weights[0:-2:2])

    def flat(self):
        return np.concatenate([np.ravel(w) for w in self.weights])


def init_model(width, hidden, rng, sigma=0.0, out_bias=0.0):
    """Uniform(±1/sqrt(fan_in)) weights, zero hidden biases, output bias ``out_bias``."""
    sizes = (width,) + tuple(hidden)
    weights = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights += [rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros(n_out)]
    bound = 1.0 / np.sqrt(sizes[-1])
    weights += [rng.uniform(-bound, bound, size=sizes[-1]), np.array(float(out_bias))]
    return SurrogateModel(weights, sigma)


def _check_width(model, omega):
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape[-1] != model.width:
        raise WidthMismatch(f"surrogate expects {model.width} parameters, got {omega.shape[-1]}")
    return omega


def predict_depth(model, omega):
    """μ̂ for one parameter vector (scalar) or a stack of them (n,)."""
    h = _check_width(model, omega)
    w = model.weights
    for W, b in zip(w[0:-2:2], w[1:-2:2]):
        h = np.maximum(h @ W + b, 0.0)
    out = h @ w[-2] + w[-1]
    return float(out) if np.ndim(out) == 0 else out


def _forward(tape, x, weights):
    h = x
    for W, b in zip(weights[0:-2:2], weights[1:-2:2]):
        h = ad.relu(h @ W + b)
    return h @ weights[-2] + weights[-1]


def predict_depth_tape(model, omega):
    """μ̂ as a tape tensor, differentiable in ``omega``; surrogate weights enter as constants."""
    if omega.shape[-1] != model.width:
        raise WidthMismatch(f"surrogate expects {model.width} parameters, got {omega.shape[-1]}")
    tape = omega.tape
    return _forward(tape, omega, [tape.constant(w) for w in model.weights])


# -- training records ------------------------------------------------------------

@dataclass
class Record:
    omega: np.ndarray
    mu_bar: float
    epoch: int
    origin: str = "observed"   # or "augmented"


def augment(omega, rng, mode="gaussian", zero_mean=False, variance=AUG_VARIANCE):
    """Perturbed copy of ``omega``.

    Gaussian noise has mean ``mean(omega)`` (or 0 with ``zero_mean``) and the given
    variance.  Dirichlet noise is ``c·(d − 1/n)`` with ``d`` from a flat Dirichlet
    and ``c`` chosen so the noise has the given empirical variance.
    """
    omega = np.asarray(omega, dtype=np.float64)
    n = len(omega)
    if mode == "gaussian":
        lam = 0.0 if zero_mean else float(np.mean(omega))
        return omega + rng.normal(lam, np.sqrt(variance), size=n)
    if mode == "dirichlet":
        d = rng.dirichlet(np.ones(n)) - 1.0 / n
        c = np.sqrt(variance / max(float(np.var(d)), 1e-300))
        return omega + c * d
    raise ValueError(f"augmentation mode must be 'gaussian' or 'dirichlet', got {mode!r}")


def depth_for_params(omega, arch, X_seq, X_tree, s_leaf=10, max_depth=12):
    """μ̄ of the tree distilled from the evaluation model with parameters ``omega``.

    ``X_seq`` are the standardized training sequences fed to the model and
    ``X_tree`` the matching tree inputs.
    """
    state = nnem.unflatten(omega, arch)
    p = nnem.predict_proba(state, X_seq)
    tree = regtree.fit(X_tree, p, s_leaf=s_leaf, max_depth=max_depth)
    return regtree.average_depth(tree, X_tree)


def record_weights(K, n_aug=0, reweight=True):
    """Per-record loss coefficients: observed records 1..K, then augmented ones.

    Records k <= floor(K/2) get (1/floor(K/2))·(1/K); later records and every
    augmented record get 1/(K − floor(K/2)).  Without reweighting every record
    gets 1/(K + n_aug).
    """
    if K < 1:
        raise EmptyTrainingSet("need at least one observed record")
    n = K + n_aug
    if not reweight:
        return np.full(n, 1.0 / n)
    half = K // 2
    w = np.full(n, 1.0 / (K - half))
    if half:
        w[:half] = 1.0 / half / K
    return w


@dataclass
class TrainInfo:
    steps: int
    loss: float
    n_augmented: int


def fit_model(omegas, targets, coef, rng, hidden=PRESETS["desk"], sigma=0.0,
              lr=1e-3, max_steps=500, tol=1e-4, window=20):
    """Weighted least squares fit of a fresh MLP by Adam.

    Stops once the loss changed by less than ``tol`` (relative) over the last
    ``window`` steps, or after ``max_steps``.
    """
    omegas = np.asarray(omegas, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    coef = np.asarray(coef, dtype=np.float64)
    out_bias = float(np.sum(coef * targets) / np.sum(coef))
    model = init_model(omegas.shape[1], hidden, rng, sigma, out_bias)
    adam = ad.AdamState(lr=lr)
    history = []
    steps = 0
    for steps in range(1, max_steps + 1):
        tape = ad.Tape()
        leaves = [tape.leaf(w) for w in model.weights]
        pred = _forward(tape, tape.constant(omegas), leaves)
        loss = ad.sum(ad.mul(ad.square(pred - targets), coef))
        if sigma:
            reg = ad.sum(ad.concat([ad.reshape(ad.square(w), (w.value.size,)) for w in leaves]))
            loss = loss + reg * float(sigma)
        tape.backward(loss)
        value = float(loss.value)
        history.append(value)
        ad.adam_step(model.weights, [w.grad for w in leaves], adam)
        if len(history) > window:
            old = history[-1 - window]
            if abs(old - value) <= tol * max(abs(old), 1e-12):
                break
    final = float(np.sum(coef * (targets - predict_depth(model, omegas)) ** 2))
    return model, TrainInfo(steps, final, 0)


def train(records, B, sigma, rng, depth_fn=None, mode="gaussian", zero_mean=False,
          reweight=True, hidden=PRESETS["desk"], **fit_kw):
    """Fit a surrogate on the observed records, augmenting up to ``B`` records.

    ``depth_fn(omega) -> μ̄`` measures augmented vectors; it is required unless
    ``mode`` is "none" or there are already ``B`` observed records.  Returns the
    model, the full record list used (observed first) and a TrainInfo.
    """
    observed = [r for r in records if r.origin == "observed"]
    K = len(observed)
    if K == 0:
        raise EmptyTrainingSet("surrogate training needs at least one observed record")
    observed.sort(key=lambda r: r.epoch)
    aug = []
    if mode != "none" and K < B:
        if depth_fn is None:
            raise ValueError("augmentation needs depth_fn")
        latest = observed[-1]
        for _ in range(B - K):
            w = augment(latest.omega, rng, mode, zero_mean)
            aug.append(Record(w, float(depth_fn(w)), latest.epoch, "augmented"))
    used = observed + aug
    coef = record_weights(K, len(aug), reweight)
    model, info = fit_model(np.stack([r.omega for r in used]), [r.mu_bar for r in used], coef, rng,
                            hidden=hidden, sigma=sigma, **fit_kw)
    info.n_augmented = len(aug)
    return model, used, info


# -- persistence ------------------------------------------------------------------

def save_checkpoint(model, path, **extra):
    path = Path(path)
    path.with_suffix(".bin").write_bytes(model.flat().astype("<f8").tobytes())
    manifest = {"format_version": 1, "kind": "surrogate", "width": model.width,
                "hidden": list(model.hidden), "activation": model.activation, "sigma": model.sigma}
    manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    sizes = [manifest["width"]] + manifest["hidden"]
    weights, pos = [], 0
    for shape in [s for a, b in zip(sizes[:-1], sizes[1:]) for s in ((a, b), (b,))] + [(sizes[-1],), ()]:
        size = int(np.prod(shape, dtype=np.int64))
        weights.append(flat[pos:pos + size].reshape(shape).copy())
        pos += size
    if pos != len(flat):
        raise WidthMismatch(f"checkpoint holds {len(flat)} values, layout needs {pos}")
    return SurrogateModel(weights, manifest["sigma"], manifest["activation"]), manifest


def write_log(path, rows):
    """Per-epoch ``(k, mu_bar, mu_hat)`` rows as tab-separated text with a header."""
    lines = ["epoch\tmu_bar\tmu_hat"]
    lines += [f"{k}\t{mb!r}\t{mh!r}" for k, mb, mh in rows]
    Path(path).write_text("\n".join(lines) + "\n")
