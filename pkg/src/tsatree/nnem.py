"""GRU evaluation model regressing the stability probability, its flat
parameter vector, and the (optionally tree-regularized) training objective.

Recurrence per layer, with row-vector inputs ``x_t`` of shape (batch, in)::

    z = σ(x W_z + h U_z + b_z)
    r = σ(x W_r + h U_r + b_r)
    ĥ = tanh(x W_h + (r ⊙ h) U_h + b_h)
    h = (1 − z) ⊙ h + z ⊙ ĥ,        h_0 = 0

and ``p = σ(h_T · w_o + b_o)`` on the last layer's final state.

Flatten order (version 1): for each layer W_z, U_z, b_z, W_r, U_r, b_r,
W_h, U_h, b_h, then w_o, b_o; every array row-major.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .errors import LengthMismatch, ShapeMismatch, SurrogateMissing

FLATTEN_ORDER_VERSION = 1
GATES = ("z", "r", "h")
REG_MODES = ("none", "l1", "l2", "tree")

# architecture presets: (input, hidden, layers)
PRESETS = {
    "desk": (27, 32, 1),
    "micro": (5, 4, 1),
    "full": (515, 200, 2),
}


@dataclass(frozen=True)
class Arch:
    input: int
    hidden: int
    layers: int = 1

    def shapes(self):
        """(name, shape) for every parameter block in flatten order."""
        out = []
        for layer in range(self.layers):
            n_in = self.input if layer == 0 else self.hidden
            for g in GATES:
                out += [(f"W_{g}{layer}", (n_in, self.hidden)),
                        (f"U_{g}{layer}", (self.hidden, self.hidden)),
                        (f"b_{g}{layer}", (self.hidden,))]
        out += [("w_o", (self.hidden,)), ("b_o", ())]
        return out

    @property
    def n_params(self):
        H, F, L = self.hidden, self.input, self.layers
        first = 3 * (F * H + H * H + H)
        rest = (L - 1) * 3 * (H * H + H * H + H)
        return first + rest + H + 1

    def to_dict(self):
        return {"input": self.input, "hidden": self.hidden, "layers": self.layers}

    @classmethod
    def preset(cls, name):
        return cls(*PRESETS[name])


@dataclass
class EvalModelState:
    arch: Arch
    params: dict
    standardizer: object = None

    def arrays(self):
        return [self.params[name] for name, _ in self.arch.shapes()]

    def copy(self):
        return EvalModelState(self.arch, {k: v.copy() for k, v in self.params.items()}, self.standardizer)


def init_state(arch, rng):
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases."""
    bound = 1.0 / np.sqrt(arch.hidden)
    params = {}
    for name, shape in arch.shapes():
        if name.startswith("b_"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-bound, bound, size=shape)
    return EvalModelState(arch, params)


def zero_state(arch):
    return EvalModelState(arch, {name: np.zeros(shape) for name, shape in arch.shapes()})


def flatten(state):
    return np.concatenate([np.ravel(a) for a in state.arrays()])


def unflatten(vector, arch, standardizer=None):
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or len(vector) != arch.n_params:
        raise LengthMismatch(f"expected {arch.n_params} parameters, got shape {vector.shape}")
    params, pos = {}, 0
    for name, shape in arch.shapes():
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = vector[pos:pos + size].reshape(shape).copy()
        pos += size
    return EvalModelState(arch, params, standardizer)


def hard_label(p):
    """1 (stable) iff p >= 0.5; works on scalars and arrays."""
    out = (np.asarray(p) >= 0.5).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def _check_input(arch, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != arch.input:
        raise ShapeMismatch(f"expected (n, T, {arch.input}) sequences, got {np.shape(X)}")
    return X, single


def predict_proba(state, X):
    """Stability probability for standardized sequences (T, F) or (n, T, F)."""
    X, single = _check_input(state.arch, X)
    P = state.params
    seq = X
    for layer in range(state.arch.layers):
        h = np.zeros((X.shape[0], state.arch.hidden))
        outs = []
        for t in range(seq.shape[1]):
            x = seq[:, t]
            z = expit(x @ P[f"W_z{layer}"] + h @ P[f"U_z{layer}"] + P[f"b_z{layer}"])
            r = expit(x @ P[f"W_r{layer}"] + h @ P[f"U_r{layer}"] + P[f"b_r{layer}"])
            c = np.tanh(x @ P[f"W_h{layer}"] + (r * h) @ P[f"U_h{layer}"] + P[f"b_h{layer}"])
            h = (1.0 - z) * h + z * c
            outs.append(h)
        seq = np.stack(outs, axis=1)
    p = expit(h @ P["w_o"] + P["b_o"])
    return p[0] if single else p


def forward_tape(tape, leaves, arch, X):
    """Tape forward for a standardized batch (n, T, F); returns the (n,) probability tensor."""
    n, T, _ = X.shape
    inputs = [tape.constant(X[:, t]) for t in range(T)]
    for layer in range(arch.layers):
        W = {g: leaves[f"W_{g}{layer}"] for g in GATES}
        U = {g: leaves[f"U_{g}{layer}"] for g in GATES}
        b = {g: leaves[f"b_{g}{layer}"] for g in GATES}
        h = tape.constant(np.zeros((n, arch.hidden)))
        outs = []
        for x in inputs:
            z = ad.sigmoid(x @ W["z"] + h @ U["z"] + b["z"])
            r = ad.sigmoid(x @ W["r"] + h @ U["r"] + b["r"])
            c = ad.tanh(x @ W["h"] + ad.mul(r, h) @ U["h"] + b["h"])
            h = ad.mul(1.0 - z, h) + ad.mul(z, c)
            outs.append(h)
        inputs = outs
    return ad.sigmoid(h @ leaves["w_o"] + leaves["b_o"])


def flat_tensor(leaves, arch):
    """Concatenate parameter leaves into one (Num,) tensor in flatten order."""
    parts = []
    for name, shape in arch.shapes():
        t = leaves[name]
        parts.append(ad.reshape(t, (int(np.prod(shape, dtype=np.int64)),)))
    return ad.concat(parts)


@dataclass
class LossConfig:
    sigma: float = 0.0
    reg_mode: str = "none"
    surrogate: object = None

    def __post_init__(self):
        if self.reg_mode not in REG_MODES:
            raise ValueError(f"reg_mode must be one of {REG_MODES}, got {self.reg_mode!r}")


def _build_loss(state, X, y, cfg):
    """Return (tape, leaves, loss, mse, reg) with reg None when inert."""
    if cfg.reg_mode == "tree" and cfg.surrogate is None:
        raise SurrogateMissing("reg_mode 'tree' needs a trained surrogate")
    X, _ = _check_input(state.arch, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) != len(X):
        raise ShapeMismatch(f"{len(X)} sequences but {len(y)} targets")
    tape = ad.Tape()
    leaves = {name: tape.leaf(state.params[name]) for name, _ in state.arch.shapes()}
    p = forward_tape(tape, leaves, state.arch, X)
    mse = ad.mean(ad.square(p - y))
    loss, reg = mse, None
    if cfg.reg_mode != "none" and cfg.sigma != 0.0:
        w = flat_tensor(leaves, state.arch)
        if cfg.reg_mode == "tree":
            from .surrogate import predict_depth_tape
            reg = predict_depth_tape(cfg.surrogate, w)
        elif cfg.reg_mode == "l1":
            reg = ad.sum(ad.abs_(w))
        else:
            reg = ad.sum(ad.square(w))
        loss = mse + reg * float(cfg.sigma)
    return tape, leaves, loss, mse, reg


def loss(state, X, y, cfg=None):
    cfg = cfg or LossConfig()
    return float(_build_loss(state, X, y, cfg)[2].value)


def loss_and_grad(state, X, y, cfg=None):
    """Loss value and gradient arrays in flatten order; surrogate weights stay frozen."""
    cfg = cfg or LossConfig()
    tape, leaves, total, mse, reg = _build_loss(state, X, y, cfg)
    tape.backward(total)
    grads = [leaves[name].grad for name, _ in state.arch.shapes()]
    info = {"loss": float(total.value), "mse": float(mse.value),
            "reg": 0.0 if reg is None else float(reg.value)}
    return info, grads


@dataclass
class EpochStats:
    loss: float
    mse: float
    reg: float
    accuracy: float
    batches: int


@dataclass
class TrainSettings:
    batch_size: int = 32
    adam: ad.AdamState = field(default_factory=ad.AdamState)


def train_epoch(state, X, y, cfg, settings, rng):
    """One pass over (X, y) in a minibatch order drawn from ``rng``; updates ``state`` in place."""
    X, _ = _check_input(state.arch, X)
    y = np.asarray(y, dtype=np.float64)
    order = rng.permutation(len(X))
    params = state.arrays()
    tot_loss = tot_mse = tot_reg = 0.0
    nb = 0
    for lo in range(0, len(X), settings.batch_size):
        idx = order[lo:lo + settings.batch_size]
        info, grads = loss_and_grad(state, X[idx], y[idx], cfg)
        ad.adam_step(params, grads, settings.adam)
        tot_loss += info["loss"]
        tot_mse += info["mse"]
        tot_reg += info["reg"]
        nb += 1
    acc = float(np.mean(hard_label(predict_proba(state, X)) == hard_label(y)))
    return EpochStats(tot_loss / nb, tot_mse / nb, tot_reg / nb, acc, nb)


# -- checkpoint -------------------------------------------------------------------

def save_checkpoint(state, path, **extra):
    """Write ``path``.json (manifest) and ``path``.bin (little-endian float64 params)."""
    path = Path(path)
    vec = flatten(state)
    path.with_suffix(".bin").write_bytes(vec.astype("<f8").tobytes())
    manifest = {
        "format_version": 1,
        "kind": "nnem",
        "arch": state.arch.to_dict(),
        "flatten_order_version": FLATTEN_ORDER_VERSION,
        "n_params": int(len(vec)),
        "standardizer": None if state.standardizer is None else state.standardizer.to_dict(),
    }
    manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    from .featurebase import Standardizer

    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    arch = Arch(**manifest["arch"])
    vec = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    st = manifest.get("standardizer")
    return unflatten(vec, arch, None if st is None else Standardizer.from_dict(st)), manifest
