"""Quick self-checks on micro fixtures: gradients, CART against brute force,
expert-term identities and simulator equilibrium invariance."""
from __future__ import annotations

import time

import numpy as np

from . import featurebase as fb
from . import nnem, powersim, regtree
from . import surrogate as sg

GRAD_FLOOR = 1e-6


def micro_problem(seed, T=4, batch=6):
    """Micro evaluation model (F=5, H=4), a random surrogate on its parameters, and a batch."""
    rng = np.random.default_rng(seed)
    arch = nnem.Arch.preset("micro")
    state = nnem.init_state(arch, rng)
    for name, shape in arch.shapes():   # non-zero biases so every path is exercised
        if name.startswith("b_"):
            state.params[name] = rng.normal(0, 0.3, size=shape)
    model = sg.init_model(arch.n_params, sg.PRESETS["micro"], rng, out_bias=2.0)
    model.weights[1] = rng.normal(0, 0.5, size=model.weights[1].shape)
    X = rng.normal(size=(batch, T, arch.input))
    y = (rng.uniform(size=batch) > 0.5).astype(float)
    return state, X, y, model


def finite_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(a, b, floor=GRAD_FLOOR):
    """Max over entries of |a − b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradient_check(seed, sigma=1.0, h=1e-5):
    """Max relative error of the tree-regularized loss gradient against central differences."""
    state, X, y, model = micro_problem(seed)
    cfg = nnem.LossConfig(sigma, "tree", model)
    _, grads = nnem.loss_and_grad(state, X, y, cfg)
    analytic = np.concatenate([np.ravel(g) for g in grads])
    arch = state.arch

    def f(w):
        return nnem.loss(nnem.unflatten(w, arch), X, y, cfg)

    numeric = finite_difference(f, nnem.flatten(state), h)
    return relative_error(analytic, numeric)


# -- brute-force CART oracle ---------------------------------------------------------

def _sse(v):
    if len(v) == 0:
        return 0.0
    v = np.asarray(v)
    return float(np.sum((v - np.mean(v)) ** 2))


def _midpoint(lo, hi):
    t = lo / 2.0 + hi / 2.0
    return t if lo <= t < hi else lo


def brute_force_tree(X, y, s_leaf, max_depth):
    """Greedy tree by enumerating every (feature, midpoint) split; nodes in pre-order.

    Each node is ``(feature, threshold, value, n)`` with feature -1 at leaves.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    nodes = []

    def grow(idx, depth):
        yn = y[idx]
        parent = _sse(yn)
        slot = len(nodes)
        nodes.append((-1, None, float(np.mean(yn)), len(idx)))
        if depth >= max_depth:
            return
        best = None
        for f in range(X.shape[1]):
            vals = sorted(set(X[idx, f].tolist()))
            for lo, hi in zip(vals[:-1], vals[1:]):
                thr = _midpoint(lo, hi)
                left = [i for i in idx if X[i, f] <= thr]
                right = [i for i in idx if X[i, f] > thr]
                if len(left) < s_leaf or len(right) < s_leaf:
                    continue
                score = _sse(y[left]) + _sse(y[right])
                if best is None or (score, f, thr) < best[0]:
                    best = ((score, f, thr), left, right)
        if best is None or not parent - best[0][0] > regtree.MIN_GAIN:
            return
        (_, f, thr), left, right = best
        nodes[slot] = (f, thr, float(np.mean(yn)), len(idx))
        grow(left, depth + 1)
        grow(right, depth + 1)

    grow(list(range(len(y))), 1)
    return nodes


def tree_nodes(tree):
    return [(int(tree.feature[i]), None if tree.feature[i] < 0 else float(tree.threshold[i]),
             float(tree.value[i]), int(tree.n_samples[i])) for i in range(tree.n_nodes)]


def random_cart_instance(rng):
    n = int(rng.integers(1, 65))
    d = int(rng.integers(1, 5))
    # a coarse grid produces ties in both x and SSE
    if rng.uniform() < 0.5:
        X = rng.integers(0, 6, size=(n, d)).astype(float)
    else:
        X = rng.normal(size=(n, d))
    y = rng.uniform(size=n) if rng.uniform() < 0.5 else rng.integers(0, 2, size=n).astype(float)
    s_leaf = int(rng.integers(1, 8))
    max_depth = int(rng.integers(1, 7))
    return X, y, s_leaf, max_depth


def cart_oracle_check(seed, instances=50):
    """Number of instances on which fit() and the brute-force oracle agree."""
    rng = np.random.default_rng(seed)
    agree = 0
    for _ in range(instances):
        X, y, s_leaf, max_depth = random_cart_instance(rng)
        tree = regtree.fit(X, y, s_leaf, max_depth)
        agree += tree_nodes(tree) == brute_force_tree(X, y, s_leaf, max_depth)
    return agree


# -- physics and feature identities ------------------------------------------------------

def trig_identity_error(seed=0):
    """Max deviation of sin²+cos²=1, |I|²=(P²+Q²)/V² and V²P = V·(VP) on random raw blocks."""
    rng = np.random.default_rng(seed)
    n_gen, n_bus, T = 2, 3, 4
    schema = fb.raw_schema(n_gen, n_bus, T)
    raw = rng.normal(size=(8, T, len(schema) // T))
    v_cols = [i for i, d in enumerate(schema[:len(schema) // T]) if d.kind == "v"]
    raw[:, :, v_cols] = rng.uniform(0.6, 1.2, size=(8, T, len(v_cols)))
    ex = fb.expert_terms(raw, n_gen, n_bus)          # (8, T, 2·n_gen + 6·n_bus)
    gen = ex[..., :2 * n_gen].reshape(8, T, n_gen, 2)
    bus = ex[..., 2 * n_gen:].reshape(8, T, n_bus, 6)
    nb = len(fb.BUS_SIGNALS)
    busraw = raw[..., 6 * n_gen:].reshape(8, T, n_bus, nb)
    v, p, q = busraw[..., 0], busraw[..., 3], busraw[..., 4]
    errs = [
        np.abs(gen[..., 0] ** 2 + gen[..., 1] ** 2 - 1.0),
        np.abs(bus[..., 0] ** 2 + bus[..., 1] ** 2 - (p * p + q * q) / (v * v)),
        np.abs(bus[..., 2] - v * bus[..., 4]),
        np.abs(bus[..., 3] - v * bus[..., 5]),
    ]
    return float(max(e.max() for e in errs))


def equilibrium_drift(horizon=3.0):
    sys = powersim.default_system()
    traj = powersim.simulate(sys, None, horizon=horizon)
    return float(np.max(np.abs(traj.delta - traj.delta[0])))


def run_all(seed=0):
    """List of ``(name, passed, detail)``."""
    out = []

    def add(name, fn):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), f"{detail} [{time.perf_counter() - t0:.2f}s]"))

    def grad():
        err = max(gradient_check(seed + i) for i in range(3))
        return err < 1e-4, f"max rel err {err:.2e}"

    def cart():
        agree = cart_oracle_check(seed, 20)
        return agree == 20, f"{agree}/20 instances match"

    def trig():
        err = trig_identity_error(seed)
        return err < 1e-12, f"max identity error {err:.2e}"

    def equil():
        drift = equilibrium_drift()
        return drift < 1e-6, f"drift {drift:.2e} rad"

    add("gradient", grad)
    add("cart_oracle", cart)
    add("expert_identities", trig)
    add("equilibrium", equil)
    return out
