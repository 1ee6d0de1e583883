import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsatree import autodiff as ad
from tsatree import nnem
from tsatree import surrogate as sg
from tsatree.errors import LengthMismatch, ShapeMismatch, SurrogateMissing


def scalar_gru(params, x_seq, H):
    """Straight-line scalar GRU, one sample, loops only; independent of numpy matmul."""
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))  # noqa: E731
    h = [0.0] * H
    for x in x_seq:
        def gate(g, act, hin):
            W, U, b = params[f"W_{g}0"], params[f"U_{g}0"], params[f"b_{g}0"]
            return [act(sum(x[i] * W[i][j] for i in range(len(x)))
                        + sum(hin[k] * U[k][j] for k in range(H)) + b[j]) for j in range(H)]
        z = gate("z", sig, h)
        r = gate("r", sig, h)
        c = gate("h", math.tanh, [r[k] * h[k] for k in range(H)])
        h = [(1 - z[j]) * h[j] + z[j] * c[j] for j in range(H)]
    return sig(sum(h[j] * params["w_o"][j] for j in range(H)) + float(params["b_o"]))


def micro_state(seed):
    rng = np.random.default_rng(seed)
    arch = nnem.Arch.preset("micro")
    state = nnem.unflatten(rng.normal(0, 0.5, arch.n_params), arch)
    return state, rng


def test_parameter_counts():
    assert nnem.Arch.preset("desk").n_params == 5793
    assert nnem.Arch.preset("micro").n_params == 125
    arch = nnem.Arch(7, 3, 2)
    assert arch.n_params == sum(int(np.prod(s)) for _, s in arch.shapes())


def test_zero_parameters_give_one_half(rng):
    state = nnem.zero_state(nnem.Arch.preset("micro"))
    p = nnem.predict_proba(state, rng.normal(size=(4, 6, 5)))
    np.testing.assert_array_equal(p, 0.5)
    assert nnem.hard_label(0.5) == 1


def test_forward_matches_scalar_oracle():
    state, rng = micro_state(1)
    X = rng.normal(size=(3, 5, 5))
    p = nnem.predict_proba(state, X)
    plain = {k: v.tolist() for k, v in state.params.items()}
    for i in range(3):
        assert p[i] == pytest.approx(scalar_gru(plain, X[i].tolist(), 4), abs=1e-14)


def test_tape_forward_matches_numpy():
    state, rng = micro_state(2)
    X = rng.normal(size=(4, 3, 5))
    tape = ad.Tape()
    leaves = {n: tape.leaf(state.params[n]) for n, _ in state.arch.shapes()}
    p = nnem.forward_tape(tape, leaves, state.arch, X)
    np.testing.assert_allclose(p.value, nnem.predict_proba(state, X), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 2), st.integers(0, 10_000))
def test_flatten_round_trip(F, H, L, seed):
    arch = nnem.Arch(F, H, L)
    w = np.random.default_rng(seed).normal(size=arch.n_params)
    state = nnem.unflatten(w, arch)
    np.testing.assert_array_equal(nnem.flatten(state), w)
    assert state.params["W_z0"].shape == (F, H)


def test_flatten_order_starts_with_update_gate():
    arch = nnem.Arch.preset("micro")
    w = np.arange(arch.n_params, dtype=float)
    s = nnem.unflatten(w, arch)
    assert s.params["W_z0"][0, 0] == 0 and s.params["W_z0"][0, 1] == 1
    assert s.params["U_z0"][0, 0] == 20
    assert float(s.params["b_o"]) == arch.n_params - 1
    with pytest.raises(LengthMismatch):
        nnem.unflatten(w[:-1], arch)


def test_shape_checks(rng):
    state, _ = micro_state(0)
    with pytest.raises(ShapeMismatch):
        nnem.predict_proba(state, rng.normal(size=(2, 3, 4)))
    assert np.ndim(nnem.predict_proba(state, rng.normal(size=(3, 5)))) == 0


def test_loss_values_by_mode():
    state, rng = micro_state(3)
    X, y = rng.normal(size=(6, 4, 5)), rng.integers(0, 2, 6).astype(float)
    mse = float(np.mean((nnem.predict_proba(state, X) - y) ** 2))
    w = nnem.flatten(state)
    assert nnem.loss(state, X, y) == pytest.approx(mse, rel=1e-14)
    assert nnem.loss(state, X, y, nnem.LossConfig(0.5, "l1")) == pytest.approx(mse + 0.5 * np.abs(w).sum())
    assert nnem.loss(state, X, y, nnem.LossConfig(0.5, "l2")) == pytest.approx(mse + 0.5 * (w * w).sum())
    # constant surrogate: zero output weights, output bias = 4.2
    surr = sg.init_model(len(w), (3,), rng, out_bias=4.2)
    surr.weights[-2][:] = 0.0
    assert nnem.loss(state, X, y, nnem.LossConfig(1.0, "tree", surr)) == pytest.approx(mse + 4.2)
    assert nnem.loss(state, X, y, nnem.LossConfig(0.0, "tree", surr)) == pytest.approx(mse)


def test_tree_mode_without_surrogate_fails(rng):
    state, _ = micro_state(0)
    with pytest.raises(SurrogateMissing):
        nnem.loss(state, rng.normal(size=(2, 3, 5)), np.ones(2), nnem.LossConfig(1.0, "tree"))
    with pytest.raises(ValueError):
        nnem.LossConfig(1.0, "l3")


def test_hard_label_threshold():
    np.testing.assert_array_equal(nnem.hard_label(np.array([0.4999999, 0.5, 0.9])), [0, 1, 1])


def test_gradient_matches_finite_differences():
    state, rng = micro_state(4)
    X, y = rng.normal(size=(5, 3, 5)), rng.integers(0, 2, 5).astype(float)
    surr = sg.init_model(state.arch.n_params, (6,), rng, out_bias=1.0)
    cfg = nnem.LossConfig(0.7, "tree", surr)
    _, grads = nnem.loss_and_grad(state, X, y, cfg)
    g = np.concatenate([np.ravel(a) for a in grads])
    w0 = nnem.flatten(state)
    for i in rng.choice(len(w0), 25, replace=False):
        wp, wm = w0.copy(), w0.copy()
        wp[i] += 1e-6
        wm[i] -= 1e-6
        fd = (nnem.loss(nnem.unflatten(wp, state.arch), X, y, cfg)
              - nnem.loss(nnem.unflatten(wm, state.arch), X, y, cfg)) / 2e-6
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def toy_problem(seed=0, n=128):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4, 5))
    y = (X[:, -1, 0] + X[:, -1, 1] > 0).astype(float)
    return X, y


def test_training_learns_a_separable_toy():
    X, y = toy_problem()
    rng = np.random.default_rng(0)
    state = nnem.init_state(nnem.Arch(5, 8), rng)
    settings_ = nnem.TrainSettings(16, ad.AdamState(lr=0.02))
    first = nnem.train_epoch(state, X, y, nnem.LossConfig(), settings_, rng)
    for _ in range(30):
        last = nnem.train_epoch(state, X, y, nnem.LossConfig(), settings_, rng)
    assert last.mse < first.mse
    assert last.accuracy >= 0.95
    assert last.batches == 8


def test_training_is_deterministic():
    X, y = toy_problem(n=40)
    out = []
    for _ in range(2):
        rng = np.random.default_rng(5)
        state = nnem.init_state(nnem.Arch(5, 3), rng)
        nnem.train_epoch(state, X, y, nnem.LossConfig(0.01, "l2"), nnem.TrainSettings(8), rng)
        out.append(nnem.flatten(state))
    np.testing.assert_array_equal(out[0], out[1])


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    from tsatree.featurebase import Standardizer
    state, rng = micro_state(6)
    state.standardizer = Standardizer.fit(rng.normal(size=(20, 5)))
    nnem.save_checkpoint(state, tmp_path / "m")
    back, manifest = nnem.load_checkpoint(tmp_path / "m")
    assert nnem.flatten(back).tobytes() == nnem.flatten(state).tobytes()
    assert manifest["n_params"] == 125
    assert manifest["flatten_order_version"] == nnem.FLATTEN_ORDER_VERSION
    np.testing.assert_array_equal(back.standardizer.std, state.standardizer.std)


def test_loss_mostly_non_increasing_early():
    X, y = toy_problem(1, n=96)
    rng = np.random.default_rng(1)
    state = nnem.init_state(nnem.Arch(5, 6), rng)
    settings_ = nnem.TrainSettings(16, ad.AdamState(lr=0.01))
    losses = [nnem.train_epoch(state, X, y, nnem.LossConfig(), settings_, rng).mse for _ in range(5)]
    assert sum(b > a for a, b in zip(losses, losses[1:])) <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_probability_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    state = nnem.init_state(nnem.Arch(5, 4), rng)
    X = np.clip(rng.normal(0, scale, size=(8, 6, 5)), -50, 50)
    p = nnem.predict_proba(state, X)
    assert np.all((p > 0.0) & (p < 1.0))
