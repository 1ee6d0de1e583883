import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsatree import featurebase as fb
from tsatree.errors import DivisionByZero, IndexOutOfRange, SchemaMismatch

N_GEN, N_BUS, T = 2, 3, 10
F_RAW = 6 * N_GEN + 5 * N_BUS


def random_raw(rng, n=5, T=T):
    raw = rng.normal(size=(n, T, F_RAW))
    v_cols = [i for i, d in enumerate(fb.raw_schema(N_GEN, N_BUS, 1)) if d.kind == "v"]
    raw[:, :, v_cols] = rng.uniform(0.5, 1.3, size=(n, T, len(v_cols)))
    return raw


def test_raw_width_and_expanded_width():
    schema = fb.raw_schema(N_GEN, N_BUS, T)
    assert len(schema) == 27 * T
    assert fb.expanded_width(N_GEN, N_BUS, T, 27) == 490
    m = fb.expand_expert(np.ones((T, 27)), schema)
    assert m.values.shape == (490,)
    assert len(m.schema) == 490


def test_expanded_layout_keeps_raw_block_first(rng):
    raw = random_raw(rng)
    schema = fb.raw_schema(N_GEN, N_BUS, T)
    m = fb.expand_expert(raw, schema)
    np.testing.assert_array_equal(m.values[:, :270], raw.reshape(5, -1))
    assert not any(d.expert for d in m.schema[:270])
    assert all(d.expert for d in m.schema[270:])


def test_current_terms_match_complex_arithmetic(rng):
    raw = random_raw(rng)
    ex = fb.expert_terms(raw, N_GEN, N_BUS)
    bus = raw[..., 6 * N_GEN:].reshape(5, T, N_BUS, 5)
    V = bus[..., 0] * np.exp(1j * bus[..., 1])
    S = bus[..., 3] + 1j * bus[..., 4]
    I = np.conj(S / V)
    terms = ex[..., 2 * N_GEN:].reshape(5, T, N_BUS, 6)
    np.testing.assert_allclose(terms[..., 0], I.real, atol=1e-12)
    np.testing.assert_allclose(terms[..., 1], I.imag, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_expert_identities_hold(seed):
    rng = np.random.default_rng(seed)
    raw = random_raw(rng, n=3, T=4)
    ex = fb.expert_terms(raw, N_GEN, N_BUS)
    gen = ex[..., :2 * N_GEN].reshape(3, 4, N_GEN, 2)
    np.testing.assert_allclose(gen[..., 0] ** 2 + gen[..., 1] ** 2, 1.0, atol=1e-12)
    bus = ex[..., 2 * N_GEN:].reshape(3, 4, N_BUS, 6)
    raw_bus = raw[..., 6 * N_GEN:].reshape(3, 4, N_BUS, 5)
    v, p, q = raw_bus[..., 0], raw_bus[..., 3], raw_bus[..., 4]
    np.testing.assert_allclose(bus[..., 0] ** 2 + bus[..., 1] ** 2, (p * p + q * q) / (v * v), rtol=1e-10)
    np.testing.assert_allclose(bus[..., 2], v * bus[..., 4], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(bus[..., 3], v * bus[..., 5], rtol=1e-12, atol=1e-14)


def test_family_subset_and_groups(rng):
    raw = random_raw(rng)
    schema = fb.raw_schema(N_GEN, N_BUS, T)
    fams = fb.families_for_groups(("dq",))
    assert fams == ("sin_delta", "cos_delta")
    m = fb.expand_expert(raw, schema, fams)
    assert m.values.shape == (5, 270 + 2 * N_GEN * T)
    assert set(m.schema.families()[270:]) == {"sin_delta", "cos_delta"}
    none = fb.expand_expert(raw, schema, ())
    np.testing.assert_array_equal(none.values, raw.reshape(5, -1))


def test_final_snapshot_policy(rng):
    raw = random_raw(rng)
    m = fb.expand_expert(raw, fb.raw_schema(N_GEN, N_BUS, T), policy="final_snapshot")
    assert m.values.shape == (5, 27 + 2 * N_GEN + 6 * N_BUS)
    np.testing.assert_array_equal(m.values[:, :27], raw[:, -1])
    assert {d.step for d in m.schema} == {T - 1}


def test_low_voltage_raises(rng):
    raw = random_raw(rng)
    raw[0, 0, 6 * N_GEN] = 0.0
    with pytest.raises(DivisionByZero):
        fb.expert_terms(raw, N_GEN, N_BUS)


def test_schema_mismatch_and_names(rng):
    schema = fb.raw_schema(N_GEN, N_BUS, T)
    with pytest.raises(SchemaMismatch):
        fb.expand_expert(np.ones((T, 26)), schema)
    with pytest.raises(IndexOutOfRange):
        fb.feature_name(270, schema)
    assert fb.feature_name(0, schema) == "δ_G1@t0 (deg)"
    assert fb.feature_name(6 * N_GEN, schema) == "V_bus1@t0 (p.u.)"


def test_schema_round_trip():
    schema = fb.expanded_schema(fb.raw_schema(N_GEN, N_BUS, 3))
    assert fb.FeatureSchema.from_list(schema.to_list()) == schema


def test_standardizer_floor_and_round_trip(rng):
    X = rng.normal(3.0, 2.0, size=(200, 4))
    X[:, 2] = 7.0
    s = fb.Standardizer.fit(X)
    Z = s.apply(X)
    np.testing.assert_allclose(Z[:, [0, 1, 3]].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(Z[:, [0, 1, 3]].std(axis=0), 1.0, atol=1e-12)
    assert s.std[2] == fb.STD_FLOOR
    np.testing.assert_array_equal(Z[:, 2], 0.0)
    np.testing.assert_allclose(s.invert(Z), X, atol=1e-12)
    back = fb.Standardizer.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.mean, s.mean)
    with pytest.raises(ValueError):
        fb.Standardizer.fit(np.zeros((0, 3)))


def test_dataset_features_match_schema(small_dataset):
    schema = small_dataset.schema
    assert len(schema) == 270
    # voltages in the window stay positive, so the expansion is always defined
    m = fb.expand_expert(small_dataset.features, schema)
    assert np.all(np.isfinite(m.values))


def test_current_terms_reconstruct_bus_power(rng):
    raw = random_raw(rng)
    ex = fb.expert_terms(raw, N_GEN, N_BUS)[..., 2 * N_GEN:].reshape(5, T, N_BUS, 6)
    bus = raw[..., 6 * N_GEN:].reshape(5, T, N_BUS, 5)
    v, th, p, q = bus[..., 0], bus[..., 1], bus[..., 3], bus[..., 4]
    ire, iim = ex[..., 0], ex[..., 1]
    np.testing.assert_allclose(v * (ire * np.cos(th) + iim * np.sin(th)), p, atol=1e-12)
    np.testing.assert_allclose(v * (ire * np.sin(th) - iim * np.cos(th)), q, atol=1e-12)


def test_feature_names_are_distinct():
    schema = fb.expanded_schema(fb.raw_schema(N_GEN, N_BUS, T))
    names = [d.name for d in schema]
    assert len(set(names)) == len(names) == 490


def test_expansion_is_stable_and_standardizer_free(rng):
    raw = random_raw(rng)
    schema = fb.raw_schema(N_GEN, N_BUS, T)
    a = fb.expand_expert(raw, schema)
    fb.Standardizer.fit(a.values)      # fitting a standardizer must not change anything
    b = fb.expand_expert(raw, schema)
    assert a.values.tobytes() == b.values.tobytes() and a.schema == b.schema
