"""Raw measurement schema, expert nonlinear terms and standardization.

Raw features per time step, in order::

    for each generator: delta, f_sd, p_m, p_e, p_acc, q_g
    for each bus:       v, theta, f_fd, p_l, q_l

Expert terms are computed from the physical (unstandardized) raw values and
come in eight families grouped by the relation they are taken from:

    dq        sin_delta, cos_delta                  (d-q to network frame rotation)
    current   i_re, i_im                            (bus load current)
    load      v2p, v2q, vp, vq                      (ZIP load characteristic)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DivisionByZero, IndexOutOfRange, SchemaMismatch

GEN_SIGNALS = (
    # kind, label, display unit, display scale (stored -> display)
    ("delta", "δ_G{o}", "deg", 180.0 / math.pi),
    ("f_sd", "f_SD_G{o}", "Hz", 1.0),
    ("p_m", "P_m_G{o}", "p.u.", 1.0),
    ("p_e", "P_e_G{o}", "p.u.", 1.0),
    ("p_acc", "P_acc_G{o}", "p.u.", 1.0),
    ("q_g", "Q_G{o}", "p.u.", 1.0),
)
BUS_SIGNALS = (
    ("v", "V_bus{o}", "p.u.", 1.0),
    ("theta", "θ_bus{o}", "deg", 180.0 / math.pi),
    ("f_fd", "f_FD_bus{o}", "Hz", 1.0),
    ("p_l", "P_L_bus{o}", "p.u.", 1.0),
    ("q_l", "Q_L_bus{o}", "p.u.", 1.0),
)
GEN_FAMILIES = (("sin_delta", "sin(δ_G{o})"), ("cos_delta", "cos(δ_G{o})"))
BUS_FAMILIES = (
    ("i_re", "I_re@bus{o}"),
    ("i_im", "I_im@bus{o}"),
    ("v2p", "V²·P@bus{o}"),
    ("v2q", "V²·Q@bus{o}"),
    ("vp", "V·P@bus{o}"),
    ("vq", "V·Q@bus{o}"),
)
EXPERT_FAMILIES = tuple(f for f, _ in GEN_FAMILIES + BUS_FAMILIES)
FAMILY_MEANING = {
    "sin_delta": "sine of generator power angle",
    "cos_delta": "cosine of generator power angle",
    "i_re": "real part of bus positive-sequence current",
    "i_im": "imaginary part of bus positive-sequence current",
    "v2p": "voltage-squared transform of bus active load",
    "v2q": "voltage-squared transform of bus reactive load",
    "vp": "voltage-linear transform of bus active load",
    "vq": "voltage-linear transform of bus reactive load",
}
# family groups toggled together in ablations
FAMILY_GROUPS = {
    "dq": ("sin_delta", "cos_delta"),
    "current": ("i_re", "i_im"),
    "load": ("v2p", "v2q", "vp", "vq"),
}
POLICIES = ("flattened_window", "final_snapshot")
V_EPS = 1e-6
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class FeatureDescriptor:
    kind: str
    obj: int           # generator or bus index (0-based)
    step: int
    unit: str
    family: str        # "raw" or one of EXPERT_FAMILIES
    label: str
    scale: float = 1.0  # stored value * scale = displayed value

    @property
    def name(self):
        suffix = f" ({self.unit})" if self.family == "raw" else ""
        return f"{self.label}@t{self.step}{suffix}"

    @property
    def expert(self):
        return self.family != "raw"


class FeatureSchema:
    """Ordered list of feature descriptors shared by dataset, model and tree."""

    def __init__(self, descriptors):
        self.descriptors = tuple(descriptors)

    def __len__(self):
        return len(self.descriptors)

    def __getitem__(self, i):
        return self.descriptors[i]

    def __eq__(self, other):
        return isinstance(other, FeatureSchema) and self.descriptors == other.descriptors

    def __hash__(self):
        return hash(self.descriptors)

    def families(self):
        return np.array([d.family for d in self.descriptors])

    def to_list(self):
        return [asdict(d) | {"name": d.name} for d in self.descriptors]

    @classmethod
    def from_list(cls, items):
        fields = FeatureDescriptor.__dataclass_fields__
        return cls(FeatureDescriptor(**{k: v for k, v in it.items() if k in fields}) for it in items)


def raw_schema(n_gen, n_bus, steps):
    out = []
    for t in range(steps):
        for g in range(n_gen):
            for kind, label, unit, scale in GEN_SIGNALS:
                out.append(FeatureDescriptor(kind, g, t, unit, "raw", label.format(o=g + 1), scale))
        for b in range(n_bus):
            for kind, label, unit, scale in BUS_SIGNALS:
                out.append(FeatureDescriptor(kind, b, t, unit, "raw", label.format(o=b + 1), scale))
    return FeatureSchema(out)


def raw_features(traj, window):
    """Stack the raw per-step signals at grid indices ``window`` into a (T, F) block."""
    w = np.asarray(window)
    gen = np.stack([traj.delta[w], traj.speed_hz[w], traj.pm[w], traj.pe[w],
                    traj.pm[w] - traj.pe[w], traj.qg[w]], axis=-1)          # (T, n_gen, 6)
    bus = np.stack([traj.v[w], traj.theta[w], traj.f_bus[w], traj.pl[w], traj.ql[w]], axis=-1)
    T = len(w)
    return np.concatenate([gen.reshape(T, -1), bus.reshape(T, -1)], axis=1)


def _layout(raw_schema_):
    """(n_gen, n_bus, T) inferred from a raw schema."""
    gens = {d.obj for d in raw_schema_ if d.kind == "delta"}
    buses = {d.obj for d in raw_schema_ if d.kind == "v"}
    steps = {d.step for d in raw_schema_}
    return len(gens), len(buses), len(steps)


@dataclass
class ExpandedMatrix:
    values: np.ndarray      # (n, F_exp)
    schema: FeatureSchema


def expert_terms(raw, n_gen, n_bus, families=EXPERT_FAMILIES, v_eps=V_EPS):
    """Expert nonlinear terms for raw blocks of shape (..., T, F).

    Returns an array (..., T, k) ordered per step as: generator families for each
    generator, then bus families for each bus, keeping only ``families``.
    """
    raw = np.asarray(raw, dtype=float)
    ng = len(GEN_SIGNALS)
    nb = len(BUS_SIGNALS)
    delta = raw[..., 0:n_gen * ng:ng]
    bus = raw[..., n_gen * ng:n_gen * ng + n_bus * nb]
    v, theta, p, q = bus[..., 0::nb], bus[..., 1::nb], bus[..., 3::nb], bus[..., 4::nb]
    if np.any(v <= v_eps):
        raise DivisionByZero(f"bus voltage at or below {v_eps} p.u.; current terms undefined")
    gen_terms = {"sin_delta": np.sin(delta), "cos_delta": np.cos(delta)}
    c, s = np.cos(theta), np.sin(theta)
    bus_terms = {
        "i_re": (p * c + q * s) / v,
        "i_im": (p * s - q * c) / v,
        "v2p": v * v * p,
        "v2q": v * v * q,
        "vp": v * p,
        "vq": v * q,
    }
    parts = []
    for g in range(n_gen):
        parts += [gen_terms[f][..., g] for f, _ in GEN_FAMILIES if f in families]
    for b in range(n_bus):
        parts += [bus_terms[f][..., b] for f, _ in BUS_FAMILIES if f in families]
    if not parts:
        return np.zeros(raw.shape[:-1] + (0,))
    return np.stack(parts, axis=-1)


def expanded_schema(raw_schema_, families=EXPERT_FAMILIES, policy="flattened_window"):
    n_gen, n_bus, T = _layout(raw_schema_)
    steps = range(T) if policy == "flattened_window" else [T - 1]
    raw_part = [d for d in raw_schema_ if d.step in steps]
    exp_part = []
    for t in steps:
        for g in range(n_gen):
            exp_part += [FeatureDescriptor(f, g, t, "", f, lab.format(o=g + 1))
                         for f, lab in GEN_FAMILIES if f in families]
        for b in range(n_bus):
            exp_part += [FeatureDescriptor(f, b, t, "p.u.", f, lab.format(o=b + 1))
                         for f, lab in BUS_FAMILIES if f in families]
    return FeatureSchema(raw_part + exp_part)


def expand_expert(raw, schema, families=EXPERT_FAMILIES, policy="flattened_window"):
    """Raw block(s) (T, F) or (n, T, F) -> ExpandedMatrix of [raw, expert] per sample.

    ``flattened_window`` keeps every step; ``final_snapshot`` keeps only the last.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown tree input policy {policy!r}")
    raw = np.asarray(raw, dtype=float)
    single = raw.ndim == 2
    if single:
        raw = raw[None]
    n_gen, n_bus, T = _layout(schema)
    if raw.shape[1:] != (T, len(schema) // T):
        raise SchemaMismatch(f"raw block {raw.shape[1:]} does not match schema ({T}, {len(schema) // T})")
    families = tuple(f for f in EXPERT_FAMILIES if f in families)
    exp = expert_terms(raw, n_gen, n_bus, families)
    if policy == "final_snapshot":
        raw, exp = raw[:, -1:], exp[:, -1:]
    n = raw.shape[0]
    values = np.concatenate([raw.reshape(n, -1), exp.reshape(n, -1)], axis=1)
    return ExpandedMatrix(values[0] if single else values, expanded_schema(schema, families, policy))


def expanded_width(n_gen, n_bus, T, raw_per_step):
    """Closed-form F_exp for the flattened window with every family enabled."""
    return raw_per_step * T + (2 * n_gen + 6 * n_bus) * T


def feature_name(index, schema):
    if not 0 <= index < len(schema):
        raise IndexOutOfRange(f"feature index {index} outside [0, {len(schema)})")
    return schema[index].name


def families_for_groups(groups):
    """Expand group names ("dq", "current", "load") into family tags."""
    out = []
    for g in groups:
        out += FAMILY_GROUPS[g]
    return tuple(f for f in EXPERT_FAMILIES if f in out)


# -- standardization ----------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray     # already floored

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float)
        if X.shape[0] == 0:
            raise ValueError("cannot fit a standardizer on an empty set")
        X2 = X.reshape(X.shape[0], -1)
        mean = X2.mean(axis=0)
        std = X2.std(axis=0)
        return cls(mean.reshape(X.shape[1:]), np.maximum(std, STD_FLOOR).reshape(X.shape[1:]))

    def apply(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def invert(self, Z):
        return np.asarray(Z, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.ravel().tolist(), "std": self.std.ravel().tolist(),
                "shape": list(self.mean.shape)}

    @classmethod
    def from_dict(cls, d):
        shape = tuple(d["shape"])
        return cls(np.array(d["mean"], dtype=float).reshape(shape), np.array(d["std"], dtype=float).reshape(shape))


def fit_standardizer(X):
    return Standardizer.fit(X)


def apply_standardizer(st, X):
    return st.apply(X)
