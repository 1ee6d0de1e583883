"""Two-machine three-bus equivalent grid: network solution, swing dynamics and
Monte-Carlo dataset generation.

Conventions
-----------
* Buses and generators are indexed from 0 internally and named from 1
  (``bus3`` is index 2).
* Angles are radians, speeds are rad/s internally, time is seconds, powers
  are per unit on ``base_mva``.
* Generators use the classical model: constant EMF ``E'`` behind ``X'd``.
* Loads follow the ZIP law ``P = P0 * (a V^2 + b V + c)``; below ``zip_vmin``
  the whole load is held at constant impedance so a bolted fault does not
  demand infinite current from the constant-power part.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import featurebase
from .errors import DegenerateDataset, NoConvergence, NumericalBlowup, SingularNetwork

FAULT_CONDUCTANCE = 1e6
MAX_FAULT_DURATION = 0.150
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Generator:
    bus: int
    H: float             # inertia constant, s
    D: float             # damping, p.u. power per rad/s
    xd_prime: float      # transient reactance, p.u.
    E: float             # internal EMF magnitude, p.u.
    P0: float = 0.0      # nominal mechanical power; ignored for the slack machine

    def __post_init__(self):
        if self.H <= 0:
            raise ValueError(f"H must be positive, got {self.H}")
        if self.xd_prime <= 0:
            raise ValueError(f"X'd must be positive, got {self.xd_prime}")


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    x: float

    def __post_init__(self):
        if self.x <= 0:
            raise ValueError(f"line reactance must be positive, got {self.x}")


def _check_zip(coeffs, name):
    if len(coeffs) != 3 or abs(sum(coeffs) - 1.0) > 1e-12:
        raise ValueError(f"{name} ZIP coefficients must be three numbers summing to 1, got {coeffs}")


@dataclass(frozen=True)
class SystemSpec:
    generators: tuple
    lines: tuple
    load_p: tuple          # nominal P_L0 per bus
    load_q: tuple          # nominal Q_L0 per bus
    zip_p: tuple = (1.0, 0.0, 0.0)
    zip_q: tuple = (1.0, 0.0, 0.0)
    zip_vmin: float = 0.5
    slack: int = 1
    f0: float = 50.0
    base_mva: float = 100.0

    def __post_init__(self):
        _check_zip(self.zip_p, "P")
        _check_zip(self.zip_q, "Q")
        if len(self.load_p) != len(self.load_q):
            raise ValueError("load_p and load_q must have one entry per bus")
        for g in self.generators:
            if not 0 <= g.bus < self.n_bus:
                raise ValueError(f"generator bus {g.bus} out of range")
        for ln in self.lines:
            if not (0 <= ln.from_bus < self.n_bus and 0 <= ln.to_bus < self.n_bus):
                raise ValueError(f"line {ln} references a missing bus")

    @property
    def n_bus(self):
        return len(self.load_p)

    @property
    def n_gen(self):
        return len(self.generators)

    @property
    def omega_s(self):
        return 2.0 * math.pi * self.f0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["generators"] = tuple(Generator(**g) for g in d["generators"])
        d["lines"] = tuple(Line(**ln) for ln in d["lines"])
        for key in ("load_p", "load_q", "zip_p", "zip_q"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def default_system():
    """Equivalent grid used for dataset generation.

    Gen1 (light, exporting) sits behind a weak corridor; Gen2 is the heavier
    slack machine.  The main load hangs on bus3 between them.
    """
    return SystemSpec(
        generators=(
            Generator(bus=0, H=1.5, D=0.005, xd_prime=0.20, E=1.10, P0=1.5),
            Generator(bus=1, H=8.0, D=0.005, xd_prime=0.15, E=1.05),
        ),
        lines=(Line(0, 2, 0.20), Line(1, 2, 0.15), Line(0, 1, 0.80)),
        load_p=(0.1, 0.3, 1.5),
        load_q=(0.02, 0.1, 0.3),
    )


@dataclass(frozen=True)
class ContingencySpec:
    fault_bus: int = 2
    t_fault: float = 0.1
    t_clear: float = 0.2          # math.inf for a fault that is never cleared
    trip_line: int | None = None  # index into SystemSpec.lines removed at clearing

    def __post_init__(self):
        if not 0.0 <= self.t_fault < self.t_clear:
            raise ValueError(f"need 0 <= t_fault < t_clear, got {self.t_fault}, {self.t_clear}")
        if math.isfinite(self.t_clear) and self.t_clear - self.t_fault > MAX_FAULT_DURATION + 1e-12:
            raise ValueError(f"fault duration {self.t_clear - self.t_fault:.4f} s exceeds {MAX_FAULT_DURATION} s")


@dataclass(frozen=True)
class Loading:
    pm_scale: float = 1.0    # multiplier on non-slack mechanical power
    load_scale: float = 1.0  # multiplier on every bus load


@dataclass
class Equilibrium:
    delta: np.ndarray       # rotor angles, rad
    pm: np.ndarray          # mechanical power per generator
    emf: np.ndarray         # complex internal EMFs
    voltage: np.ndarray     # complex bus voltages
    residual: float


@dataclass
class NetworkSolution:
    voltage: np.ndarray     # complex bus voltages
    gen_current: np.ndarray
    pe: np.ndarray          # electrical power per generator
    qg: np.ndarray          # reactive power at the generator terminal
    load: np.ndarray        # complex load power consumed per bus (ZIP law)
    iterations: int
    mismatch: float


@dataclass
class Trajectory:
    time: np.ndarray
    delta: np.ndarray       # (n, n_gen) rad
    speed_hz: np.ndarray    # (n, n_gen) speed deviation, Hz
    pm: np.ndarray
    pe: np.ndarray
    qg: np.ndarray
    v: np.ndarray           # (n, n_bus) magnitude
    theta: np.ndarray       # (n, n_bus) rad
    f_bus: np.ndarray       # (n, n_bus) frequency deviation, Hz
    pl: np.ndarray
    ql: np.ndarray
    dt: float

    def __len__(self):
        return len(self.time)


# -- network -----------------------------------------------------------------

def zip_factor(v, coeffs, vmin=0.0):
    """K(V) = a V^2 + b V + c, continued as constant impedance below ``vmin``."""
    a, b, c = coeffs
    v = np.asarray(v, dtype=float)
    vc = np.maximum(v, vmin)
    k = a * vc * vc + b * vc + c
    return np.where(v < vmin, k * (v / vmin) ** 2 if vmin > 0 else k, k)


def _is_impedance(sys):
    return tuple(sys.zip_p) == (1.0, 0.0, 0.0) and tuple(sys.zip_q) == (1.0, 0.0, 0.0)


def _check_connected(sys, tripped):
    adj = {b: set() for b in range(sys.n_bus)}
    for k, ln in enumerate(sys.lines):
        if k in tripped:
            continue
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    seen = set()
    stack = [g.bus for g in sys.generators]
    while stack:
        b = stack.pop()
        if b in seen:
            continue
        seen.add(b)
        stack.extend(adj[b] - seen)
    if len(seen) != sys.n_bus:
        missing = sorted(set(range(sys.n_bus)) - seen)
        raise SingularNetwork(f"buses {[m + 1 for m in missing]} are disconnected from every generator")


def network_matrix(sys, tripped=(), fault_bus=None):
    """Bus admittance including generator branches and any fault shunt, loads excluded."""
    Y = np.zeros((sys.n_bus, sys.n_bus), dtype=complex)
    for k, ln in enumerate(sys.lines):
        if k in tripped:
            continue
        y = 1.0 / (1j * ln.x)
        i, j = ln.from_bus, ln.to_bus
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    for g in sys.generators:
        Y[g.bus, g.bus] += 1.0 / (1j * g.xd_prime)
    if fault_bus is not None:
        Y[fault_bus, fault_bus] += FAULT_CONDUCTANCE
    return Y


def _source_current(sys, emf):
    inj = np.zeros(sys.n_bus, dtype=complex)
    for g, e in zip(sys.generators, emf):
        inj[g.bus] += e / (1j * g.xd_prime)
    return inj


def _load_power(sys, vmag, load_scale):
    p0 = load_scale * np.asarray(sys.load_p, dtype=float)
    q0 = load_scale * np.asarray(sys.load_q, dtype=float)
    return p0 * zip_factor(vmag, sys.zip_p, sys.zip_vmin) + 1j * q0 * zip_factor(vmag, sys.zip_q, sys.zip_vmin)


def _gen_quantities(sys, emf, voltage):
    xd = np.array([g.xd_prime for g in sys.generators])
    vt = voltage[[g.bus for g in sys.generators]]
    cur = (emf - vt) / (1j * xd)
    pe = (emf * np.conj(cur)).real
    qg = (vt * np.conj(cur)).imag
    return cur, pe, qg


def network_solve(sys, emf, *, tripped=(), fault_bus=None, load_scale=1.0,
                  v_start=None, tol=1e-8, max_iter=50):
    """Solve bus voltages for given internal EMFs (complex, one per generator).

    Loads are represented by the admittance ``conj(S(V)) / |V|^2`` evaluated at
    the previous iterate; iteration stops once the consumed power matches the ZIP
    law within ``tol``.  Pure constant-impedance loads need a single solve.
    """
    tripped = tuple(tripped)
    _check_connected(sys, tripped)
    Y0 = network_matrix(sys, tripped, fault_bus)
    src = _source_current(sys, np.asarray(emf, dtype=complex))
    p0 = load_scale * np.asarray(sys.load_p, dtype=float)
    q0 = load_scale * np.asarray(sys.load_q, dtype=float)

    if _is_impedance(sys):
        V = _solve(Y0 + np.diag(p0 - 1j * q0), src)
        S = _load_power(sys, np.abs(V), load_scale)
        cur, pe, qg = _gen_quantities(sys, emf, V)
        return NetworkSolution(V, cur, pe, qg, S, 1, 0.0)

    V = np.ones(sys.n_bus, dtype=complex) if v_start is None else np.asarray(v_start, dtype=complex)
    for it in range(1, max_iter + 1):
        vm = np.maximum(np.abs(V), 1e-12)
        y_load = np.conj(_load_power(sys, vm, load_scale)) / vm ** 2
        V = _solve(Y0 + np.diag(y_load), src)
        vm_new = np.abs(V)
        consumed = vm_new ** 2 * np.conj(y_load)
        law = _load_power(sys, vm_new, load_scale)
        mismatch = float(np.max(np.abs(consumed - law) / np.maximum(vm_new, 1.0)))
        mismatch = max(mismatch, float(np.max(np.abs(consumed - law))))
        if mismatch < tol:
            cur, pe, qg = _gen_quantities(sys, emf, V)
            return NetworkSolution(V, cur, pe, qg, law, it, mismatch)
    raise NoConvergence(f"ZIP load iteration did not converge in {max_iter} iterations (mismatch {mismatch:.3e})")


def _solve(Y, rhs):
    try:
        return np.linalg.solve(Y, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularNetwork(str(exc)) from exc


# -- equilibrium ----------------------------------------------------------------

def _emf(sys, delta):
    return np.array([g.E for g in sys.generators]) * np.exp(1j * np.asarray(delta, dtype=float))


def steady_state(sys, loading=Loading(), *, tol=1e-10, max_iter=50):
    """Pre-fault operating point.

    The slack machine's angle is the reference (0 rad); every other machine's
    angle is found by Newton iteration so that its electrical output equals its
    scheduled mechanical power.  The slack machine's mechanical power is then set
    to its electrical output.
    """
    n = sys.n_gen
    others = [k for k in range(n) if k != sys.slack]
    pm_target = np.array([sys.generators[k].P0 * loading.pm_scale for k in others])
    delta = np.zeros(n)
    net_tol = min(tol * 1e-2, 1e-12)

    def mismatch(d_others):
        d = delta.copy()
        d[others] = d_others
        sol = network_solve(sys, _emf(sys, d), load_scale=loading.load_scale, tol=net_tol)
        return sol.pe[others] - pm_target, sol

    x = np.zeros(len(others))
    for _ in range(max_iter):
        r, sol = mismatch(x)
        if np.max(np.abs(r)) < tol:
            d = delta.copy()
            d[others] = x
            pm = sol.pe.copy()
            pm[others] = pm_target
            return Equilibrium(d, pm, _emf(sys, d), sol.voltage, float(np.max(np.abs(r))))
        J = np.empty((len(others), len(others)))
        h = 1e-7
        for j in range(len(others)):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            J[:, j] = (mismatch(xp)[0] - mismatch(xm)[0]) / (2 * h)
        x = x - np.linalg.solve(J, r)
        if not np.all(np.abs(x) < math.pi):
            break
    raise NoConvergence("steady-state iteration failed; loading may be infeasible")


# -- dynamics -------------------------------------------------------------------

class _Network:
    """Per-topology network evaluator; caches the linear map E -> V for impedance loads."""

    def __init__(self, sys, load_scale):
        self.sys = sys
        self.load_scale = load_scale
        self.linear = _is_impedance(sys)
        self._maps = {}
        self._last_v = {}

    def solve(self, emf, tripped, fault_bus):
        key = (tripped, fault_bus)
        if not self.linear:
            sol = network_solve(self.sys, emf, tripped=tripped, fault_bus=fault_bus,
                                load_scale=self.load_scale, v_start=self._last_v.get(key))
            self._last_v[key] = sol.voltage
            return sol
        M = self._maps.get(key)
        if M is None:
            sys = self.sys
            _check_connected(sys, tripped)
            p0 = self.load_scale * np.asarray(sys.load_p, dtype=float)
            q0 = self.load_scale * np.asarray(sys.load_q, dtype=float)
            Y = network_matrix(sys, tripped, fault_bus) + np.diag(p0 - 1j * q0)
            B = np.zeros((sys.n_bus, sys.n_gen), dtype=complex)
            for k, g in enumerate(sys.generators):
                B[g.bus, k] = 1.0 / (1j * g.xd_prime)
            M = self._maps[key] = _solve(Y, B)
        V = M @ emf
        cur, pe, qg = _gen_quantities(self.sys, emf, V)
        return NetworkSolution(V, cur, pe, qg, None, 1, 0.0)


def _topology(contingency, t):
    """(tripped lines, faulted bus) active on the interval starting at ``t``."""
    if contingency is None or t < contingency.t_fault:
        return (), None
    if t < contingency.t_clear:
        return (), contingency.fault_bus
    tripped = () if contingency.trip_line is None else (contingency.trip_line,)
    return tripped, None


def simulate(sys, contingency=None, dt=0.005, horizon=3.0, *, loading=Loading(), initial=None):
    """Integrate the swing equations with fixed-step RK4 from the pre-fault equilibrium.

    Fault application and clearing instants that fall inside a step split that
    step so the switching is exact; the recorded grid stays uniform.
    """
    if not 0.0 < dt <= 0.02:
        raise ValueError(f"dt must lie in (0, 0.02], got {dt}")
    if contingency is not None and math.isfinite(contingency.t_clear) and horizon < contingency.t_clear + 1.0:
        raise ValueError("horizon must extend at least 1 s past fault clearing")

    eq = initial if initial is not None else steady_state(sys, loading)
    net = _Network(sys, loading.load_scale)
    H = np.array([g.H for g in sys.generators])
    D = np.array([g.D for g in sys.generators])
    E = np.array([g.E for g in sys.generators])
    pm = eq.pm.copy()
    ws = sys.omega_s

    def deriv(delta, w, topo):
        sol = net.solve(E * np.exp(1j * delta), *topo)
        return w, ws / (2.0 * H) * (pm - sol.pe - D * w)

    def rk4(delta, w, h, topo):
        k1d, k1w = deriv(delta, w, topo)
        k2d, k2w = deriv(delta + 0.5 * h * k1d, w + 0.5 * h * k1w, topo)
        k3d, k3w = deriv(delta + 0.5 * h * k2d, w + 0.5 * h * k2w, topo)
        k4d, k4w = deriv(delta + h * k3d, w + h * k3w, topo)
        return (delta + h / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d),
                w + h / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w))

    events = [] if contingency is None else [contingency.t_fault, contingency.t_clear]
    n_steps = int(round(horizon / dt))
    time = np.arange(n_steps + 1) * dt
    n_gen, n_bus = sys.n_gen, sys.n_bus
    out = {k: np.empty((n_steps + 1, n_gen)) for k in ("delta", "w", "pe", "qg")}
    out.update({k: np.empty((n_steps + 1, n_bus)) for k in ("v", "theta", "pl", "ql")})

    delta, w = eq.delta.astype(float).copy(), np.zeros(n_gen)
    for k in range(n_steps + 1):
        t = time[k]
        topo = _topology(contingency, t)
        sol = net.solve(E * np.exp(1j * delta), *topo)
        load = _load_power(sys, np.abs(sol.voltage), loading.load_scale)
        out["delta"][k], out["w"][k] = delta, w
        out["pe"][k], out["qg"][k] = sol.pe, sol.qg
        out["v"][k], out["theta"][k] = np.abs(sol.voltage), np.angle(sol.voltage)
        out["pl"][k], out["ql"][k] = load.real, load.imag
        if np.any(np.abs(delta) > 1e4):
            raise NumericalBlowup(f"rotor angle exceeded 1e4 rad at t={t:.3f} s")
        if k == n_steps:
            break
        t_next = time[k + 1]
        a = t
        for e in events:
            if a < e < t_next:
                delta, w = rk4(delta, w, e - a, _topology(contingency, a))
                a = e
        delta, w = rk4(delta, w, t_next - a, _topology(contingency, a))

    theta = np.unwrap(out["theta"], axis=0)
    f_bus = np.zeros_like(theta)
    f_bus[1:] = np.diff(theta, axis=0) / (2.0 * math.pi * dt)
    return Trajectory(
        time=time, delta=out["delta"], speed_hz=out["w"] / (2.0 * math.pi),
        pm=np.broadcast_to(pm, out["pe"].shape).copy(), pe=out["pe"], qg=out["qg"],
        v=out["v"], theta=theta, f_bus=f_bus, pl=out["pl"], ql=out["ql"], dt=dt,
    )


def max_angle_separation(traj, i=0, j=1):
    return float(np.max(np.abs(traj.delta[:, i] - traj.delta[:, j])))


def label_stability(traj, threshold=180.0):
    """1 (stable) unless the two rotor angles separate by more than ``threshold`` degrees."""
    return 0 if max_angle_separation(traj) > math.radians(threshold) else 1


def critical_clearing_time(sys, fault_bus, *, loading=Loading(), dt=0.001, horizon=3.0,
                           t_fault=0.0, lo=0.0, hi=MAX_FAULT_DURATION, tol=1e-4, threshold=180.0):
    """Bisection on the clearing delay between a stable ``lo`` and an unstable ``hi``."""
    eq = steady_state(sys, loading)

    def stable(duration):
        c = ContingencySpec(fault_bus=fault_bus, t_fault=t_fault, t_clear=t_fault + duration)
        tr = simulate(sys, c, dt, max(horizon, t_fault + duration + 1.0), loading=loading, initial=eq)
        return label_stability(tr, threshold) == 1

    lo = max(lo, 1e-6)
    if not stable(lo) or stable(hi):
        raise ValueError("bisection interval does not bracket the critical clearing time")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if stable(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- Monte-Carlo datasets ----------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloSpec:
    pm_range: tuple = (0.6, 1.4)
    load_range: tuple = (0.7, 1.3)
    duration_range: tuple = (0.05, 0.15)
    fault_bus: int = 2
    t_fault: float = 0.1
    trip_line: int | None = None
    dt: float = 0.005
    horizon: float = 3.0
    threshold: float = 180.0
    window_steps: int = 10
    window_spacing: float = 0.02

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("pm_range", "load_range", "duration_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Dataset:
    features: np.ndarray      # (n, T, F) physical units, angles in rad
    labels: np.ndarray        # (n,) int, 1 = stable
    indices: np.ndarray
    provenance: list
    schema: featurebase.FeatureSchema
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, rows):
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.labels[rows], self.indices[rows],
                       [self.provenance[r] for r in rows], self.schema, dict(self.meta))

    def split(self, ratio=(3, 1)):
        """Contiguous train/test split by index; draws are i.i.d. so order carries no bias."""
        n_train = int(round(len(self) * ratio[0] / sum(ratio)))
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))


def observation_window(traj, t_clear, steps=10, spacing=0.02):
    """Grid indices of ``steps`` snapshots ``spacing`` apart, starting at the first grid point at or after clearing."""
    stride = int(round(spacing / traj.dt))
    if stride < 1 or abs(stride * traj.dt - spacing) > 1e-9:
        raise ValueError(f"window spacing {spacing} is not a multiple of dt {traj.dt}")
    start = int(math.ceil(t_clear / traj.dt - 1e-9))
    idx = start + stride * np.arange(steps)
    if idx[-1] >= len(traj):
        raise ValueError("observation window runs past the simulation horizon")
    return idx


def draw_sample(sys, mc, seed, index):
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    pm_scale = float(rng.uniform(*mc.pm_range))
    load_scale = float(rng.uniform(*mc.load_range))
    duration = float(rng.uniform(*mc.duration_range))
    contingency = ContingencySpec(mc.fault_bus, mc.t_fault, mc.t_fault + duration, mc.trip_line)
    loading = Loading(pm_scale, load_scale)
    traj = simulate(sys, contingency, mc.dt, mc.horizon, loading=loading)
    label = label_stability(traj, mc.threshold)
    window = observation_window(traj, contingency.t_clear, mc.window_steps, mc.window_spacing)
    feats = featurebase.raw_features(traj, window)
    prov = {"seed": seed, "index": index, "pm_scale": pm_scale, "load_scale": load_scale,
            "t_fault": contingency.t_fault, "t_clear": contingency.t_clear,
            "fault_bus": contingency.fault_bus, "trip_line": contingency.trip_line}
    return feats, label, prov


def _draw_chunk(args):
    sys_d, mc_d, seed, idx = args
    sys, mc = SystemSpec.from_dict(sys_d), MonteCarloSpec.from_dict(mc_d)
    return [draw_sample(sys, mc, seed, i) for i in idx]


def generate_dataset(sys, mc, n, seed, *, jobs=1):
    """Draw ``n`` labelled samples; sample ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if jobs > 1:
        chunks = np.array_split(np.arange(n), jobs * 4)
        args = [(sys.to_dict(), mc.to_dict(), seed, c.tolist()) for c in chunks if len(c)]
        with ProcessPoolExecutor(jobs) as pool:
            results = [r for part in pool.map(_draw_chunk, args) for r in part]
    else:
        results = [draw_sample(sys, mc, seed, i) for i in range(n)]
    feats = np.stack([r[0] for r in results])
    labels = np.array([r[1] for r in results], dtype=np.int64)
    prov = [r[2] for r in results]
    stable = float(labels.mean())
    if stable in (0.0, 1.0):
        warnings.warn(f"all {n} samples share label {int(stable)}", DegenerateDataset, stacklevel=2)
    schema = featurebase.raw_schema(sys.n_gen, sys.n_bus, mc.window_steps)
    meta = {"seed": seed, "n": n, "stable_fraction": stable,
            "system": sys.to_dict(), "monte_carlo": mc.to_dict()}
    return Dataset(feats, labels, np.arange(n, dtype=np.int64), prov, schema, meta)


# -- dataset files --------------------------------------------------------------

def save_dataset(ds, directory):
    """Write ``schema.json``, ``records.bin`` and ``provenance.jsonl`` under ``directory``.

    Each record is ``<int64 index><int64 label><T*F float64>``, little-endian.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, T, F = ds.features.shape
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "n": n, "T": T, "F": F,
        "record_layout": "int64 index, int64 label, T*F float64 row-major, little-endian",
        "features": ds.schema.to_list(),
        "standardization": {"mean": None, "std": None},
        **ds.meta,
    }
    (d / "schema.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    with open(d / "records.bin", "wb") as fh:
        for i in range(n):
            fh.write(struct.pack("<qq", int(ds.indices[i]), int(ds.labels[i])))
            fh.write(np.ascontiguousarray(ds.features[i], dtype="<f8").tobytes())
    with open(d / "provenance.jsonl", "w") as fh:
        for p in ds.provenance:
            fh.write(json.dumps(p, sort_keys=True) + "\n")


def load_dataset(directory):
    d = Path(directory)
    doc = json.loads((d / "schema.json").read_text())
    n, T, F = doc["n"], doc["T"], doc["F"]
    rec = np.dtype([("index", "<i8"), ("label", "<i8"), ("x", "<f8", (T, F))])
    raw = np.fromfile(d / "records.bin", dtype=rec)
    if len(raw) != n:
        raise ValueError(f"records.bin holds {len(raw)} records, schema says {n}")
    prov = [json.loads(line) for line in (d / "provenance.jsonl").read_text().splitlines()]
    schema = featurebase.FeatureSchema.from_list(doc["features"])
    meta = {k: doc[k] for k in ("seed", "n", "stable_fraction", "system", "monte_carlo") if k in doc}
    return Dataset(np.array(raw["x"], dtype=np.float64), np.array(raw["label"]),
                   np.array(raw["index"]), prov, schema, meta)
