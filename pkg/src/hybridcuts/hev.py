"""Power-split hybrid electric vehicle: surrogate powertrain, linearized MPC and closed loop.

State x = (SOC, mdot_f), control y = (V, w_eng, T_eng), indicator z = (z_on, z_off)
with exactly one mode active. Disturbances are the speed reference V_r and the
driver torque demand T_d.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .bnb import SolveConfig, solve_miqp
from .model import HcpInstance

SOC, MDOT = 0, 1
V, W_ENG, T_ENG = 0, 1, 2


class HevDomainError(ValueError):
    pass


class InfeasiblePowerError(ValueError):
    """Battery power beyond what the open-circuit voltage can deliver."""


class LinearizationSingularError(ValueError):
    pass


@dataclass(frozen=True)
class HevParams:
    # planetary gear and driveline
    N_S: float = 30.0
    N_R: float = 78.0
    T_b: float = 0.0
    g_f: float = 3.268
    r_w: float = 0.32
    C_batt_Ah: float = 24.7
    SOC_ref: float = 0.55
    # bounds
    soc_min: float = 0.05
    soc_max: float = 0.55
    mf_min: float = 0.0
    mf_max: float = 45.45
    v_min: float = 0.0
    v_max: float = 35.486
    w_min: float = 80.0
    w_max: float = 600.0
    t_min: float = 0.0
    t_max: float = 168.0
    # costs
    q1: float = 5500.0
    q2: float = 10.0
    r1: float = 1.0
    r2: float = 0.0
    r3: float = 0.0
    s: float = 1000.0
    gamma: float = 0.0
    Ts: float = 1.0
    horizon: int = 20
    duration: float = 100.0
    # back-off applied to the SOC box inside the controller only
    soc_margin: float = 0.005
    # surrogate coefficients
    mf_c0: float = 0.0
    mf_c1: float = 5e-8
    mf_c2: float = 1e-9
    mf_c3: float = 1e-8
    eta_mot: float = 0.9
    eta_gen: float = 0.9
    voc0: float = 40.0
    voc1: float = 20.0
    rdc0: float = 0.004
    rdc1: float = -0.002
    rc0: float = 0.003
    rc1: float = -0.001
    # engine expansion point used when the engine was off
    w_nominal: float = 300.0
    t_nominal: float = 80.0

    def __post_init__(self):
        for lo, hi in (("soc_min", "soc_max"), ("mf_min", "mf_max"), ("v_min", "v_max"),
                       ("w_min", "w_max"), ("t_min", "t_max")):
            if getattr(self, lo) > getattr(self, hi):
                raise ValueError(f"{lo} exceeds {hi}")
        for name in ("N_S", "N_R", "g_f", "r_w", "C_batt_Ah", "Ts", "eta_mot", "eta_gen", "voc0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def C_batt(self) -> float:
        """Capacity in ampere-seconds."""
        return self.C_batt_Ah * 3600.0

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.Ts))

    @property
    def k_mot(self) -> float:
        return self.g_f / self.r_w


@dataclass
class HevState:
    soc: float
    mdot_f: float

    def array(self) -> np.ndarray:
        return np.array([self.soc, self.mdot_f])


@dataclass(frozen=True)
class Surrogates:
    mf: float
    mot: float
    gen: float
    voc: float
    r_dc: float
    r_c: float
    d_mf: tuple
    d_mot: tuple
    d_gen: tuple
    d_voc: float
    d_r_dc: float
    d_r_c: float


def surrogate_maps(w_eng, t_eng, w_mot, t_mot, w_gen, t_gen, soc, params: HevParams) -> Surrogates:
    """Polynomial stand-ins for the empirical powertrain maps, with analytic gradients.

    Fuel rate c0 + c1 w T + c2 w^2 + c3 T^2; machine power w T / eta; open-circuit
    voltage and both resistances affine in SOC.
    """
    p = params
    checks = (("w_eng", w_eng, 0.0, p.w_max), ("T_eng", t_eng, 0.0, p.t_max), ("SOC", soc, 0.0, 1.0))
    for name, val, lo, hi in checks:
        if not (np.isfinite(val) and lo - 1e-9 <= val <= hi + 1e-9):
            raise HevDomainError(f"{name}={val} outside [{lo}, {hi}]")
    for name, val in (("w_mot", w_mot), ("T_mot", t_mot), ("w_gen", w_gen), ("T_gen", t_gen)):
        if not np.isfinite(val):
            raise HevDomainError(f"{name} is not finite")
    mf = p.mf_c0 + p.mf_c1 * w_eng * t_eng + p.mf_c2 * w_eng ** 2 + p.mf_c3 * t_eng ** 2
    d_mf = (p.mf_c1 * t_eng + 2 * p.mf_c2 * w_eng, p.mf_c1 * w_eng + 2 * p.mf_c3 * t_eng)
    return Surrogates(
        mf=mf,
        mot=w_mot * t_mot / p.eta_mot,
        gen=w_gen * t_gen / p.eta_gen,
        voc=p.voc0 + p.voc1 * soc,
        r_dc=p.rdc0 + p.rdc1 * soc,
        r_c=p.rc0 + p.rc1 * soc,
        d_mf=d_mf,
        d_mot=(t_mot / p.eta_mot, w_mot / p.eta_mot),
        d_gen=(t_gen / p.eta_gen, w_gen / p.eta_gen),
        d_voc=p.voc1, d_r_dc=p.rdc1, d_r_c=p.rc1,
    )


@dataclass(frozen=True)
class PlantEval:
    """Every intermediate quantity of one plant step, plus partials of I."""
    w_mot: float
    w_gen: float
    t_mot: float
    t_gen: float
    p_batt: float
    voc: float
    r_batt: float
    current: float
    mdot_next: float
    soc_next: float
    dI_dP: float
    dI_dVoc: float
    dI_dR: float
    dR_dsoc: float
    dP: tuple  # partials of P_batt wrt (V, w_eng, T_eng, T_d)
    d_mf: tuple


def evaluate(soc, mdot, v, w, t, t_d, params: HevParams, need_partials=False) -> PlantEval:
    p = params
    w_mot = p.k_mot * v
    a_gen = (p.N_S + p.N_R) / p.N_S
    b_gen = p.N_R / p.N_S
    w_gen = a_gen * w - b_gen * w_mot
    share = p.N_S / (p.N_S + p.N_R)
    ring = p.N_R / (p.N_S + p.N_R)
    t_gen = -share * t
    t_mot = (t_d - p.T_b) / p.g_f - ring * t
    sm = surrogate_maps(w, t, w_mot, t_mot, w_gen, t_gen, soc, p)
    p_batt = sm.mot + sm.gen
    r_batt, dR = (sm.r_dc, sm.d_r_dc) if p_batt >= 0 else (sm.r_c, sm.d_r_c)
    disc = sm.voc ** 2 - 4.0 * r_batt * p_batt
    if disc < 0:
        raise InfeasiblePowerError(f"battery power {p_batt:.6g} W exceeds the deliverable limit")
    root = math.sqrt(disc)
    current = (sm.voc - root) / (2.0 * r_batt)
    soc_next = soc - p.Ts / p.C_batt * current
    mdot_next = p.gamma * mdot + sm.mf
    dI_dP = dI_dVoc = dI_dR = np.nan
    dP = (np.nan,) * 4
    if need_partials:
        if disc <= 1e-9:
            raise LinearizationSingularError("battery discriminant too close to zero")
        dI_dP = 1.0 / root
        dI_dVoc = (1.0 - sm.voc / root) / (2.0 * r_batt)
        dI_dR = p_batt / (r_batt * root) - current / r_batt
        dmot_dw, dmot_dt = sm.d_mot
        dgen_dw, dgen_dt = sm.d_gen
        dP = (dmot_dw * p.k_mot - dgen_dw * b_gen * p.k_mot,
              dgen_dw * a_gen,
              -dmot_dt * ring - dgen_dt * share,
              dmot_dt / p.g_f)
    return PlantEval(w_mot, w_gen, t_mot, t_gen, p_batt, sm.voc, r_batt, current, mdot_next, soc_next,
                     dI_dP, dI_dVoc, dI_dR, dR, dP, sm.d_mf)


def plant_step(state: HevState, control, z_eng: int, disturbance, params: HevParams) -> HevState:
    """Advance the nonlinear surrogate plant by one sampling period."""
    v, w, t = (float(c) for c in control)
    if not z_eng:
        if abs(w) > 1e-7 or abs(t) > 1e-7:
            raise HevDomainError("engine speed and torque must be zero with the engine off")
        w = t = 0.0
    ev = evaluate(state.soc, state.mdot_f, v, w, t, float(disturbance[1]), params)
    return HevState(ev.soc_next, ev.mdot_next)


@dataclass(frozen=True)
class OperatingPoint:
    state: HevState
    v: float
    engine_on: bool
    w_eng: float = 0.0
    t_eng: float = 0.0


@dataclass(frozen=True)
class LinearPeriod:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray  # columns (engine on, engine off)
    f: np.ndarray
    gTd: float  # SOC sensitivity to T_d, used to shift f across the horizon


def linearize(op: OperatingPoint, params: HevParams, t_d0: float, t_d: float | None = None) -> LinearPeriod:
    """First-order model of one period around ``op``.

    Partials in SOC, V and T_d are taken on the branch of the current engine
    mode; the engine-on branch is expanded around the previous engine control,
    or the nominal one when the engine was off. Mode-specific constants sit in
    C, so the map is exact at both expansion points.
    """
    p = params
    soc0, mf0, v0 = op.state.soc, op.state.mdot_f, op.v
    if op.engine_on:
        w_e, t_e = op.w_eng, op.t_eng
    else:
        w_e, t_e = p.w_nominal, p.t_nominal
    on = evaluate(soc0, mf0, v0, w_e, t_e, t_d0, p, need_partials=True)
    off = evaluate(soc0, mf0, v0, 0.0, 0.0, t_d0, p, need_partials=True)
    cur = on if op.engine_on else off
    gS = cur.dI_dVoc * p.voc1 + cur.dI_dR * cur.dR_dsoc
    gV = cur.dI_dP * cur.dP[0]
    gTd = cur.dI_dP * cur.dP[3]
    gw = on.dI_dP * on.dP[1]
    gT = on.dI_dP * on.dP[2]
    k = p.Ts / p.C_batt
    A = np.array([[1.0 - k * gS, 0.0], [0.0, p.gamma]])
    B = np.array([[-k * gV, -k * gw, -k * gT], [0.0, on.d_mf[0], on.d_mf[1]]])
    c_on = on.current - gw * w_e - gT * t_e - gS * soc0 - gV * v0
    c_off = off.current - gS * soc0 - gV * v0
    mf_on = (on.mdot_next - p.gamma * mf0) - on.d_mf[0] * w_e - on.d_mf[1] * t_e
    C = np.array([[-k * c_on, -k * c_off], [mf_on, 0.0]])
    dtd = 0.0 if t_d is None else (t_d - t_d0)
    f = np.array([-k * gTd * dtd, 0.0])
    return LinearPeriod(A, B, C, f, gTd)


def build_hev_hcp(params: HevParams, op: OperatingPoint, v_ref, t_d, horizon: int | None = None) -> HcpInstance:
    """Linearized MPC problem over the horizon, starting from the measured state."""
    p = params
    n = horizon or p.horizon
    v_ref = np.asarray(v_ref, float)
    t_d = np.asarray(t_d, float)
    if len(v_ref) < n or len(t_d) < n:
        raise ValueError(f"forecast shorter than the horizon {n}")
    base = linearize(op, p, t_d[0])
    k = p.Ts / p.C_batt
    f = [np.array([-k * base.gTd * (t_d[t] - t_d[0]), 0.0]) for t in range(n)]
    Q = np.diag([p.q1, p.q2])
    R = np.diag([p.r1, p.r2, p.r3])
    S = np.diag([p.s, 0.0])
    G = np.array([[p.v_min, p.v_min], [p.w_min, 0.0], [p.t_min, 0.0]])
    H = np.array([[p.v_max, p.v_max], [p.w_max, 0.0], [p.t_max, 0.0]])
    x0 = op.state.array()
    lo = np.array([p.soc_min + p.soc_margin, p.mf_min])
    hi = np.array([p.soc_max - p.soc_margin, p.mf_max])
    lo1, hi1 = np.minimum(lo, x0), np.maximum(hi, x0)
    lin_x = [np.array([-2.0 * p.q1 * p.SOC_ref, 0.0])] * (n + 1)
    lin_y = [np.array([-2.0 * p.r1 * v_ref[t], 0.0, 0.0]) for t in range(n)]
    const = (n + 1) * p.q1 * p.SOC_ref ** 2 + p.r1 * float(np.sum(v_ref[:n] ** 2))
    return HcpInstance(
        n=n, dx=2, dy=3, dz=2, Q=[Q] * (n + 1), R=[R] * n, S=[S] * n, A=[base.A] * n, B=[base.B] * n,
        C=[base.C] * n, f=f, G=[G] * n, H=[H] * n, lb=[lo1] + [lo] * n, ub=[hi1] + [hi] * n,
        lin_x=lin_x, lin_y=lin_y, x_init=x0, mode_exactly_one=True, const=const,
    )


@dataclass(frozen=True)
class Profile:
    time_s: np.ndarray
    v_ref: np.ndarray
    t_d: np.ndarray

    def sample(self, times) -> tuple[np.ndarray, np.ndarray]:
        times = np.asarray(times, float)
        return np.interp(times, self.time_s, self.v_ref), np.interp(times, self.time_s, self.t_d)


def load_profile(path) -> Profile:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_profile(fh.read())


def parse_profile(text: str) -> Profile:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("profile has no rows")
    missing = {"time_s", "V_r", "T_d"} - set(rows[0])
    if missing:
        raise ValueError(f"profile missing columns {sorted(missing)}")
    arr = np.array([[float(r["time_s"]), float(r["V_r"]), float(r["T_d"])] for r in rows])
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise ValueError("profile times must be strictly increasing")
    return Profile(arr[:, 0], arr[:, 1], arr[:, 2])


def default_profile(duration: float = 130.0) -> Profile:
    """Deterministic drive cycle: launch, cruise, hill climb, braking and a second climb."""
    knots = np.array([
        # time, V_r, T_d
        [0, 5, 300], [10, 12, 600], [25, 15, 500], [40, 18, 750], [55, 20, 800],
        [65, 12, -350], [75, 8, -200], [85, 14, 650], [100, 20, 850], [115, 22, 700],
        [130, 18, 400],
    ], dtype=float)
    t = np.arange(0.0, duration + 1e-9, 1.0)
    return Profile(t, np.interp(t, knots[:, 0], knots[:, 1]), np.interp(t, knots[:, 0], knots[:, 2]))


def profile_csv(profile: Profile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s", "V_r", "T_d"])
    for row in zip(profile.time_s, profile.v_ref, profile.t_d):
        w.writerow([f"{v:.6g}" for v in row])
    return buf.getvalue()


@dataclass
class TraceStep:
    time: float
    soc: float
    mdot_f: float
    V: float
    w_eng: float
    T_eng: float
    z_eng: int
    V_r: float
    T_d: float
    I: float
    P_batt: float
    V_oc: float
    R_batt: float
    w_gen: float
    w_mot: float
    T_gen: float
    T_mot: float
    variant: str
    status: str
    root_gap_pct: float
    nodes: int
    time_s: float
    objective: float
    fallback: bool = False


@dataclass
class MpcTrace:
    params: HevParams
    variant: str
    steps: list = field(default_factory=list)
    final_state: HevState | None = None

    def violations(self, tol: float = 1e-9) -> int:
        """Bound or gating violations over every applied step and the final state."""
        p = self.params
        bad = 0
        socs = [s.soc for s in self.steps] + ([self.final_state.soc] if self.final_state else [])
        mfs = [s.mdot_f for s in self.steps] + ([self.final_state.mdot_f] if self.final_state else [])
        bad += sum(not (p.soc_min - tol <= v <= p.soc_max + tol) for v in socs)
        bad += sum(not (p.mf_min - tol <= v <= p.mf_max + tol) for v in mfs)
        for s in self.steps:
            bad += not (p.v_min - tol <= s.V <= p.v_max + tol)
            if s.z_eng:
                bad += not (p.w_min - tol <= s.w_eng <= p.w_max + tol)
                bad += not (p.t_min - tol <= s.T_eng <= p.t_max + tol)
            else:
                bad += abs(s.w_eng) > 1e-7 or abs(s.T_eng) > 1e-7
        return int(bad)

    @property
    def total_nodes(self) -> int:
        return int(sum(s.nodes for s in self.steps))

    @property
    def mean_root_gap(self) -> float:
        gaps = [s.root_gap_pct for s in self.steps if np.isfinite(s.root_gap_pct)]
        return float(np.mean(gaps)) if gaps else float("nan")

    def to_csv(self) -> str:
        cols = [f.name for f in fields(TraceStep)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for s in self.steps:
            row = []
            for c in cols:
                v = getattr(s, c)
                if isinstance(v, str):
                    row.append(v)
                elif isinstance(v, (bool, np.bool_)):
                    row.append(int(v))
                elif isinstance(v, (int, np.integer)):
                    row.append(int(v))
                else:
                    row.append(f"{float(v):.6g}")
            w.writerow(row)
        return buf.getvalue()


def _extract_control(report, params: HevParams):
    z_on = int(round(report.z[0][0]))
    y = report.y[0]
    v = float(np.clip(y[V], params.v_min, params.v_max))
    if z_on:
        w = float(np.clip(y[W_ENG], params.w_min, params.w_max))
        t = float(np.clip(y[T_ENG], params.t_min, params.t_max))
    else:
        w = t = 0.0
    return v, w, t, z_on


def mpc_run(params: HevParams, profile: Profile, variant: str, config: SolveConfig | None = None,
            x0: HevState | None = None, v0: float | None = None, steps: int | None = None) -> MpcTrace:
    """Receding-horizon loop against the nonlinear surrogate plant."""
    p = params
    config = replace(config or SolveConfig(time_limit=60.0), variant=variant)
    state = x0 or HevState(0.3, 0.0)
    steps = p.steps if steps is None else steps
    end = (steps + p.horizon) * p.Ts
    if profile.time_s[-1] < end - p.Ts - 1e-9:
        raise ValueError(f"profile must span {end - p.Ts:g} s, ends at {profile.time_s[-1]:g} s")
    prev_v = float(profile.sample([0.0])[0][0]) if v0 is None else v0
    prev_on, prev_w, prev_t = False, 0.0, 0.0
    trace = MpcTrace(p, variant)
    for k in range(steps):
        now = k * p.Ts
        times = now + p.Ts * np.arange(p.horizon)
        v_ref, t_d = profile.sample(times)
        op = OperatingPoint(state, prev_v, prev_on, prev_w, prev_t)
        status, gap, nodes, solve_time, obj = "error", np.nan, 0, 0.0, np.nan
        control = None
        try:
            inst = build_hev_hcp(p, op, v_ref, t_d)
            rep = solve_miqp(inst, config)
            status, gap, nodes, solve_time, obj = (rep.status, rep.root_gap_pct, rep.nodes, rep.time_s,
                                                   rep.incumbent)
            if rep.z is not None:
                control = _extract_control(rep, p)
        except (LinearizationSingularError, InfeasiblePowerError, HevDomainError, ValueError) as exc:
            status = f"error:{type(exc).__name__}"
        fallback = control is None
        if fallback:
            control = (float(np.clip(prev_v, p.v_min, p.v_max)), 0.0, 0.0, 0)
        v, w, t, z_on = control
        ev = evaluate(state.soc, state.mdot_f, v, w, t, t_d[0], p)
        trace.steps.append(TraceStep(
            time=now, soc=state.soc, mdot_f=state.mdot_f, V=v, w_eng=w, T_eng=t, z_eng=z_on,
            V_r=v_ref[0], T_d=t_d[0], I=ev.current, P_batt=ev.p_batt, V_oc=ev.voc, R_batt=ev.r_batt,
            w_gen=ev.w_gen, w_mot=ev.w_mot, T_gen=ev.t_gen, T_mot=ev.t_mot, variant=variant,
            status=status, root_gap_pct=gap, nodes=nodes, time_s=solve_time, objective=obj,
            fallback=fallback,
        ))
        state = HevState(ev.soc_next, ev.mdot_next)
        prev_v, prev_on, prev_w, prev_t = v, bool(z_on), w, t
    trace.final_state = state
    return trace


def params_to_dict(p: HevParams) -> dict:
    return asdict(p)


def params_from_dict(d: dict) -> HevParams:
    known = {f.name for f in fields(HevParams)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown HEV parameter(s) {sorted(unknown)}")
    return HevParams(**d)
