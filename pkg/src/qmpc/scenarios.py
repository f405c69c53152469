"""The numerical experiments: plants, models, controllers and their comparison.

Each scenario takes a flat parameter dict (defaults in :data:`DEFAULTS`) and
returns a :class:`ScenarioResult` holding trajectory records, tables and a
JSON-ready summary. Frequencies and rates are in rad/ns, times in ns.
Amplitude bounds given ``*_over_2pi`` are multiplied by 2 pi.
"""
from __future__ import annotations

import copy
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import baselines, qcore
from .dynamics import Liouvillian, block_diagonal_model, build_liouvillian, discretize_first_order
from .mpc import (
    MPCConfig,
    ReferenceTrajectory,
    SQPConfig,
    TrajectoryRecord,
    open_loop_record,
    reduced_feedback_adapter,
    run_closed_loop,
    subspace_feedback_adapter,
)
from .qcore import QuantumState, sigma_x, sigma_y, sigma_z

TWO_PI = 2.0 * np.pi

_QUBIT = {
    "delta_plant": -0.2,
    "delta_model": 0.0,
    "dt": 0.2,
    "horizon": 50,
    "feedback_period": 7,  # 1.4 ns between measurements / 0.2 ns MPC step
    "duration_ns": 15.0,
    "eval_time_ns": 12.5,
    "u_max_over_2pi": 0.1,
    "du_max_over_2pi": 0.04,
    "slew_interior": True,
    "R": 1e-2,
    "q_population": 1.0,
    "q_coherence": 1.0,  # full-state weight: stage cost equals 2(1 - F) on pure states
    "sqp_mode": "full_at_feedback",
    "sqp_max_iters": 30,
    "initial_u_guess": 0.1,
    "pi_pulse_duration_ns": 10.0,
    "threshold": 1e-2,
}

_LADDER = {
    "alpha": -0.6,
    "levels": 3,
    "dt": 0.4,
    "horizon": 10,
    "feedback_period": 1,
    "duration_ns": 10.0,
    "u_max": 0.75,
    "du_max": 0.2,
    "R": 1.0,
    "q_population": 1.0,
    "q_coherence": 0.0,
    "drag_scale": 0.6,
    "sqp_mode": "warm",
    "sqp_max_iters": 30,
    "initial_u_guess": 0.1,
    "threshold": 1e-2,
}

DEFAULTS: dict[str, dict] = {
    "qubit_detuning": dict(_QUBIT),
    "transmon_drag": dict(_LADDER, cases="bd"),
    "drag_ladder": dict(_LADDER, cases="abcde"),
    "crosstalk": {
        "xi": 0.5,
        "dt": 0.6,
        "horizon": 10,
        "feedback_period": 1,
        "duration_ns": 25.0,
        "u_max_over_2pi": 0.1,
        "du_max_over_2pi": 0.04,
        "slew_interior": True,
        "R": 1e-2,
        "q_population": 1.0,
    "q_coherence": 0.0,
        "sqp_mode": "full_at_feedback",
        "sqp_max_iters": 30,
        "initial_u_guess": 0.1,
        "pi_pulse_duration_ns": None,  # None: shortest pulse inside the bounds
        "threshold": 1e-2,
    },
    "nm_comparison": {
        "delta_plant": 0.0,
        "delta_model_min": -0.36,
        "delta_model_max": 0.36,
        "n_models": 11,
        "dt": 1.0,
        "n_params": 10,
        "horizon": 5,
        "feedback_period": 1,
        "mpc_steps": 10,
        "u_max_over_2pi": 0.1,
        "du_max_over_2pi": 0.05,
        "slew_interior": True,
        "R": 1e-2,
        "q_population": 1.0,
    "q_coherence": 1.0,
        "sqp_mode": "warm",
        "sqp_max_iters": 30,
        "initial_u_guess": 0.1,
        "nm_max_evals": 60,
        "n_random": 10,
        "seed": 0,
        "threshold": 1e-2,
    },
    "feedback_sweep": dict(
        _QUBIT,
        delta_min=-0.5,
        delta_max=0.5,
        n_delta=11,
        period_min=1,
        period_max=8,
        jobs=1,
    ),
}

SCENARIOS = tuple(DEFAULTS)


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------

@dataclass
class Table:
    columns: list
    rows: list

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])


@dataclass
class ScenarioResult:
    name: str
    params: dict
    records: dict = field(default_factory=dict)  # label -> TrajectoryRecord
    tables: dict = field(default_factory=dict)  # label -> Table
    summary: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def resolve_params(name: str, overrides: dict | None = None) -> dict:
    """Defaults of ``name`` updated with ``overrides``; unknown keys are errors."""
    if name not in DEFAULTS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    params = copy.deepcopy(DEFAULTS[name])
    for key, val in (overrides or {}).items():
        if key not in params:
            raise KeyError(f"unknown parameter {key!r} for scenario {name!r}")
        default = DEFAULTS[name][key]
        params[key] = _coerce(key, val, default)
    _check(name, params)
    return params


NULLABLE = {"pi_pulse_duration_ns"}  # None selects the shortest feasible pulse


def _coerce(key, val, default):
    if val is None and key in NULLABLE:
        return None
    if default is None:
        return None if val is None else float(val)
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise TypeError(f"{key} must be a boolean, got {val!r}")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, (int, np.integer)) and not (
                isinstance(val, float) and val.is_integer()):
            raise TypeError(f"{key} must be an integer, got {val!r}")
        return int(val)
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float, np.number)):
            raise TypeError(f"{key} must be a number, got {val!r}")
        return float(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise TypeError(f"{key} must be a string, got {val!r}")
        return val
    return val


def _check(name: str, p: dict) -> None:
    def positive(*keys):
        for k in keys:
            if p[k] <= 0:
                raise ValueError(f"{k} must be positive, got {p[k]}")

    positive("dt", "horizon", "feedback_period", "threshold", "R")
    if "duration_ns" in p:
        positive("duration_ns")
    if "sqp_mode" in p and p["sqp_mode"] not in ("warm", "full_at_feedback", "full"):
        raise ValueError(f"sqp_mode must be warm, full_at_feedback or full, got {p['sqp_mode']!r}")
    if "cases" in p and (not p["cases"] or set(p["cases"]) - set("abcde")):
        raise ValueError("cases must be a non-empty subset of 'abcde'")
    if "levels" in p and p["levels"] < 3:
        raise ValueError("levels must be at least 3")
    if name == "feedback_sweep":
        positive("n_delta", "period_min", "jobs")
        if p["period_max"] < p["period_min"] or p["delta_max"] < p["delta_min"]:
            raise ValueError("sweep ranges must be ordered")
    if name == "nm_comparison":
        positive("n_models", "n_params", "mpc_steps", "nm_max_evals", "n_random")
    if "eval_time_ns" in p and not 0 <= p["eval_time_ns"] <= p.get("duration_ns", np.inf):
        raise ValueError("eval_time_ns must lie within the run duration")
    _ = control_bounds(p)


def control_bounds(p: dict) -> tuple[float, float]:
    """Amplitude and slew bounds of a parameter set, in rad/ns."""
    if "u_max_over_2pi" in p:
        u_max, du_max = TWO_PI * p["u_max_over_2pi"], TWO_PI * p["du_max_over_2pi"]
    else:
        u_max, du_max = p["u_max"], p["du_max"]
    if u_max <= 0 or du_max <= 0:
        raise ValueError("amplitude and slew bounds must be positive")
    return u_max, du_max


# ---------------------------------------------------------------------------
# Physical systems
# ---------------------------------------------------------------------------

def qubit_liouvillian(delta: float, axis: str = "x") -> Liouvillian:
    """``H = (delta/2) sigma_z + (u/2) sigma_axis``."""
    ctrl = {"x": sigma_x, "y": sigma_y}[axis]
    return build_liouvillian(0.5 * delta * sigma_z, [0.5 * ctrl])


def transmon_liouvillian(alpha: float, levels: int = 3) -> Liouvillian:
    """``H = alpha |2><2| + (u_x/2)(a + a^+) + (i u_y/2)(a - a^+)``."""
    a = qcore.lowering(levels)
    ad = qcore.dag(a)
    return build_liouvillian(alpha * qcore.projector(levels, 2, 2), [0.5 * (a + ad), 0.5j * (a - ad)])


def crosstalk_liouvillian(xi: float) -> Liouvillian:
    """``H = (xi/2) Z x Z + (u_A/2) X x 1 + (u_B/2) 1 x Y``."""
    eye = np.eye(2)
    return build_liouvillian(
        0.5 * xi * np.kron(sigma_z, sigma_z), [0.5 * np.kron(sigma_x, eye), 0.5 * np.kron(eye, sigma_y)]
    )


def population_weight(dim: int, weight: float = 1.0, blocks: int = 1,
                      coherence: float = 0.0) -> np.ndarray:
    """Diagonal Q for ``blocks`` stacked ``dim``-level states.

    ``weight`` applies to the populations Re(rho_jj), ``coherence`` to every
    other embedded component.
    """
    n = 2 * dim * dim
    d = np.full(n, float(coherence))
    d[qcore.population_indices(dim)] = weight
    return np.diag(np.tile(d, blocks))


def _mpc_config(p: dict, Q: np.ndarray, m: int, feedback_period: int | None = None) -> MPCConfig:
    u_max, du_max = control_bounds(p)
    return MPCConfig(
        horizon=int(p["horizon"]), dt=p["dt"], Q=Q, R=p["R"] * np.eye(m),
        u_min=-u_max, u_max=u_max, du_max=du_max, slew_interior=p.get("slew_interior", True),
        feedback_period=int(p["feedback_period"] if feedback_period is None else feedback_period),
        sqp=SQPConfig(max_iters=int(p["sqp_max_iters"])),
    )


def _steps(duration: float, dt: float) -> int:
    return int(round(duration / dt))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def settling_time(times, infidelity, threshold: float) -> float | None:
    """First time after which the infidelity stays below ``threshold``; None if never."""
    infidelity = np.asarray(infidelity)
    bad = np.flatnonzero(infidelity >= threshold)
    if not bad.size:
        return float(times[0])
    if bad[-1] + 1 >= len(times):
        return None
    return float(times[bad[-1] + 1])


def constraint_violations(U, u_max, du_max, u_prev=0.0, tol: float = 1e-6) -> int:
    """Number of samples violating the amplitude or slew bound by more than ``tol``."""
    U = np.asarray(U, dtype=float)
    if U.size == 0:
        return 0
    U = U.reshape(len(U), -1)
    amp = np.abs(U) > np.asarray(u_max) + tol
    d = np.diff(np.vstack([np.broadcast_to(u_prev, (1, U.shape[1])), U]), axis=0)
    slew = np.abs(d) > np.asarray(du_max) + tol
    return int(amp.sum() + slew.sum())


def record_summary(rec: TrajectoryRecord, threshold: float, u_max, du_max,
                   eval_time: float | None = None) -> dict:
    out = {
        "final_infidelity": rec.final_infidelity,
        "final_fidelity": 1.0 - rec.final_infidelity,
        "settling_time_ns": settling_time(rec.times, rec.infidelity, threshold),
        "threshold": threshold,
        "constraint_violations": constraint_violations(rec.controls, u_max, du_max),
        "feedback_count": int(np.sum(rec.feedback)),
    }
    if eval_time is not None:
        out["eval_time_ns"] = eval_time
        out["infidelity_at_eval"] = rec.infidelity_at(eval_time)
    return out


def _pad(U: np.ndarray, steps: int) -> np.ndarray:
    U = np.asarray(U, dtype=float).reshape(len(U), -1)
    if len(U) > steps:
        raise ValueError(f"pulse of {len(U)} steps exceeds the run of {steps} steps")
    return np.vstack([U, np.zeros((steps - len(U), U.shape[1]))])


# ---------------------------------------------------------------------------
# Qubit detuning
# ---------------------------------------------------------------------------

def run_qubit_mpc(p: dict, delta_plant: float | None = None, feedback_period: int | None = None,
                  steps: int | None = None) -> TrajectoryRecord:
    """One closed-loop qubit run with the detuned plant and the model detuning."""
    plant = qubit_liouvillian(p["delta_plant"] if delta_plant is None else delta_plant)
    model = discretize_first_order(qubit_liouvillian(p["delta_model"]), p["dt"])
    cfg = _mpc_config(p, population_weight(2, p["q_population"], coherence=p["q_coherence"]), 1, feedback_period)
    ref = ReferenceTrajectory.setpoint(QuantumState.basis(2, 1).x, cfg.horizon, 1)
    steps = _steps(p["duration_ns"], p["dt"]) if steps is None else steps
    return run_closed_loop(plant, model, QuantumState.basis(2, 0), ref, cfg, steps,
                           sqp_mode=p["sqp_mode"], initial_u_guess=p["initial_u_guess"], label="mpc")


def scenario_qubit_detuning(overrides: dict | None = None) -> ScenarioResult:
    p = resolve_params("qubit_detuning", overrides)
    u_max, du_max = control_bounds(p)
    steps = _steps(p["duration_ns"], p["dt"])
    plant = qubit_liouvillian(p["delta_plant"])
    pulse = baselines.area_pi_pulse(p["pi_pulse_duration_ns"], p["dt"], u_max, du_max)
    target = QuantumState.basis(2, 1).rho
    pi_rec = open_loop_record(plant, QuantumState.basis(2, 0), _pad(pulse, steps), p["dt"], target, "pi_pulse")
    mpc_rec = run_qubit_mpc(p)
    res = ScenarioResult("qubit_detuning", p, {"pi_pulse": pi_rec, "mpc": mpc_rec})
    res.summary = {
        label: record_summary(rec, p["threshold"], u_max, du_max, p["eval_time_ns"])
        for label, rec in res.records.items()
    }
    return res


# ---------------------------------------------------------------------------
# Transmon / DRAG ladder
# ---------------------------------------------------------------------------

LADDER_LABELS = {
    "a": "a_gaussian",
    "b": "b_drag",
    "c": "c_mpc_full_model",
    "d": "d_mpc_no_anharmonicity",
    "e": "e_mpc_qubit_subspace",
}


def _ladder(name: str, overrides: dict | None) -> ScenarioResult:
    p = resolve_params(name, overrides)
    u_max, du_max = control_bounds(p)
    dt, levels = p["dt"], int(p["levels"])
    steps = _steps(p["duration_ns"], dt)
    plant = transmon_liouvillian(p["alpha"], levels)
    rho0 = QuantumState.basis(levels, 0)
    target = QuantumState.basis(levels, 1)
    res = ScenarioResult(name, p)
    clipping = {}

    def pulse_record(label, scale):
        ux, uy = baselines.drag_pulses(p["duration_ns"], dt, p["alpha"], scale)
        U, rep = baselines.enforce_bounds(np.column_stack([ux, uy]), u_max, None)
        clipping[label] = rep.amplitude_clipped
        return open_loop_record(plant, rho0, _pad(U, steps), dt, target.rho, label)

    def mpc_record(label, model_alpha, subspace=False):
        if subspace:
            model = discretize_first_order(build_liouvillian(np.zeros((2, 2)), [0.5 * sigma_x, -0.5 * sigma_y]), dt)
            Q = population_weight(2, p["q_population"], coherence=p["q_coherence"])
            ref = ReferenceTrajectory.setpoint(QuantumState.basis(2, 1).x, int(p["horizon"]), 2)
            observe = lambda s: subspace_feedback_adapter(s, 2)  # noqa: E731
        else:
            model = discretize_first_order(transmon_liouvillian(model_alpha, levels), dt)
            Q = population_weight(levels, p["q_population"], coherence=p["q_coherence"])
            ref = ReferenceTrajectory.setpoint(target.x, int(p["horizon"]), 2)
            observe = None
        cfg = _mpc_config(p, Q, 2)
        return run_closed_loop(plant, model, rho0, ref, cfg, steps, observe=observe, target=target.rho,
                               sqp_mode=p["sqp_mode"], initial_u_guess=p["initial_u_guess"], label=label)

    builders: dict[str, Callable[[], TrajectoryRecord]] = {
        "a": lambda: pulse_record(LADDER_LABELS["a"], 0.0),
        "b": lambda: pulse_record(LADDER_LABELS["b"], p["drag_scale"]),
        "c": lambda: mpc_record(LADDER_LABELS["c"], p["alpha"]),
        "d": lambda: mpc_record(LADDER_LABELS["d"], 0.0),
        "e": lambda: mpc_record(LADDER_LABELS["e"], 0.0, subspace=True),
    }
    for case in sorted(set(p["cases"])):
        rec = builders[case]()
        res.records[rec.label] = rec
    for label, rec in res.records.items():
        rho_final = qcore.x_to_state(rec.states[-1])
        s = record_summary(rec, p["threshold"], u_max, du_max)
        s["populations_final"] = [float(v) for v in np.real(np.diag(rho_final))]
        s["leakage_final"] = float(np.real(np.sum(np.diag(rho_final)[2:])))
        if label in clipping:
            s["amplitude_clipped_samples"] = clipping[label]
        res.summary[label] = s
    return res


def scenario_transmon_drag(overrides: dict | None = None) -> ScenarioResult:
    return _ladder("transmon_drag", overrides)


def scenario_drag_ladder(overrides: dict | None = None) -> ScenarioResult:
    return _ladder("drag_ladder", overrides)


# ---------------------------------------------------------------------------
# Crosstalk
# ---------------------------------------------------------------------------

def scenario_crosstalk(overrides: dict | None = None) -> ScenarioResult:
    p = resolve_params("crosstalk", overrides)
    u_max, du_max = control_bounds(p)
    dt = p["dt"]
    steps = _steps(p["duration_ns"], dt)
    rho0 = QuantumState.basis(4, 0)
    target = QuantumState.basis(4, 3).rho
    free, coupled = crosstalk_liouvillian(0.0), crosstalk_liouvillian(p["xi"])

    pulse = baselines.area_pi_pulse(p["pi_pulse_duration_ns"], dt, u_max, du_max)
    U = _pad(np.column_stack([pulse, pulse]), steps)
    res = ScenarioResult("crosstalk", p)
    res.records["pi_no_crosstalk"] = open_loop_record(free, rho0, U, dt, target, "pi_no_crosstalk")
    res.records["pi_crosstalk"] = open_loop_record(coupled, rho0, U, dt, target, "pi_crosstalk")

    model = block_diagonal_model([
        discretize_first_order(qubit_liouvillian(0.0, "x"), dt),
        discretize_first_order(qubit_liouvillian(0.0, "y"), dt),
    ])
    x1 = QuantumState.basis(2, 1).x
    ref = ReferenceTrajectory.setpoint(np.concatenate([x1, x1]), int(p["horizon"]), 2)
    cfg = _mpc_config(p, population_weight(2, p["q_population"], blocks=2, coherence=p["q_coherence"]), 2)
    res.records["mpc_crosstalk"] = run_closed_loop(
        coupled, model, rho0, ref, cfg, steps, observe=lambda s: reduced_feedback_adapter(s, (2, 2)),
        target=target, sqp_mode=p["sqp_mode"], initial_u_guess=p["initial_u_guess"], label="mpc_crosstalk",
    )
    rows = []
    for label, rec in res.records.items():
        s = record_summary(rec, p["threshold"], u_max, du_max)
        s["joint_fidelity_final"] = s.pop("final_fidelity")
        res.summary[label] = s
        rho = qcore.x_to_state(rec.states[-1])
        for j in range(4):
            for k in range(4):
                rows.append([label, j, k, float(abs(rho[j, k])), float(np.angle(rho[j, k]))])
    res.tables["density_bars"] = Table(["run", "row", "col", "magnitude", "phase"], rows)
    return res


# ---------------------------------------------------------------------------
# Nelder-Mead comparison
# ---------------------------------------------------------------------------

def _pulse_infidelity(plant, U, dt) -> float:
    rec = open_loop_record(plant, QuantumState.basis(2, 0), U, dt, QuantumState.basis(2, 1).rho)
    return rec.final_infidelity


def scenario_nm_comparison(overrides: dict | None = None) -> ScenarioResult:
    p = resolve_params("nm_comparison", overrides)
    u_max, du_max = control_bounds(p)
    dt, n = p["dt"], int(p["n_params"])
    plant = qubit_liouvillian(p["delta_plant"])
    deltas = np.round(np.linspace(p["delta_model_min"], p["delta_model_max"], int(p["n_models"])), 12)
    Q = population_weight(2, p["q_population"], coherence=p["q_coherence"])
    x0, x1 = QuantumState.basis(2, 0).x, QuantumState.basis(2, 1).x
    res = ScenarioResult("nm_comparison", p)

    def objective(params):
        return _pulse_infidelity(plant, baselines.project_pulse(params, u_max, du_max), dt)

    # (b) MPC with each mismatched model; one state tomography per step
    mpc_curves = []
    for d in deltas:
        model = discretize_first_order(qubit_liouvillian(d), dt)
        cfg = _mpc_config(p, Q, 1)
        ref = ReferenceTrajectory.setpoint(x1, cfg.horizon, 1)
        rec = run_closed_loop(plant, model, QuantumState.basis(2, 0), ref, cfg, int(p["mpc_steps"]),
                              sqp_mode=p["sqp_mode"], initial_u_guess=p["initial_u_guess"],
                              label=f"mpc_delta_{d:+.3f}")
        mpc_curves.append(rec.infidelity[1:])
        res.records[rec.label] = rec
    mpc_curves = np.array(mpc_curves)

    # open-loop optimal pulses per model: baseline and simplex seeds
    ol_cfg = _mpc_config(dict(p, horizon=n), Q, 1)
    ol_ref = ReferenceTrajectory.setpoint(x1, n, 1)
    seeds, ol_rows = [], []
    for d in deltas:
        model = discretize_first_order(qubit_liouvillian(d), dt)
        U = baselines.open_loop_optimal_pulse(model, ol_ref, ol_cfg, x0, u_prev=np.zeros(1),
                                              u_guess=p["initial_u_guess"])
        seeds.append(U[:, 0])
        ol_rows.append([float(d), float(abs(d - p["delta_plant"])), _pulse_infidelity(plant, U, dt)])
    res.tables["open_loop_by_model"] = Table(["delta_model", "abs_discrepancy", "infidelity"], ol_rows)

    max_evals = int(p["nm_max_evals"])
    simplex = baselines.model_aware_simplex(seeds[: n + 1]) if len(seeds) >= n + 1 else None
    aware = baselines.nelder_mead_calibrate(objective, simplex, max_evals) if simplex is not None else None

    rng = np.random.default_rng(int(p["seed"]))
    random_runs = []
    for _ in range(int(p["n_random"])):
        seed_pulse = rng.uniform(-u_max, u_max, n)
        random_runs.append(baselines.nelder_mead_calibrate(objective, baselines.random_simplex(seed_pulse, du_max),
                                                           max_evals))

    def best_curve(run):
        h = run.best_history
        return np.concatenate([h, np.full(max_evals - len(h), h[-1])])

    rand_best = np.array([best_curve(r) for r in random_runs])
    aware_best = best_curve(aware) if aware is not None else np.full(max_evals, np.nan)
    rows = []
    for k in range(max_evals):
        mpc_k = mpc_curves[:, k] if k < mpc_curves.shape[1] else np.full(len(deltas), np.nan)
        rows.append([k + 1, float(np.mean(mpc_k)), float(np.min(mpc_k)), float(np.max(mpc_k)),
                     float(aware_best[k]), float(rand_best[:, k].mean()), float(rand_best[:, k].std())])
    res.tables["qst_curves"] = Table(
        ["qst_iteration", "mpc_mean", "mpc_min", "mpc_max", "nm_model_aware", "nm_random_mean", "nm_random_std"],
        rows,
    )
    k10 = min(10, int(p["mpc_steps"])) - 1
    first_descent = []
    for r in random_runs:
        h = r.history
        improve = np.flatnonzero(h[n + 1:] < h[: n + 1].min())
        first_descent.append(int(n + 2 + improve[0]) if improve.size else None)
    res.summary = {
        "threshold": p["threshold"],
        "deltas": [float(d) for d in deltas],
        "mpc_first_success_iteration": [
            int(np.flatnonzero(c < p["threshold"])[0] + 1) if np.any(c < p["threshold"]) else None
            for c in mpc_curves
        ],
        "mpc_infidelity_at_10": [float(c[k10]) for c in mpc_curves],
        "mpc_mean_at_10": float(mpc_curves[:, k10].mean()),
        "nm_random_mean_at_10": float(rand_best[:, min(9, max_evals - 1)].mean()),
        "nm_random_setup_evaluations": n + 1,
        "nm_random_first_improvement_eval": first_descent,
        "nm_model_aware_best": None if aware is None else aware.value,
        "nm_random_best_mean": float(rand_best[:, -1].mean()),
    }
    return res


# ---------------------------------------------------------------------------
# Feedback-period / discrepancy sweep
# ---------------------------------------------------------------------------

def _sweep_cell(args) -> float:
    p, delta, period = args
    steps = int(np.ceil(p["eval_time_ns"] / p["dt"] - 1e-9))
    rec = run_qubit_mpc(p, delta_plant=delta, feedback_period=period, steps=steps)
    return rec.infidelity_at(p["eval_time_ns"])


def sweep_grid(p: dict):
    deltas = np.round(np.linspace(p["delta_min"], p["delta_max"], int(p["n_delta"])), 12)
    periods = list(range(int(p["period_min"]), int(p["period_max"]) + 1))
    return [(float(d), per) for d in deltas for per in periods]


def scenario_feedback_sweep(overrides: dict | None = None) -> ScenarioResult:
    p = resolve_params("feedback_sweep", overrides)
    cells = sweep_grid(p)
    args = [(p, d, per) for d, per in cells]
    jobs = min(int(p["jobs"]), len(cells))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_sweep_cell, args))
    else:
        values = [_sweep_cell(a) for a in args]
    rows = [[d - p["delta_model"], per, v] for (d, per), v in zip(cells, values)]
    res = ScenarioResult("feedback_sweep", p)
    res.tables["grid"] = Table(["delta", "feedback_period", "infidelity"], rows)
    vals = np.array(values)
    res.summary = {
        "eval_time_ns": p["eval_time_ns"],
        "grid_min": float(vals.min()),
        "grid_max": float(vals.max()),
        "n_cells": len(cells),
    }
    return res


RUNNERS: dict[str, Callable[[dict | None], ScenarioResult]] = {
    "qubit_detuning": scenario_qubit_detuning,
    "transmon_drag": scenario_transmon_drag,
    "drag_ladder": scenario_drag_ladder,
    "crosstalk": scenario_crosstalk,
    "nm_comparison": scenario_nm_comparison,
    "feedback_sweep": scenario_feedback_sweep,
}


def run_scenario(name: str, overrides: dict | None = None) -> ScenarioResult:
    if name not in RUNNERS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    return RUNNERS[name](overrides)
