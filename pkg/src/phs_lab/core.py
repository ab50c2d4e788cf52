"""Port-Hamiltonian models, simulation, and energy diagnostics.

A port-Hamiltonian system (PHS) is

    xdot = [J(x) - R(x)] grad H(x) + G(x) u,    y = G(x)^T grad H(x)

with skew-symmetric interconnection J, positive semi-definite dissipation R,
input matrix G, and stored energy H.  Times are in ms throughout; all other
quantities are dimensionless.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ModelEvaluationError, SimulationDivergedError

__all__ = [
    "PhsModel",
    "Trajectory",
    "MicroactuatorParams",
    "eval_dynamics",
    "phs_output",
    "simulate",
    "energy_balance_residual",
    "make_microactuator",
    "make_mass_spring_damper",
    "trajectory_to_csv",
    "trajectory_from_csv",
]


@dataclass(frozen=True)
class PhsModel:
    """Immutable PHS description; all callables are pure functions of the state.

    Parameters
    ----------
    dim_state, dim_input : int
        State and input dimensions n, m.
    interconnection : callable
        x -> J(x), skew-symmetric (n, n).
    dissipation : callable
        x -> R(x), symmetric PSD (n, n).
    io_matrix : callable
        x -> G(x), shape (n, m).
    hamiltonian : callable
        x -> H(x), scalar.
    hamiltonian_gradient : callable
        x -> grad H(x), shape (n,).
    """

    dim_state: int
    dim_input: int
    interconnection: Callable[[np.ndarray], np.ndarray]
    dissipation: Callable[[np.ndarray], np.ndarray]
    io_matrix: Callable[[np.ndarray], np.ndarray]
    hamiltonian: Callable[[np.ndarray], float]
    hamiltonian_gradient: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Trajectory:
    """Sampled system trajectory.

    ``states`` is (T, n) row-per-sample, ``inputs`` is (T, m), ``outputs`` is
    the passive output y = G^T grad H when recorded, else None.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "states", np.atleast_2d(np.asarray(self.states, dtype=float)))
        object.__setattr__(self, "inputs", np.atleast_2d(np.asarray(self.inputs, dtype=float)))
        if self.outputs is not None:
            object.__setattr__(self, "outputs", np.atleast_2d(np.asarray(self.outputs, dtype=float)))
        if self.times.ndim != 1:
            raise ValueError("times must be one-dimensional")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        t = self.times.shape[0]
        for name in ("states", "inputs", "outputs"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != t:
                raise ValueError(f"{name} length {arr.shape[0]} does not match times length {t}")

    def __len__(self):
        return self.times.shape[0]


@dataclass(frozen=True)
class MicroactuatorParams:
    """Electrostatic microactuator parameters.

    State is (plate position x1, momentum x2, charge x3).  The stored energy is

        H(x) = 1/2 k (x1 - x1_star)^2 + x2^2 / (2 m) + x3^2 / C(x1)

    where the electrical term enters without a 1/2 factor by convention here;
    set ``electrical_half=True`` for the conventional x3^2 / (2 C) variant.
    The capacitance law is injectable; the default is the parallel-plate law
    C(x1) = c0 / x1.
    """

    m: float = 1.0
    b: float = 0.5
    k: float = 10.0
    r: float = 1.0
    x1_star: float = 1.0
    c0: float = 1.0
    capacitance: Optional[Callable[[float], float]] = None
    capacitance_deriv: Optional[Callable[[float], float]] = None
    electrical_half: bool = False

    def __post_init__(self):
        if self.m <= 0 or self.k <= 0 or self.r <= 0:
            raise ValueError("m, k, r must be positive")
        if self.b < 0:
            raise ValueError("b must be nonnegative")
        if (self.capacitance is None) != (self.capacitance_deriv is None):
            raise ValueError("capacitance and capacitance_deriv must be given together")


def eval_dynamics(model: PhsModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Evaluate xdot = [J(x) - R(x)] grad H(x) + G(x) u.

    Raises ModelEvaluationError when the result is non-finite (for example at
    a capacitance singularity).
    """
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    grad = np.asarray(model.hamiltonian_gradient(x), dtype=float)
    jr = model.interconnection(x) - model.dissipation(x)
    xdot = jr @ grad + model.io_matrix(x) @ u
    if not np.all(np.isfinite(xdot)):
        raise ModelEvaluationError("non-finite dynamics evaluation", state=x.copy())
    return xdot


def phs_output(model: PhsModel, x: np.ndarray) -> np.ndarray:
    """Passive output y = G(x)^T grad H(x)."""
    x = np.asarray(x, dtype=float)
    return model.io_matrix(x).T @ np.asarray(model.hamiltonian_gradient(x), dtype=float)


def simulate(
    model: PhsModel,
    x0: np.ndarray,
    input_signal: Callable[[float], np.ndarray],
    t_span,
    n_samples: Optional[int] = None,
    sample_times: Optional[np.ndarray] = None,
    rtol: float = 1e-8,
    atol: float = 1e-8,
    blowup: float = 1e6,
    record_outputs: bool = True,
) -> Trajectory:
    """Integrate the PHS with an adaptive Runge-Kutta pair and dense output.

    Parameters
    ----------
    input_signal : callable
        t -> u(t), shape (m,) (scalars accepted for m = 1).
    n_samples : int, optional
        Resample the dense solution on a uniform grid of this many points
        (endpoints included).  Mutually exclusive with ``sample_times``.
    sample_times : array, optional
        Explicit sample grid inside t_span.

    Raises
    ------
    SimulationDivergedError
        On state blow-up, step-size underflow, or a model evaluation failure;
        carries the last valid time.
    """
    x0 = np.asarray(x0, dtype=float)
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must be a nonempty forward interval")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    if n_samples is not None and sample_times is not None:
        raise ValueError("pass either n_samples or sample_times, not both")

    last_ok = [t0]

    def rhs(t, x):
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > blowup:
            raise SimulationDivergedError("state blow-up", last_ok[0])
        u = np.atleast_1d(np.asarray(input_signal(t), dtype=float))
        dx = eval_dynamics(model, x, u)
        last_ok[0] = t
        return dx

    try:
        sol = solve_ivp(
            rhs,
            (t0, t1),
            x0,
            method="RK45",
            rtol=rtol,
            atol=atol,
            dense_output=True,
        )
    except SimulationDivergedError:
        raise
    except ModelEvaluationError as exc:
        raise SimulationDivergedError(str(exc), last_ok[0]) from exc
    if not sol.success:
        raise SimulationDivergedError(f"integrator stopped: {sol.message}", float(sol.t[-1]))

    if sample_times is not None:
        ts = np.asarray(sample_times, dtype=float)
    elif n_samples is not None:
        ts = np.linspace(t0, t1, int(n_samples))
    else:
        ts = sol.t
    xs = sol.sol(ts).T
    us = np.stack([np.atleast_1d(np.asarray(input_signal(t), dtype=float)) for t in ts])
    ys = None
    if record_outputs:
        ys = np.stack([phs_output(model, x) for x in xs])
    return Trajectory(times=ts, states=xs, inputs=us, outputs=ys)


def energy_balance_residual(model: PhsModel, traj: Trajectory) -> np.ndarray:
    """Per-step defect of the power balance d/dt H = -grad H^T R grad H + y^T u.

    Compares the finite-difference slope of H along the trajectory with the
    trapezoidal average of the power terms; meaningful only when the sampling
    is dense enough for the O(h^2) differencing to resolve the dynamics.
    """
    h_vals = np.array([model.hamiltonian(x) for x in traj.states])
    power = np.empty(len(traj))
    for i, x in enumerate(traj.states):
        grad = np.asarray(model.hamiltonian_gradient(x), dtype=float)
        y = model.io_matrix(x).T @ grad
        power[i] = -grad @ model.dissipation(x) @ grad + y @ traj.inputs[i]
    dt = np.diff(traj.times)
    slope = np.diff(h_vals) / dt
    mid_power = 0.5 * (power[:-1] + power[1:])
    return np.abs(slope - mid_power)


def make_microactuator(params: MicroactuatorParams = MicroactuatorParams()) -> PhsModel:
    """Build the three-state electrostatic microactuator PHS.

    J - R = [[0, 1, 0], [-1, -b, 0], [0, 0, -1/r]], G = (0, 0, 1/r)^T, and H
    as documented on MicroactuatorParams.
    """
    p = params
    # the energy only sees the elastance 1/C; for the default C = c0/x1 that
    # is x1/c0, regular everywhere (including the closed gap x1 = 0)
    if p.capacitance is not None:
        cap, dcap = p.capacitance, p.capacitance_deriv
        if not np.isfinite(cap(p.x1_star)) or cap(p.x1_star) <= 0:
            raise ValueError("capacitance must be positive at the steady-state gap")

        def inv_c(x, x1):
            c = cap(x1)
            if not np.isfinite(c) or c <= 0:
                raise ModelEvaluationError(
                    f"capacitance non-positive at x1={x1:.6g}", state=np.asarray(x, dtype=float)
                )
            return 1.0 / c

        def inv_c_deriv(x, x1):
            c = cap(x1)
            return -dcap(x1) / c**2

    else:
        c0 = p.c0

        def inv_c(x, x1):
            return x1 / c0

        def inv_c_deriv(x, x1):
            return 1.0 / c0

    half = 0.5 if p.electrical_half else 1.0

    def hamiltonian(x):
        x1, x2, x3 = x
        return 0.5 * p.k * (x1 - p.x1_star) ** 2 + x2**2 / (2 * p.m) + half * x3**2 * inv_c(x, x1)

    def gradient(x):
        x1, x2, x3 = x
        return np.array(
            [
                p.k * (x1 - p.x1_star) + half * x3**2 * inv_c_deriv(x, x1),
                x2 / p.m,
                2.0 * half * x3 * inv_c(x, x1),
            ]
        )

    j_mat = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    r_mat = np.diag([0.0, p.b, 1.0 / p.r])
    g_mat = np.array([[0.0], [0.0], [1.0 / p.r]])

    return PhsModel(
        dim_state=3,
        dim_input=1,
        interconnection=lambda x: j_mat,
        dissipation=lambda x: r_mat,
        io_matrix=lambda x: g_mat,
        hamiltonian=hamiltonian,
        hamiltonian_gradient=gradient,
    )


def make_mass_spring_damper(m: float = 1.0, k: float = 1.0, b: float = 0.5) -> PhsModel:
    """Two-state linear PHS (position, momentum); handy as a known-answer system."""
    if m <= 0 or k <= 0 or b < 0:
        raise ValueError("need m > 0, k > 0, b >= 0")
    j_mat = np.array([[0.0, 1.0], [-1.0, 0.0]])
    r_mat = np.diag([0.0, b])
    g_mat = np.array([[0.0], [1.0]])
    return PhsModel(
        dim_state=2,
        dim_input=1,
        interconnection=lambda x: j_mat,
        dissipation=lambda x: r_mat,
        io_matrix=lambda x: g_mat,
        hamiltonian=lambda x: 0.5 * k * x[0] ** 2 + x[1] ** 2 / (2 * m),
        hamiltonian_gradient=lambda x: np.array([k * x[0], x[1] / m]),
    )


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Write a trajectory as CSV: header t,x1..xn,u1..um[,y1..ym], 17 significant digits."""
    n = traj.states.shape[1]
    m = traj.inputs.shape[1]
    cols = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
    blocks = [traj.times[:, None], traj.states, traj.inputs]
    if traj.outputs is not None:
        cols += [f"y{i + 1}" for i in range(traj.outputs.shape[1])]
        blocks.append(traj.outputs)
    data = np.hstack(blocks)
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=",".join(cols), comments="")


def trajectory_from_csv(path) -> Trajectory:
    """Inverse of trajectory_to_csv; column roles are recovered from the header."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = sum(1 for c in header if c.startswith("x"))
    m = sum(1 for c in header if c.startswith("u"))
    n_y = sum(1 for c in header if c.startswith("y"))
    times = data[:, 0]
    states = data[:, 1 : 1 + n]
    inputs = data[:, 1 + n : 1 + n + m]
    outputs = data[:, 1 + n + m : 1 + n + m + n_y] if n_y else None
    return Trajectory(times=times, states=states, inputs=inputs, outputs=outputs)
