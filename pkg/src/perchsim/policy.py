"""Time-varying linear feedback synthesis around a nominal trajectory.

Finite-differencing the wake-coupled dynamics yields noisy, ill-conditioned
Jacobians, so the linearization is estimated instead by least squares over a
cloud of perturbed rollouts, with the known kinematic structure imposed
exactly: the position and attitude rows of the state matrix are analytic,
and only the 3x5 dynamic block (and 3x1 input block) are regressed.  Gains
come from the standard discrete-time Riccati recursion run backward from the
final-cost weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SynthesisConfig
from .rollout import Engine, RolloutRequest
from .vpm import FluidState

# state layout: [r_x, r_z, theta, phi, v_x, v_z, omega]
N_STATE = 7
DYNAMIC_ROWS = (4, 5, 6)            # accelerations to be regressed
REGRESSOR_COLS = (2, 3, 4, 5, 6)    # theta, phi, v_x, v_z, omega
REGRESSOR_NAMES = ("theta", "phi", "v_x", "v_z", "omega", "u")


class RankDeficientData(ValueError):
    """Perturbation data does not excite every regressor direction."""


@dataclass
class NominalTrajectory:
    states: np.ndarray              # (N+1, 7)
    inputs: np.ndarray              # (N,)
    dt: float
    t_start: float = 0.0

    @property
    def horizon(self) -> int:
        return len(self.inputs)


@dataclass
class LinearSystemSequence:
    a_continuous: np.ndarray        # (N, 3, 5) regressed state blocks
    b_continuous: np.ndarray        # (N, 3)
    a_discrete: np.ndarray          # (N, 7, 7)
    b_discrete: np.ndarray          # (N, 7)


@dataclass
class Policy:
    """Gains plus the nominal they stabilize; valid from ``t_start``."""

    gains: np.ndarray               # (N, 7)
    nominal: NominalTrajectory
    q_final: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def t_start(self) -> float:
        return self.nominal.t_start


def perturbed_rollouts(nominal: NominalTrajectory, fluid: FluidState,
                       cfg: SynthesisConfig, engine: Engine,
                       rng: np.random.Generator):
    """Roll out a cloud of perturbed initial states and input sequences.

    Returns ``(states (K, N+1, 7), inputs (K, N), ok mask)``; rollouts that
    blow up are masked out of the regression set.
    """
    n = nominal.horizon
    k = cfg.n_samples
    x0 = nominal.states[0]
    dx0 = rng.normal(0.0, 1.0, (k, N_STATE)) * np.asarray(cfg.state_stdev)
    du = rng.normal(0.0, 1.0, (k, n)) * cfg.input_stdev
    inputs = np.clip(nominal.inputs[None, :] + du,
                     -engine.params.u_limit, engine.params.u_limit)
    states = np.zeros((k, n + 1, N_STATE))
    ok = np.zeros(k, dtype=bool)
    starts = x0[None, :] + dx0
    for i in range(k):
        rc, traj, _ = engine.rollout(starts[i], inputs[i], fluid, record=True)
        states[i] = traj
        ok[i] = rc == 0
    if ok.sum() < 6:
        raise RankDeficientData(
            f"only {int(ok.sum())} of {k} perturbed rollouts survived")
    return states, inputs, ok


def estimate_jacobians(delta_x, delta_u, residuals):
    """Least-squares fit of the dynamic Jacobian blocks at one time step.

    ``delta_x``: (K, 7) state deviations; ``delta_u``: (K,) input deviations;
    ``residuals``: (K, 3) acceleration-row derivative deviations.  Only the
    dynamic-state columns enter the regression; a rank-deficient regressor
    matrix raises with the names of the unexcited columns.
    """
    delta_x = np.asarray(delta_x, dtype=float)
    delta_u = np.asarray(delta_u, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    z = np.column_stack([delta_x[:, list(REGRESSOR_COLS)], delta_u])
    if z.shape[0] < z.shape[1]:
        raise RankDeficientData(f"need at least {z.shape[1]} samples, got {z.shape[0]}")
    rank = np.linalg.matrix_rank(z)
    if rank < z.shape[1]:
        norms = np.linalg.norm(z, axis=0)
        scale = np.linalg.norm(z) / np.sqrt(z.shape[1]) + 1e-300
        weak = [REGRESSOR_NAMES[i] for i in range(z.shape[1])
                if norms[i] < 1e-12 * scale]
        detail = ", ".join(weak) if weak else "collinear perturbations"
        raise RankDeficientData(f"regressor matrix rank {rank} < {z.shape[1]}: {detail}")
    sol, *_ = np.linalg.lstsq(z, residuals, rcond=None)
    jac = sol.T                      # (3, 6)
    return jac[:, :5], jac[:, 5]


def assemble_discrete(a_block, b_block, dt: float):
    """Euler-discretized system matrices with the analytic kinematic rows.

    Positions integrate velocities, attitude integrates pitch rate, and the
    elevator deflection integrates the input; the regressed blocks fill the
    acceleration rows.
    """
    a_c = np.zeros((N_STATE, N_STATE))
    b_c = np.zeros(N_STATE)
    a_c[0, 4] = 1.0
    a_c[1, 5] = 1.0
    a_c[2, 6] = 1.0
    b_c[3] = 1.0
    a_c[np.ix_(DYNAMIC_ROWS, REGRESSOR_COLS)] = a_block
    b_c[list(DYNAMIC_ROWS)] = np.asarray(b_block).ravel()
    a_d = np.eye(N_STATE) + dt * a_c
    b_d = dt * b_c
    return a_d, b_d


def estimate_linear_sequence(nominal: NominalTrajectory, states, inputs, ok,
                             dt: float) -> LinearSystemSequence:
    """Per-step Jacobian regression over the perturbed rollout cloud.

    Columns with no excitation are dropped from the fit and their Jacobian
    entries left at zero: when the elevator sits on its travel stop, every
    perturbed rollout saturates to the same deflection and the phi column
    carries no information.
    """
    n = nominal.horizon
    a_cont = np.zeros((n, 3, 5))
    b_cont = np.zeros((n, 3))
    a_disc = np.zeros((n, N_STATE, N_STATE))
    b_disc = np.zeros((n, N_STATE))
    nom_deriv = (nominal.states[1:] - nominal.states[:-1]) / dt
    sample_deriv = (states[ok][:, 1:] - states[ok][:, :-1]) / dt
    dx_all = states[ok][:, :-1] - nominal.states[None, :-1]
    du_all = inputs[ok] - nominal.inputs[None, :]
    for k in range(n):
        resid = sample_deriv[:, k][:, list(DYNAMIC_ROWS)] - nom_deriv[k][list(DYNAMIC_ROWS)]
        z = np.column_stack([dx_all[:, k][:, list(REGRESSOR_COLS)], du_all[:, k]])
        norms = np.linalg.norm(z, axis=0)
        active = norms > 1e-10 * max(norms.max(), 1e-30)
        jac = np.zeros((3, 6))
        if active.any():
            sol, *_ = np.linalg.lstsq(z[:, active], resid, rcond=None)
            jac[:, active] = sol.T
        a_cont[k] = jac[:, :5]
        b_cont[k] = jac[:, 5]
        a_disc[k], b_disc[k] = assemble_discrete(a_cont[k], b_cont[k], dt)
    return LinearSystemSequence(a_cont, b_cont, a_disc, b_disc)


def finite_difference_sequence(nominal: NominalTrajectory, fluid: FluidState,
                               engine: Engine, eps_x=1e-4, eps_u=1e-4
                               ) -> LinearSystemSequence:
    """Diagnostic alternative: one-sided finite differences through the
    coupled dynamics.  Noisy and ill-conditioned; kept to reproduce the
    comparison against the regression approach, not for production use."""
    n = nominal.horizon
    dt = nominal.dt
    a_cont = np.zeros((n, 3, 5))
    b_cont = np.zeros((n, 3))
    a_disc = np.zeros((n, N_STATE, N_STATE))
    b_disc = np.zeros((n, N_STATE))
    fl = fluid.copy()
    for k in range(n):
        x_k = nominal.states[k]
        u_k = float(nominal.inputs[k])
        ok0, x_base, fl_next, _ = engine.step(x_k, u_k, fl)
        f0 = (x_base - x_k) / dt
        for ci, col in enumerate(REGRESSOR_COLS):
            xp = x_k.copy()
            xp[col] += eps_x
            _, x_pert, _, _ = engine.step(xp, u_k, fl)
            fp = (x_pert - xp) / dt
            a_cont[k][:, ci] = (fp - f0)[list(DYNAMIC_ROWS)] / eps_x
        _, x_pu, _, _ = engine.step(x_k, u_k + eps_u, fl)
        fu = (x_pu - x_k) / dt
        b_cont[k] = (fu - f0)[list(DYNAMIC_ROWS)] / eps_u
        a_disc[k], b_disc[k] = assemble_discrete(a_cont[k], b_cont[k], dt)
        fl = fl_next
    return LinearSystemSequence(a_cont, b_cont, a_disc, b_disc)


def tvlqr_backward(a_seq, b_seq, q_running, r_running: float, q_final):
    """Backward Riccati recursion; returns the (N, 7) gain sequence.

    S_N = Q_f;  H_k = (R + B' S_{k+1} B)^-1 B' S_{k+1} A_k;
    S_k = Q + A' S_{k+1} A - A' S_{k+1} B H_k.
    """
    a_seq = np.asarray(a_seq, dtype=float)
    b_seq = np.asarray(b_seq, dtype=float)
    n = len(a_seq)
    dim = a_seq.shape[1]
    q = np.diag(np.asarray(q_running, dtype=float)) if np.ndim(q_running) == 1 \
        else np.asarray(q_running, dtype=float)
    qf = np.diag(np.asarray(q_final, dtype=float)) if np.ndim(q_final) == 1 \
        else np.asarray(q_final, dtype=float)
    s = qf.copy()
    gains = np.zeros((n, dim))
    for k in range(n - 1, -1, -1):
        a = a_seq[k]
        b = b_seq[k].reshape(dim, 1)
        sb = s @ b
        denom = float(r_running + b.T @ sb)
        h = (b.T @ s @ a).ravel() / denom
        gains[k] = h
        s = q + a.T @ s @ a - np.outer(a.T @ sb, h)
        s = 0.5 * (s + s.T)
        if not np.all(np.isfinite(s)):
            raise FloatingPointError(f"Riccati recursion diverged at step {k}")
    return gains


def evaluate_policy(policy: Policy, x, t: float, u_limit: float) -> float:
    """Feedback law u = -H_k (x - tau_k) + xi_k with the step index clamped
    to the policy's horizon and the output saturated to the actuator range."""
    nom = policy.nominal
    k = int(round((t - nom.t_start) / nom.dt))
    k = min(max(k, 0), nom.horizon - 1)
    err = np.asarray(x, dtype=float) - nom.states[k]
    u = -float(policy.gains[k] @ err) + float(nom.inputs[k])
    return float(np.clip(u, -u_limit, u_limit))


def build_policy(nominal: NominalTrajectory, fluid: FluidState,
                 cfg: SynthesisConfig, engine: Engine,
                 rng: np.random.Generator,
                 linear_sequence: LinearSystemSequence | None = None) -> Policy:
    """Perturbed rollouts -> per-step regression -> TVLQR gains.

    ``linear_sequence`` overrides the estimation stage (used by tests with
    known dynamics and by the finite-difference diagnostic mode).
    """
    if linear_sequence is None:
        if cfg.finite_difference:
            linear_sequence = finite_difference_sequence(nominal, fluid, engine)
        else:
            states, inputs, ok = perturbed_rollouts(nominal, fluid, cfg, engine, rng)
            linear_sequence = estimate_linear_sequence(nominal, states, inputs,
                                                       ok, nominal.dt)
    gains = tvlqr_backward(linear_sequence.a_discrete, linear_sequence.b_discrete,
                           cfg.q_running, cfg.r_running, cfg.q_final)
    return Policy(gains=gains, nominal=nominal,
                  q_final=np.asarray(cfg.q_final, dtype=float))
