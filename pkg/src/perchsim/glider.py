"""Flat-plate glider rigid-body dynamics.

State vector (7): ``[r_x, r_z, theta, phi, v_x, v_z, omega]`` with pitch
``theta``, elevator deflection ``phi``, and elevator rate as the single
control input.  Wing loads come from the vortex wake model; the elevator is
an analytic flat plate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import GliderParams, VpmConfig
from .vpm import FluidState, chord_frame, cross2, vpm_step


@dataclass
class GliderState:
    r_x: float = 0.0
    r_z: float = 0.0
    theta: float = 0.0
    phi: float = 0.0
    v_x: float = 0.0
    v_z: float = 0.0
    omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.r_x, self.r_z, self.theta, self.phi,
                         self.v_x, self.v_z, self.omega])

    @classmethod
    def from_array(cls, x) -> "GliderState":
        x = np.asarray(x, dtype=float)
        return cls(*x.tolist())


def elevator_kinematics(x, p: GliderParams, elevator_rate: float = 0.0):
    """Positions and velocities of the wing point and elevator center.

    The elevator velocity depends on the applied elevator rate (phi-dot), so
    callers inside a step pass the current input; the default 0 gives the
    coasting kinematics.
    Returns ``(x_e, xdot_e, x_w, xdot_w)``.
    """
    x = np.asarray(x, dtype=float)
    r, theta, phi, v, omega = x[0:2], x[2], x[3], x[4:6], x[6]
    f, n = chord_frame(theta)
    fe, ne = chord_frame(theta + phi)
    x_w = r - p.l_w * f
    x_e = r - p.l * f - p.l_e * fe
    xdot_w = v - p.l_w * omega * n
    xdot_e = v - p.l * omega * n - p.l_e * (omega + elevator_rate) * ne
    return x_e, xdot_e, x_w, xdot_w


def elevator_force(x, p: GliderParams, elevator_rate: float = 0.0) -> np.ndarray:
    """Flat-plate elevator force: normal-force law C_N = 2 sin(alpha) applied
    along the elevator normal at the elevator's own dynamic pressure.  At zero
    elevator speed the angle of attack is taken as zero and the force vanishes.
    """
    x = np.asarray(x, dtype=float)
    theta, phi = x[2], x[3]
    x_e, xdot_e, _, _ = elevator_kinematics(x, p, elevator_rate)
    speed2 = xdot_e @ xdot_e
    if speed2 < 1e-18:
        return np.zeros(2)
    alpha_e = theta + phi - math.atan2(xdot_e[1], xdot_e[0])
    n_e = np.array([-math.sin(theta + phi), math.cos(theta + phi)])
    return 0.5 * p.rho * speed2 * p.s_e * 2.0 * math.sin(alpha_e) * n_e


def accelerations(x, f_wing: np.ndarray, m_wing: float, f_elev: np.ndarray,
                  p: GliderParams) -> tuple[float, float, float]:
    """Translational and angular accelerations.

    ``m_wing`` is the wake-model moment about the wing point; it is
    transported to the center of mass here, and the elevator torque uses the
    arm from the center of mass to the elevator center.
    """
    x = np.asarray(x, dtype=float)
    r, theta = x[0:2], x[2]
    f, _ = chord_frame(theta)
    x_e, _, x_w, _ = elevator_kinematics(x, p)
    a = (f_wing + f_elev) / p.m - np.array([0.0, p.g])
    torque = m_wing + cross2(x_w - r, f_wing) + cross2(x_e - r, f_elev)
    return float(a[0]), float(a[1]), float(torque / p.inertia)


def step(x, u: float, fluid: FluidState, p: GliderParams,
         cfg: VpmConfig) -> tuple[np.ndarray, FluidState, np.ndarray]:
    """One forward-Euler step of the coupled glider + wake system.

    The elevator rate is clamped to the actuator limit, all forces are
    evaluated at the current state, and the deflection saturates at its
    travel limit after integration.
    """
    x_new, fluid_new, f_wing, _ = step_with_loads(x, u, fluid, p, cfg)
    return x_new, fluid_new, f_wing


def step_with_loads(x, u: float, fluid: FluidState, p: GliderParams,
                    cfg: VpmConfig):
    """Like :func:`step` but also reports the wing moment about the wing point."""
    x = np.asarray(x, dtype=float)
    u = float(np.clip(u, -p.u_limit, p.u_limit))
    f_wing, m_wing, fluid_new = vpm_step(x, fluid, cfg)
    f_elev = elevator_force(x, p, u)
    ax, az, alpha = accelerations(x, f_wing, m_wing, f_elev, p)

    dt = cfg.dt
    out = x.copy()
    out[0] += dt * x[4]
    out[1] += dt * x[5]
    out[2] += dt * x[6]
    out[3] = float(np.clip(x[3] + dt * u, -p.phi_limit, p.phi_limit))
    out[4] += dt * ax
    out[5] += dt * az
    out[6] += dt * alpha
    return out, fluid_new, f_wing, m_wing
