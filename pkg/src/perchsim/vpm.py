"""2D vortex-particle wake model for a translating, pitching flat plate.

The flow is represented by point vortices: a row of bound vortices pinned to
the chord whose strengths are solved each step to cancel through-flow at the
collocation points, plus free wake particles shed from the chord ends that
convect with the flow.  Wake-involved interactions use an algebraically
smoothed kernel with core radius ``r_core``; the influence of plate-attached
vortices on the collocation rows keeps the singular point-vortex kernel.

Below the critical angle of attack the flow is attached: the panel vortices
are solved over the collocation points aft of the nose (skipping the nose
point leaves the leading edge unconstrained, which selects the smooth-off-
the-trailing-edge branch of the discrete solution; the same placement is
algebraically equivalent to the classic quarter/three-quarter lumped-vortex
rule and reproduces thin-airfoil lift exactly).  Past the gate, a leading-
and a trailing-edge vortex join the unknowns, the leading-edge strength is
tied to the change in nose loading, the Kelvin row conserves total
circulation, and both edge vortices are shed into the wake every step.  When
the relative wind comes from behind (|effective AoA| > 90 deg) the roles of
the two edges mirror, so a tumbling plate sees the same physics as a
forward-flying one.

All public operations have value semantics: they return new states and never
mutate their inputs, so fluid states can be forked freely across rollouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import VpmConfig

TWO_PI = 2.0 * math.pi

KERNEL_SINGULAR = "singular"
KERNEL_REGULARIZED = "regularized"


class SingularKernelError(ValueError):
    """Point-vortex kernel evaluated at the vortex's own position."""


class BoundarySolveError(RuntimeError):
    """The boundary-condition system is singular or produced non-finite strengths."""


def perp(a: np.ndarray) -> np.ndarray:
    """In-plane rotation operator: pitch rate ``w`` moves a body point by ``w * perp(arm)``."""
    return np.array([-a[1], a[0]])


def cross2(a: np.ndarray, b: np.ndarray) -> float:
    """Scalar moment of a force ``b`` applied at arm ``a`` (positive = nose-up)."""
    return a[0] * b[1] - a[1] * b[0]


# ---------------------------------------------------------------------------
# Kernels


def singular_kernel_velocity(vortex_pos, gamma: float, target) -> np.ndarray:
    """Velocity induced at ``target`` by a point vortex of strength ``gamma``.

    Magnitude ``gamma / (2 pi r)``, direction perpendicular to the separation
    (positive strength circulates clockwise in the x-up-z plane).
    """
    dx = target[0] - vortex_pos[0]
    dz = target[1] - vortex_pos[1]
    r2 = dx * dx + dz * dz
    if r2 == 0.0:
        raise SingularKernelError("singular kernel evaluated at the vortex position")
    c = gamma / (TWO_PI * r2)
    return np.array([c * dz, -c * dx])


def regularized_kernel_velocity(vortex_pos, gamma: float, target, r_core: float) -> np.ndarray:
    """Finite-core vortex kernel: singular-kernel far field, zero self-velocity.

    Algebraic smoothing ``[dz, -dx] / (2 pi sqrt(r^4 + r_core^4))``: matches
    the point-vortex kernel to O((r_core/r)^4) for r >> r_core and vanishes
    linearly as r -> 0.
    """
    dx = target[0] - vortex_pos[0]
    dz = target[1] - vortex_pos[1]
    r2 = dx * dx + dz * dz
    c = gamma / (TWO_PI * math.sqrt(r2 * r2 + r_core ** 4))
    return np.array([c * dz, -c * dx])


def induced_velocity(positions, gammas, target, kernel: str = KERNEL_REGULARIZED,
                     r_core: float = 0.0) -> np.ndarray:
    """Summed kernel velocity of many vortices at one target point.

    A source coincident with the target contributes zero (self-interaction
    is excluded), matching the smoothed kernel's r -> 0 limit.
    """
    out = induced_velocity_at(np.atleast_2d(np.asarray(target, dtype=float)),
                              positions, gammas, kernel, r_core)
    return out[0]


def induced_velocity_at(targets, positions, gammas, kernel: str = KERNEL_REGULARIZED,
                        r_core: float = 0.0) -> np.ndarray:
    """Vectorized form of :func:`induced_velocity` over an (m, 2) target array."""
    targets = np.asarray(targets, dtype=float)
    out = np.zeros_like(targets)
    n = len(gammas) if gammas is not None else 0
    if n == 0:
        return out
    positions = np.asarray(positions, dtype=float).reshape(n, 2)
    gammas = np.asarray(gammas, dtype=float)
    dx = targets[:, 0:1] - positions[None, :, 0]
    dz = targets[:, 1:2] - positions[None, :, 1]
    r2 = dx * dx + dz * dz
    if kernel == KERNEL_REGULARIZED:
        coef = gammas[None, :] / (TWO_PI * np.sqrt(r2 * r2 + r_core ** 4))
    elif kernel == KERNEL_SINGULAR:
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = gammas[None, :] / (TWO_PI * r2)
        coef[r2 == 0.0] = 0.0
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    out[:, 0] = np.sum(coef * dz, axis=1)
    out[:, 1] = -np.sum(coef * dx, axis=1)
    return out


# ---------------------------------------------------------------------------
# State containers


@dataclass
class VortexParticle:
    """A free wake element: position [m], circulation [m^2/s], age [steps]."""

    position: np.ndarray
    circulation: float
    age: int = 0


class FluidState:
    """Wake particle set plus the bookkeeping vpm_step needs to be a pure function.

    Besides the particles and the active gust-ring indices, the state carries
    the previous step's bound-vortex row (positions and solved strengths) and
    the low-passed unsteady panel pressures: wake convection happens before
    the current solve and therefore uses the strengths from the last one, the
    unsteady load terms need the previous circulations, and the pressure
    filter has one step of memory.  Carrying all of it here keeps stepping
    deterministic and forkable.
    """

    __slots__ = ("wake_pos", "wake_gamma", "wake_age", "n_wake", "ring_a",
                 "ring_b", "prev_pos", "prev_gamma", "n_prev", "prev_lev_gamma",
                 "unsteady_ema", "particle_cap")

    def __init__(self, particle_cap: int, n_bound: int):
        cap = particle_cap + 4  # room for one shed pair plus one injected pair
        self.wake_pos = np.zeros((cap, 2))
        self.wake_gamma = np.zeros(cap)
        self.wake_age = np.zeros(cap, dtype=np.int64)
        self.n_wake = 0
        self.ring_a = -1
        self.ring_b = -1
        self.prev_pos = np.zeros((n_bound, 2))
        self.prev_gamma = np.zeros(n_bound)
        self.n_prev = 0
        self.prev_lev_gamma = 0.0
        self.unsteady_ema = np.zeros(n_bound)
        self.particle_cap = particle_cap

    @classmethod
    def empty(cls, cfg: VpmConfig) -> "FluidState":
        return cls(cfg.particle_cap, cfg.n_bound)

    def copy(self) -> "FluidState":
        out = FluidState.__new__(FluidState)
        out.wake_pos = self.wake_pos.copy()
        out.wake_gamma = self.wake_gamma.copy()
        out.wake_age = self.wake_age.copy()
        out.n_wake = self.n_wake
        out.ring_a = self.ring_a
        out.ring_b = self.ring_b
        out.prev_pos = self.prev_pos.copy()
        out.prev_gamma = self.prev_gamma.copy()
        out.n_prev = self.n_prev
        out.prev_lev_gamma = self.prev_lev_gamma
        out.unsteady_ema = self.unsteady_ema.copy()
        out.particle_cap = self.particle_cap
        return out

    def equals(self, other: "FluidState") -> bool:
        return (
            self.n_wake == other.n_wake
            and self.ring_a == other.ring_a
            and self.ring_b == other.ring_b
            and self.n_prev == other.n_prev
            and self.prev_lev_gamma == other.prev_lev_gamma
            and bool(np.all(self.wake_pos[: self.n_wake] == other.wake_pos[: other.n_wake]))
            and bool(np.all(self.wake_gamma[: self.n_wake] == other.wake_gamma[: other.n_wake]))
            and bool(np.all(self.wake_age[: self.n_wake] == other.wake_age[: other.n_wake]))
            and bool(np.all(self.prev_pos[: self.n_prev] == other.prev_pos[: other.n_prev]))
            and bool(np.all(self.prev_gamma[: self.n_prev] == other.prev_gamma[: other.n_prev]))
            and bool(np.all(self.unsteady_ema == other.unsteady_ema))
        )

    @property
    def disturbance(self) -> tuple[int, int] | None:
        if self.ring_a < 0:
            return None
        return (self.ring_a, self.ring_b)

    def particles(self) -> list[VortexParticle]:
        return [
            VortexParticle(self.wake_pos[i].copy(), float(self.wake_gamma[i]),
                           int(self.wake_age[i]))
            for i in range(self.n_wake)
        ]

    def append_particle(self, position, circulation: float, age: int = 0) -> int:
        i = self.n_wake
        if i >= len(self.wake_gamma):
            raise RuntimeError("wake buffer overflow")
        self.wake_pos[i] = position
        self.wake_gamma[i] = circulation
        self.wake_age[i] = age
        self.n_wake = i + 1
        return i

    def wake_circulation(self) -> float:
        return float(np.sum(self.wake_gamma[: self.n_wake]))


def fluid_from_particles(particles, cfg: VpmConfig) -> FluidState:
    fluid = FluidState.empty(cfg)
    for p in particles:
        fluid.append_particle(np.asarray(p.position, dtype=float), p.circulation, p.age)
    return fluid


@dataclass
class BoundSystem:
    """Chord geometry plus the assembled strength system.

    ``columns`` stacks the unknowns' positions: the ``n_bound`` panel
    vortices first, then (when shedding) the nose-edge and tail-edge
    candidates.  ``reversed_flow`` records which edge is upstream.
    """

    collocation: np.ndarray      # (n_bound + 1, 2)
    panel_pos: np.ndarray        # (n_bound, 2) panel-midpoint bound vortices
    lev_pos: np.ndarray          # nose-edge shed candidate
    tev_pos: np.ndarray          # tail-edge shed candidate
    tangent: np.ndarray          # unit chord direction f (nose to tail is -f)
    normal: np.ndarray
    s: float                     # panel length
    shedding: bool
    reversed_flow: bool = False
    columns: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    gamma: np.ndarray | None = None   # solved strengths, one per column

    @property
    def n_bound(self) -> int:
        return len(self.panel_pos)

    @property
    def panel_gamma(self) -> np.ndarray:
        return self.gamma[: self.n_bound]

    @property
    def lev_gamma(self) -> float:
        return float(self.gamma[self.n_bound]) if self.shedding else 0.0

    @property
    def tev_gamma(self) -> float:
        if not self.shedding:
            raise ValueError("no trailing-edge vortex in the attached system")
        return float(self.gamma[-1])

    def total_circulation(self) -> float:
        return float(np.sum(self.gamma))


def chord_frame(theta: float) -> tuple[np.ndarray, np.ndarray]:
    f = np.array([math.cos(theta), math.sin(theta)])
    n = np.array([-math.sin(theta), math.cos(theta)])
    return f, n


def build_collocation(glider, cfg: VpmConfig) -> BoundSystem:
    """Chord geometry for the current pose: collocation points, bound-vortex
    positions, and the shed-vortex candidate positions.

    The chord runs from the nose (the glider position) backward along ``-f``;
    collocation points sit at the panel edges and the bound vortices at the
    panel midpoints.  Shed candidates are offset beyond the chord ends along
    the chord line for numerical stability.
    """
    x = np.asarray(glider, dtype=float)
    r = x[0:2]
    f, n = chord_frame(x[2])
    s = cfg.panel_length
    idx = np.arange(cfg.n_bound + 1)
    collocation = r[None, :] - np.outer(idx * s, f)
    panel_pos = collocation[:-1] - 0.5 * s * f
    lev_pos = collocation[0] + cfg.shed_offset * f
    tev_pos = collocation[-1] - cfg.shed_offset * f
    return BoundSystem(collocation=collocation, panel_pos=panel_pos,
                       lev_pos=lev_pos, tev_pos=tev_pos, tangent=f, normal=n,
                       s=s, shedding=False)


def effective_wing_aoa(glider, cfg: VpmConfig) -> float:
    """Angle of attack of the wing point: pitch minus the flight-path angle of
    the relative wind, wrapped to (-pi, pi].  Zero when the wing point is at
    rest (no relative wind)."""
    x = np.asarray(glider, dtype=float)
    _, n = chord_frame(x[2])
    v_w = x[4:6] - cfg.l_w * x[6] * n
    if v_w[0] * v_w[0] + v_w[1] * v_w[1] < 1e-18:
        return 0.0
    raw = x[2] - math.atan2(v_w[1], v_w[0])
    return math.atan2(math.sin(raw), math.cos(raw))


def assemble_boundary_system(glider, fluid: FluidState, shedding: bool,
                             cfg: VpmConfig) -> BoundSystem:
    """Assemble the linear system for the bound and edge vortex strengths.

    Attached flow: the ``n_bound`` panel vortices over the collocation points
    aft of the nose.  Shedding: the edge candidates join the unknowns; the
    through-flow rows run over the collocation points aft of the upstream
    edge, the first row ties the upstream-edge vortex strength to the change
    in loading of the panel next to it (``lev_shed_gain``), and the last row
    is the Kelvin condition conserving total circulation in the fluid.
    """
    x = np.asarray(glider, dtype=float)
    sys = build_collocation(glider, cfg)
    sys.shedding = shedding
    nb = cfg.n_bound
    r, v, omega = x[0:2], x[4:6], x[6]
    aoa = effective_wing_aoa(x, cfg)
    sys.reversed_flow = abs(aoa) > 0.5 * math.pi

    if shedding:
        columns = np.vstack([sys.panel_pos, sys.lev_pos, sys.tev_pos])
        if sys.reversed_flow:
            rows = sys.collocation[:nb]            # tail point is upstream
            edge_col, edge_panel = nb + 1, nb - 1
        else:
            rows = sys.collocation[1:]             # nose point is upstream
            edge_col, edge_panel = nb, 0
    else:
        columns = sys.panel_pos.copy()
        rows = sys.collocation[1:]
    sys.columns = columns
    n_cols = len(columns)
    n_rows = nb + 2 if shedding else nb
    A = np.zeros((n_rows, n_cols))
    b = np.zeros(n_rows)
    row0 = 1 if shedding else 0

    u_wake = induced_velocity_at(rows, fluid.wake_pos[: fluid.n_wake],
                                 fluid.wake_gamma[: fluid.n_wake],
                                 KERNEL_REGULARIZED, cfg.r_core)
    for i in range(len(rows)):
        c = rows[i]
        # all unknowns are plate-attached at this instant, so their influence
        # on the collocation rows keeps the point-vortex kernel; the smoothed
        # kernel applies once particles are free wake
        for j in range(n_cols):
            A[row0 + i, j] = singular_kernel_velocity(columns[j], 1.0, c) @ sys.normal
        surface_vel = v + omega * perp(c - r)
        b[row0 + i] = (surface_vel - u_wake[i]) @ sys.normal

    if shedding:
        prev_edge_panel = fluid.prev_gamma[edge_panel] if fluid.n_prev else 0.0
        A[0, edge_col] = 1.0
        A[0, edge_panel] = cfg.lev_shed_gain
        b[0] = cfg.lev_shed_gain * prev_edge_panel
        A[nb + 1, :] = 1.0
        b[nb + 1] = -fluid.wake_circulation()

    sys.A = A
    sys.b = b
    return sys


def solve_strengths(system: BoundSystem) -> np.ndarray:
    """LU-solve the assembled system and store the strengths on the system."""
    if system.A is None:
        raise ValueError("system not assembled")
    try:
        gamma = np.linalg.solve(system.A, system.b)
    except np.linalg.LinAlgError as err:
        raise BoundarySolveError(f"boundary system is singular: {err}") from err
    if not np.all(np.isfinite(gamma)):
        raise BoundarySolveError("boundary solve produced non-finite strengths")
    system.gamma = gamma
    return gamma


def convect_and_dissipate(fluid: FluidState, cfg: VpmConfig) -> FluidState:
    """Advance the wake one Euler step and apply the dissipation factor.

    Each particle moves under the smoothed-kernel velocity of every other
    wake particle plus the previous step's bound vortices (carried on the
    fluid state); self-induction is zero.  Ages increment.
    """
    out = fluid.copy()
    n = fluid.n_wake
    if n > 0:
        pos = fluid.wake_pos[:n]
        vel = induced_velocity_at(pos, fluid.wake_pos[:n], fluid.wake_gamma[:n],
                                  KERNEL_REGULARIZED, cfg.r_core)
        if fluid.n_prev > 0:
            vel += induced_velocity_at(pos, fluid.prev_pos[: fluid.n_prev],
                                       fluid.prev_gamma[: fluid.n_prev],
                                       KERNEL_REGULARIZED, cfg.r_core)
        out.wake_pos[:n] = pos + cfg.dt * vel
        out.wake_gamma[:n] = cfg.k_dissipation * fluid.wake_gamma[:n]
        out.wake_age[:n] = fluid.wake_age[:n] + 1
    return out


def shed_and_gate(fluid: FluidState, system: BoundSystem, effective_aoa: float,
                  cfg: VpmConfig) -> tuple[FluidState, bool]:
    """Append the solved edge vortices to the wake when the stall gate is open.

    Shedding only happens past the critical angle of attack; below it the
    attached (no-edge-vortex) system applies and the wake is left alone.
    """
    shed = abs(effective_aoa) > cfg.critical_aoa
    if not shed:
        return fluid, False
    if not system.shedding or system.gamma is None:
        raise ValueError("gate open but system was not solved with shedding enabled")
    out = fluid.copy()
    out.append_particle(system.lev_pos, system.lev_gamma, age=0)
    out.append_particle(system.tev_pos, system.tev_gamma, age=0)
    return out, True


def merge_oldest(fluid: FluidState, cfg: VpmConfig) -> FluidState:
    """Merge the two oldest particles (mean position, summed strength) until
    the wake fits the particle cap.  Active gust-ring cores are exempt: merging
    an equal-and-opposite pair would annihilate the modeled disturbance."""
    out = fluid.copy()
    while out.n_wake > out.particle_cap:
        n = out.n_wake
        order = [i for i in range(n) if i != out.ring_a and i != out.ring_b]
        order.sort(key=lambda i: (-out.wake_age[i], i))
        if len(order) < 2:
            break
        ia, ib = sorted(order[:2])
        out.wake_pos[ia] = 0.5 * (out.wake_pos[ia] + out.wake_pos[ib])
        out.wake_gamma[ia] = out.wake_gamma[ia] + out.wake_gamma[ib]
        out.wake_age[ia] = max(out.wake_age[ia], out.wake_age[ib])
        _remove_particle(out, ib)
    return out


def _remove_particle(fluid: FluidState, idx: int) -> None:
    n = fluid.n_wake
    fluid.wake_pos[idx : n - 1] = fluid.wake_pos[idx + 1 : n]
    fluid.wake_gamma[idx : n - 1] = fluid.wake_gamma[idx + 1 : n]
    fluid.wake_age[idx : n - 1] = fluid.wake_age[idx + 1 : n]
    fluid.n_wake = n - 1
    for attr in ("ring_a", "ring_b"):
        r = getattr(fluid, attr)
        if r == idx:
            setattr(fluid, attr, -1)
        elif r > idx:
            setattr(fluid, attr, r - 1)


# ---------------------------------------------------------------------------
# Gust ring


@dataclass
class RingDisturbance:
    """Planarized gust ring: a counter-rotating pair that self-advects along x.

    ``circulation`` is the (positive) strength magnitude; the pair orientation
    is chosen from the travel direction.  ``from_speed`` inverts the smoothed
    pair-advection relation v = G d / (2 pi sqrt(d^4 + r_core^4)) so the pair
    translates at the characterized speed.
    """

    center: np.ndarray
    speed: float
    separation: float
    r_core: float
    circulation: float
    direction: float = 1.0

    @classmethod
    def from_speed(cls, center, speed: float, separation: float, r_core: float,
                   direction: float = 1.0) -> "RingDisturbance":
        circulation = ring_circulation_for_speed(speed, separation, r_core)
        return cls(center=np.asarray(center, dtype=float), speed=speed,
                   separation=separation, r_core=r_core,
                   circulation=circulation, direction=direction)


def ring_circulation_for_speed(speed: float, separation: float, r_core: float) -> float:
    """Strength giving a counter-rotating pair the requested translation speed
    under the smoothed kernel (reduces to v * 2 pi d for d >> r_core)."""
    d = separation
    return speed * TWO_PI * math.sqrt(d ** 4 + r_core ** 4) / d


def inject_ring(fluid: FluidState, ring: RingDisturbance) -> FluidState:
    """Add the ring pair to the wake and record the protected core indices.

    For travel along +x the upper core is negative and the lower positive;
    the orientation flips with ``direction``.
    """
    if fluid.disturbance is not None:
        raise ValueError("a ring disturbance is already active")
    out = fluid.copy()
    half = 0.5 * ring.separation
    sign = 1.0 if ring.direction >= 0 else -1.0
    top = ring.center + np.array([0.0, half])
    bot = ring.center - np.array([0.0, half])
    ia = out.append_particle(top, -sign * ring.circulation, age=0)
    ib = out.append_particle(bot, +sign * ring.circulation, age=0)
    out.ring_a = ia
    out.ring_b = ib
    return out


def terminate_ring(fluid: FluidState, glider, cfg: VpmConfig) -> FluidState:
    """Remove the ring pair once the segment joining the cores crosses the
    chord line (offset slightly against the surface normal), preventing
    non-physical core/plate interaction.  Total circulation change is zero."""
    if fluid.disturbance is None:
        return fluid
    x = np.asarray(glider, dtype=float)
    f, n = chord_frame(x[2])
    offset = -0.02 * cfg.l_chord * n
    p0 = x[0:2] + offset
    p1 = x[0:2] - cfg.l_chord * f + offset
    a = fluid.wake_pos[fluid.ring_a]
    b = fluid.wake_pos[fluid.ring_b]
    if not _segments_intersect(a, b, p0, p1):
        return fluid
    out = fluid.copy()
    hi, lo = max(out.ring_a, out.ring_b), min(out.ring_a, out.ring_b)
    _remove_particle(out, hi)
    _remove_particle(out, lo)
    out.ring_a = -1
    out.ring_b = -1
    return out


def _segments_intersect(a0, a1, b0, b1) -> bool:
    """Proper segment-segment intersection; parallel/degenerate pairs report False."""
    d1 = a1 - a0
    d2 = b1 - b0
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if denom == 0.0:
        return False
    diff = b0 - a0
    t = (diff[0] * d2[1] - diff[1] * d2[0]) / denom
    u = (diff[0] * d1[1] - diff[1] * d1[0]) / denom
    return 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0


# ---------------------------------------------------------------------------
# Loads


def compute_loads(system: BoundSystem, fluid: FluidState, glider,
                  prev_panel_gamma: np.ndarray | None, prev_lev_gamma: float,
                  unsteady_ema: np.ndarray | None,
                  cfg: VpmConfig) -> tuple[np.ndarray, float, np.ndarray]:
    """Panel pressure loads from the unsteady Bernoulli relation.

    Per panel: circulatory term (tangential relative flow times strength)
    plus the rate of change of the cumulative bound circulation and of the
    nose-edge vortex strength, backward-differenced over the step and passed
    through a first-order low-pass (``unsteady_smoothing``).  The filter has
    unit DC gain, so steady loads are untouched; without it the explicit
    circulation-rate force feeds back on the pitch dynamics hard enough to
    blow up the coupled simulation (the loose-coupling added-mass
    instability).  On the first step the unsteady terms are zero.

    The force acts along the surface normal; the moment is taken about the
    wing reference point.  Returns ``(force, moment, new_ema)``.
    """
    x = np.asarray(glider, dtype=float)
    r, v, omega = x[0:2], x[4:6], x[6]
    nb = system.n_bound
    f, n = system.tangent, system.normal

    u_wake = induced_velocity_at(system.panel_pos, fluid.wake_pos[: fluid.n_wake],
                                 fluid.wake_gamma[: fluid.n_wake],
                                 KERNEL_REGULARIZED, cfg.r_core)
    gamma = system.panel_gamma
    partial = np.cumsum(gamma)
    if prev_panel_gamma is None:
        dp_raw = np.zeros(nb)
    else:
        d_lev = (system.lev_gamma - prev_lev_gamma) / cfg.dt
        dp_raw = (partial - np.cumsum(prev_panel_gamma)) / cfg.dt + d_lev
    eta = cfg.unsteady_smoothing
    prev_ema = unsteady_ema if unsteady_ema is not None else np.zeros(nb)
    ema = eta * dp_raw + (1.0 - eta) * prev_ema

    x_w = r - cfg.l_w * f
    force = np.zeros(2)
    moment = 0.0
    for i in range(nb):
        p = system.panel_pos[i]
        surface_vel = v + omega * perp(p - r)
        beta = (u_wake[i] - surface_vel) @ f
        dp = cfg.rho * (beta * gamma[i] / system.s + ema[i])
        panel_force = dp * system.s * n
        force += panel_force
        moment += cross2(p - x_w, panel_force)
    return force, moment, ema


# ---------------------------------------------------------------------------
# Full step


def vpm_step(glider, fluid: FluidState, cfg: VpmConfig) -> tuple[np.ndarray, float, FluidState]:
    """One wake update around a prescribed glider state.

    Order: convect/dissipate, rebuild geometry, assemble and solve the
    boundary system (shedding gated on the wing angle of attack), shed,
    merge down to the cap, ring termination check, then surface loads.
    Returns the wing force, the moment about the wing point, and the new
    fluid state; pure in all inputs.
    """
    x = np.asarray(glider, dtype=float)
    had_prev = fluid.n_prev > 0
    prev_panel = fluid.prev_gamma.copy() if had_prev else None
    prev_lev = fluid.prev_lev_gamma
    prev_ema = fluid.unsteady_ema if had_prev else None

    out = convect_and_dissipate(fluid, cfg)
    aoa = effective_wing_aoa(x, cfg)
    shedding = abs(aoa) > cfg.critical_aoa
    system = assemble_boundary_system(x, out, shedding, cfg)
    solve_strengths(system)
    out, _ = shed_and_gate(out, system, aoa, cfg)
    out = merge_oldest(out, cfg)
    out = terminate_ring(out, x, cfg)
    force, moment, ema = compute_loads(system, out, x, prev_panel, prev_lev,
                                       prev_ema, cfg)

    # record this solve for the next step's convection and load differences;
    # shed edge vortices now live in the wake, so keep only the panel row
    nb = cfg.n_bound
    out.n_prev = nb
    out.prev_pos[:] = system.columns[:nb]
    out.prev_gamma[:] = system.gamma[:nb]
    out.prev_lev_gamma = system.lev_gamma
    out.unsteady_ema = ema
    return force, moment, out
