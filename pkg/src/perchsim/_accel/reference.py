"""Pure-numpy stepping backend.

Same call signatures as the compiled core (flat arrays in, flat arrays out);
physics delegated to :mod:`perchsim.vpm` and :mod:`perchsim.glider`, which
are the readable specification.  Batches run sequentially: at these particle
counts Python-level threads cannot help, and sequential evaluation keeps the
batch trivially bit-identical to one-at-a-time calls.
"""

from __future__ import annotations

import numpy as np

from .. import glider as glider_mod
from .. import vpm
from ..config import (FP_CRIT_AOA, FP_DT, FP_ETA, FP_G, FP_I, FP_K_DISS,
                      FP_L, FP_L_CHORD, FP_L_E, FP_L_W, FP_LEV_GAIN, FP_M,
                      FP_PHI_LIM, FP_R_CORE, FP_RHO, FP_S_E, FP_SHED_OFF,
                      FP_U_LIM, GliderParams, VpmConfig)

BLOWUP_OMEGA = 300.0
BLOWUP_SPEED = 80.0


def _unpack(iparams, fparams) -> tuple[VpmConfig, GliderParams]:
    fp = np.asarray(fparams, dtype=float)
    vcfg = VpmConfig(
        n_bound=int(iparams[0]), r_core=fp[FP_R_CORE], k_dissipation=fp[FP_K_DISS],
        shed_offset=fp[FP_SHED_OFF], critical_aoa=fp[FP_CRIT_AOA],
        particle_cap=int(iparams[1]), rho=fp[FP_RHO], dt=fp[FP_DT],
        l_chord=fp[FP_L_CHORD], l_w=fp[FP_L_W], lev_shed_gain=fp[FP_LEV_GAIN],
        unsteady_smoothing=fp[FP_ETA],
    )
    gp = GliderParams(
        m=fp[FP_M], inertia=fp[FP_I], g=fp[FP_G], l=fp[FP_L], l_w=fp[FP_L_W],
        l_e=fp[FP_L_E], l_chord=fp[FP_L_CHORD], s_e=fp[FP_S_E], rho=fp[FP_RHO],
        phi_limit=fp[FP_PHI_LIM], u_limit=fp[FP_U_LIM],
    )
    return vcfg, gp


def _fluid_from_flat(wake_pos, wake_gamma, wake_age, n_wake, ring_a, ring_b,
                     prev_pos, prev_gamma, n_prev, prev_lev, ema,
                     cfg: VpmConfig) -> vpm.FluidState:
    f = vpm.FluidState.empty(cfg)
    f.wake_pos[:n_wake] = wake_pos[:n_wake]
    f.wake_gamma[:n_wake] = wake_gamma[:n_wake]
    f.wake_age[:n_wake] = wake_age[:n_wake]
    f.n_wake = int(n_wake)
    f.ring_a = int(ring_a)
    f.ring_b = int(ring_b)
    f.prev_pos[:n_prev] = prev_pos[:n_prev]
    f.prev_gamma[:n_prev] = prev_gamma[:n_prev]
    f.n_prev = int(n_prev)
    f.prev_lev_gamma = float(prev_lev)
    f.unsteady_ema[:] = ema
    return f


def _fluid_to_flat(f: vpm.FluidState):
    return (f.wake_pos, f.wake_gamma, f.wake_age, f.n_wake, f.ring_a, f.ring_b,
            f.prev_pos, f.prev_gamma, f.n_prev, f.prev_lev_gamma, f.unsteady_ema)


def step(x, u, wake_pos, wake_gamma, wake_age, n_wake, ring_a, ring_b,
         prev_pos, prev_gamma, n_prev, prev_lev, ema, iparams, fparams,
         integrate):
    cfg, gp = _unpack(iparams, fparams)
    fluid = _fluid_from_flat(wake_pos, wake_gamma, wake_age, n_wake, ring_a,
                             ring_b, prev_pos, prev_gamma, n_prev, prev_lev,
                             ema, cfg)
    x = np.asarray(x, dtype=float)
    try:
        if integrate:
            x_new, fluid_new, fw, mw = glider_mod.step_with_loads(x, u, fluid, gp, cfg)
        else:
            fw, mw, fluid_new = vpm.vpm_step(x, fluid, cfg)
            x_new = x.copy()
    except (vpm.BoundarySolveError, vpm.SingularKernelError):
        return 1, x.copy(), np.zeros(2), 0.0, _fluid_to_flat(fluid)
    rc = 0 if np.all(np.isfinite(x_new)) else 2
    return rc, x_new, fw, mw, _fluid_to_flat(fluid_new)


def rollout(x0, controls, wake_pos, wake_gamma, wake_age, n_wake, ring_a,
            ring_b, prev_pos, prev_gamma, n_prev, prev_lev, ema, iparams,
            fparams, record, return_fluid):
    cfg, gp = _unpack(iparams, fparams)
    fluid = _fluid_from_flat(wake_pos, wake_gamma, wake_age, n_wake, ring_a,
                             ring_b, prev_pos, prev_gamma, n_prev, prev_lev,
                             ema, cfg)
    x = np.asarray(x0, dtype=float).copy()
    T = len(controls)
    traj = np.zeros((T + 1, 7)) if record else None
    if record:
        traj[0] = x
    rc = 0
    for t in range(T):
        try:
            x, fluid, _ = glider_mod.step(x, controls[t], fluid, gp, cfg)
        except (vpm.BoundarySolveError, vpm.SingularKernelError):
            rc = 1 + t
            break
        if (not np.all(np.isfinite(x)) or abs(x[6]) > BLOWUP_OMEGA
                or np.max(np.abs(x[4:6])) > BLOWUP_SPEED):
            rc = 1 + t
            break
        if record:
            traj[t + 1] = x
    out = traj if record else x
    return rc, out, (_fluid_to_flat(fluid) if return_fluid else None)


def batch_rollout(x0, controls, wake_pos, wake_gamma, wake_age, n_wake,
                  ring_a, ring_b, prev_pos, prev_gamma, n_prev, prev_lev,
                  ema, iparams, fparams, record, workers):
    cfg, gp = _unpack(iparams, fparams)
    controls = np.asarray(controls, dtype=float)
    B, T = controls.shape
    status = np.zeros(B, dtype=np.int64)
    finals = np.zeros((B, 7))
    trajs = np.zeros((B, T + 1, 7)) if record else None
    for b in range(B):
        fluid = _fluid_from_flat(wake_pos, wake_gamma, wake_age, n_wake,
                                 ring_a, ring_b, prev_pos, prev_gamma, n_prev,
                                 prev_lev, ema, cfg)
        x = np.asarray(x0, dtype=float).copy()
        if record:
            trajs[b, 0] = x
        rc = 0
        for t in range(T):
            try:
                x, fluid, _ = glider_mod.step(x, controls[b, t], fluid, gp, cfg)
            except (vpm.BoundarySolveError, vpm.SingularKernelError):
                rc = 1 + t
                break
            if (not np.all(np.isfinite(x)) or abs(x[6]) > BLOWUP_OMEGA
                    or np.max(np.abs(x[4:6])) > BLOWUP_SPEED):
                rc = 1 + t
                break
            if record:
                trajs[b, t + 1] = x
        status[b] = rc
        finals[b] = x
    return status, finals, trajs


def omp_threads() -> int:
    return 1
