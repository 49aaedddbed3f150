# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled stepping core: coupled glider + vortex-wake dynamics.

Mirrors the numpy reference (`perchsim.vpm` / `perchsim.glider`) formula for
formula; the reference module is the readable specification of the physics.
Exposes single steps, open-loop rollouts, and OpenMP-parallel batched
rollouts that are bit-identical to sequential evaluation (each rollout owns
private scratch and a fixed arithmetic order).
"""

from libc.math cimport sin, cos, atan2, sqrt, fabs, isfinite, M_PI

cimport cython
from cython.parallel cimport prange
cimport openmp

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef enum:
    MAXNB = 64
    MAXW = 1028          # particle cap + 4, upper bound

cdef double TWO_PI = 6.283185307179586476925286766559

# fparams packing order; must match perchsim.config
cdef enum:
    FP_R_CORE, FP_K_DISS, FP_SHED_OFF, FP_CRIT_AOA, FP_RHO, FP_DT, FP_M, FP_I, \
    FP_G, FP_L, FP_L_W, FP_L_E, FP_L_CHORD, FP_S_E, FP_PHI_LIM, FP_U_LIM, \
    FP_LEV_GAIN, FP_ETA

# rollout containment thresholds (states far outside the flight envelope)
cdef double BLOWUP_OMEGA = 300.0
cdef double BLOWUP_SPEED = 80.0


cdef struct Par:
    int nb
    int cap
    double r_core, k_diss, shed_off, crit_aoa, rho, dt
    double m, inertia, g, l, l_w, l_e, l_chord, s_e, phi_lim, u_lim
    double lev_gain, eta
    double rc4


cdef struct Fluid:
    # pointers into per-rollout buffers owned by the caller
    double* wx
    double* wz
    double* wg
    double* wage
    int n
    int ring_a
    int ring_b
    double* px      # previous panel vortex positions / strengths
    double* pz
    double* pg
    int n_prev
    double prev_lev
    double* ema


cdef inline void fill_par(Par* p, const long long* ip, const double* fp) noexcept nogil:
    p.nb = <int> ip[0]
    p.cap = <int> ip[1]
    p.r_core = fp[FP_R_CORE]
    p.k_diss = fp[FP_K_DISS]
    p.shed_off = fp[FP_SHED_OFF]
    p.crit_aoa = fp[FP_CRIT_AOA]
    p.rho = fp[FP_RHO]
    p.dt = fp[FP_DT]
    p.m = fp[FP_M]
    p.inertia = fp[FP_I]
    p.g = fp[FP_G]
    p.l = fp[FP_L]
    p.l_w = fp[FP_L_W]
    p.l_e = fp[FP_L_E]
    p.l_chord = fp[FP_L_CHORD]
    p.s_e = fp[FP_S_E]
    p.phi_lim = fp[FP_PHI_LIM]
    p.u_lim = fp[FP_U_LIM]
    p.lev_gain = fp[FP_LEV_GAIN]
    p.eta = fp[FP_ETA]
    p.rc4 = p.r_core * p.r_core * p.r_core * p.r_core


cdef inline void reg_kn(double sx, double sz, double gam, double tx, double tz,
                        double rc4, double* ox, double* oz) noexcept nogil:
    # smoothed kernel velocity of a vortex at (sx, sz) evaluated at (tx, tz)
    cdef double dx = tx - sx
    cdef double dz = tz - sz
    cdef double r2 = dx * dx + dz * dz
    cdef double c = gam / (TWO_PI * sqrt(r2 * r2 + rc4))
    ox[0] += c * dz
    oz[0] -= c * dx


cdef int lu_solve_small(double* a, double* b, int n) noexcept nogil:
    # dense LU with partial pivoting, column-major a (n x n); solution in b.
    # returns 0 on success, 1 when a pivot vanishes (singular system).
    cdef int i, j, k, piv
    cdef double amax, tmp, factor
    for k in range(n):
        piv = k
        amax = fabs(a[k * n + k])
        for i in range(k + 1, n):
            if fabs(a[k * n + i]) > amax:
                amax = fabs(a[k * n + i])
                piv = i
        if amax == 0.0:
            return 1
        if piv != k:
            for j in range(n):
                tmp = a[j * n + k]
                a[j * n + k] = a[j * n + piv]
                a[j * n + piv] = tmp
            tmp = b[k]
            b[k] = b[piv]
            b[piv] = tmp
        for i in range(k + 1, n):
            factor = a[k * n + i] / a[k * n + k]
            a[k * n + i] = factor
            for j in range(k + 1, n):
                a[j * n + i] -= factor * a[j * n + k]
            b[i] -= factor * b[k]
    for k in range(n - 1, -1, -1):
        for j in range(k + 1, n):
            b[k] -= a[j * n + k] * b[j]
        b[k] /= a[k * n + k]
    return 0


cdef inline double sing_dot_n(double sx, double sz, double tx, double tz,
                              double nx, double nz) noexcept nogil:
    # unit-strength point-vortex velocity at the target, dotted with n
    cdef double dx = tx - sx
    cdef double dz = tz - sz
    cdef double r2 = dx * dx + dz * dz
    return (dz * nx - dx * nz) / (TWO_PI * r2)


cdef inline bint seg_intersect(double ax0, double az0, double ax1, double az1,
                               double bx0, double bz0, double bx1, double bz1) noexcept nogil:
    cdef double d1x = ax1 - ax0, d1z = az1 - az0
    cdef double d2x = bx1 - bx0, d2z = bz1 - bz0
    cdef double denom = d1x * d2z - d1z * d2x
    if denom == 0.0:
        return 0
    cdef double fx = bx0 - ax0, fz = bz0 - az0
    cdef double t = (fx * d2z - fz * d2x) / denom
    cdef double u = (fx * d1z - fz * d1x) / denom
    return 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0


cdef void remove_particle(Fluid* f, int idx) noexcept nogil:
    cdef int i
    for i in range(idx, f.n - 1):
        f.wx[i] = f.wx[i + 1]
        f.wz[i] = f.wz[i + 1]
        f.wg[i] = f.wg[i + 1]
        f.wage[i] = f.wage[i + 1]
    f.n -= 1
    if f.ring_a == idx:
        f.ring_a = -1
    elif f.ring_a > idx:
        f.ring_a -= 1
    if f.ring_b == idx:
        f.ring_b = -1
    elif f.ring_b > idx:
        f.ring_b -= 1


cdef int step_core(double* x, double u, Fluid* f, Par* p,
                   double* fw_out, double* mw_out, bint integrate) noexcept nogil:
    """One coupled step; returns 0 on success, 1 on solver failure,
    2 on non-finite output.  Mutates x (if integrate) and the fluid buffers."""
    cdef int nb = p.nb
    cdef int i, j, k, n, info
    cdef double dt = p.dt

    # --- clamp input
    if u > p.u_lim:
        u = p.u_lim
    elif u < -p.u_lim:
        u = -p.u_lim

    cdef double rx = x[0], rz = x[1], th = x[2], phi = x[3]
    cdef double vx = x[4], vz = x[5], om = x[6]

    # --- convect and dissipate (previous-solve bound row + wake)
    cdef double velx[MAXW]
    cdef double velz[MAXW]
    cdef double ox, oz
    cdef double dxp, dzp, r2p, invp, ci, cj
    n = f.n
    if n > 0:
        for i in range(n):
            velx[i] = 0.0
            velz[i] = 0.0
        # wake-wake interactions share the pair denominator
        for i in range(n):
            for j in range(i + 1, n):
                dxp = f.wx[j] - f.wx[i]
                dzp = f.wz[j] - f.wz[i]
                r2p = dxp * dxp + dzp * dzp
                invp = 1.0 / (TWO_PI * sqrt(r2p * r2p + p.rc4))
                ci = f.wg[i] * invp
                cj = f.wg[j] * invp
                velx[j] += ci * dzp
                velz[j] -= ci * dxp
                velx[i] -= cj * dzp
                velz[i] += cj * dxp
        for i in range(n):
            ox = 0.0
            oz = 0.0
            for j in range(f.n_prev):
                reg_kn(f.px[j], f.pz[j], f.pg[j], f.wx[i], f.wz[i], p.rc4, &ox, &oz)
            velx[i] += ox
            velz[i] += oz
        for i in range(n):
            f.wx[i] += dt * velx[i]
            f.wz[i] += dt * velz[i]
            f.wg[i] *= p.k_diss
            f.wage[i] += 1.0

    # --- geometry
    cdef double fx = cos(th), fz = sin(th)
    cdef double nx = -sin(th), nz = cos(th)
    cdef double s = p.l_chord / nb
    cdef double collx[MAXNB + 1]
    cdef double collz[MAXNB + 1]
    cdef double panx[MAXNB]
    cdef double panz[MAXNB]
    for i in range(nb + 1):
        collx[i] = rx - fx * s * i
        collz[i] = rz - fz * s * i
    for j in range(nb):
        panx[j] = collx[j] - 0.5 * s * fx
        panz[j] = collz[j] - 0.5 * s * fz
    cdef double levx = collx[0] + p.shed_off * fx
    cdef double levz = collz[0] + p.shed_off * fz
    cdef double tevx = collx[nb] - p.shed_off * fx
    cdef double tevz = collz[nb] - p.shed_off * fz

    # --- effective wing angle of attack (wrapped)
    cdef double vwx = vx - p.l_w * om * nx
    cdef double vwz = vz - p.l_w * om * nz
    cdef double aoa = 0.0
    cdef double raw
    if vwx * vwx + vwz * vwz >= 1e-18:
        raw = th - atan2(vwz, vwx)
        aoa = atan2(sin(raw), cos(raw))
    cdef bint shedding = fabs(aoa) > p.crit_aoa
    cdef bint rev = fabs(aoa) > 0.5 * M_PI

    # --- assemble (column-major for LAPACK) and solve
    cdef double A[(MAXNB + 2) * (MAXNB + 2)]
    cdef double gam[MAXNB + 2]
    cdef int nsys = nb + 2 if shedding else nb
    cdef int row0 = 1 if shedding else 0
    cdef int ncoll = nb          # through-flow rows in both modes
    cdef int ri, edge_col, edge_panel
    cdef double cxx, czz, uwx, uwz, sv_x, sv_z
    cdef double colx_j, colz_j

    for i in range(nsys * nsys):
        A[i] = 0.0
    for i in range(nsys):
        gam[i] = 0.0

    for i in range(ncoll):
        # upstream edge point is skipped: nose forward, tail in reversed flow
        ri = i if (shedding and rev) else i + 1
        cxx = collx[ri]
        czz = collz[ri]
        uwx = 0.0
        uwz = 0.0
        for j in range(f.n):
            reg_kn(f.wx[j], f.wz[j], f.wg[j], cxx, czz, p.rc4, &uwx, &uwz)
        for j in range(nsys):
            if j < nb:
                colx_j = panx[j]
                colz_j = panz[j]
            elif j == nb:
                colx_j = levx
                colz_j = levz
            else:
                colx_j = tevx
                colz_j = tevz
            A[j * nsys + (row0 + i)] = sing_dot_n(colx_j, colz_j, cxx, czz, nx, nz)
        # surface velocity of the collocation point: v + om * perp(c - r)
        sv_x = vx + om * (-(czz - rz))
        sv_z = vz + om * (cxx - rx)
        gam[row0 + i] = (sv_x - uwx) * nx + (sv_z - uwz) * nz

    if shedding:
        if rev:
            edge_col = nb + 1
            edge_panel = nb - 1
        else:
            edge_col = nb
            edge_panel = 0
        A[edge_col * nsys + 0] = 1.0
        A[edge_panel * nsys + 0] = p.lev_gain
        gam[0] = p.lev_gain * (f.pg[edge_panel] if f.n_prev > 0 else 0.0)
        for j in range(nsys):
            A[j * nsys + (nb + 1)] = 1.0
        ox = 0.0
        for j in range(f.n):
            ox += f.wg[j]
        gam[nb + 1] = -ox

    info = lu_solve_small(A, gam, nsys)
    if info != 0:
        return 1
    for i in range(nsys):
        if not isfinite(gam[i]):
            return 2

    # --- shed through the gate
    cdef double lev_gamma = gam[nb] if shedding else 0.0
    if shedding:
        f.wx[f.n] = levx
        f.wz[f.n] = levz
        f.wg[f.n] = gam[nb]
        f.wage[f.n] = 0.0
        f.n += 1
        f.wx[f.n] = tevx
        f.wz[f.n] = tevz
        f.wg[f.n] = gam[nb + 1]
        f.wage[f.n] = 0.0
        f.n += 1

    # --- merge the two oldest down to the cap (ring cores exempt)
    cdef int ia, ib, lo, hi
    while f.n > p.cap:
        ia = -1
        ib = -1
        for i in range(f.n):
            if i == f.ring_a or i == f.ring_b:
                continue
            if ia < 0 or f.wage[i] > f.wage[ia]:
                ib = ia
                ia = i
            elif ib < 0 or f.wage[i] > f.wage[ib]:
                ib = i
        if ia < 0 or ib < 0:
            break
        lo = ia if ia < ib else ib
        hi = ib if ia < ib else ia
        f.wx[lo] = 0.5 * (f.wx[lo] + f.wx[hi])
        f.wz[lo] = 0.5 * (f.wz[lo] + f.wz[hi])
        f.wg[lo] = f.wg[lo] + f.wg[hi]
        f.wage[lo] = f.wage[lo] if f.wage[lo] > f.wage[hi] else f.wage[hi]
        remove_particle(f, hi)

    # --- ring termination against the offset chord segment
    cdef double offx, offz
    if f.ring_a >= 0 and f.ring_b >= 0:
        offx = -0.02 * p.l_chord * nx
        offz = -0.02 * p.l_chord * nz
        if seg_intersect(f.wx[f.ring_a], f.wz[f.ring_a],
                         f.wx[f.ring_b], f.wz[f.ring_b],
                         rx + offx, rz + offz,
                         rx - p.l_chord * fx + offx, rz - p.l_chord * fz + offz):
            hi = f.ring_a if f.ring_a > f.ring_b else f.ring_b
            lo = f.ring_b if f.ring_a > f.ring_b else f.ring_a
            remove_particle(f, hi)
            remove_particle(f, lo)
            f.ring_a = -1
            f.ring_b = -1

    # --- unsteady Bernoulli loads about the wing point
    cdef double partial = 0.0, partial_prev = 0.0
    cdef double d_lev = 0.0
    cdef double dp_raw, ema_i, beta, dp, pf_x, pf_z
    cdef double fw_x = 0.0, fw_z = 0.0, mw = 0.0
    cdef double xw_x = rx - p.l_w * fx
    cdef double xw_z = rz - p.l_w * fz
    cdef bint has_prev = f.n_prev > 0
    if has_prev:
        d_lev = (lev_gamma - f.prev_lev) / dt
    for i in range(nb):
        uwx = 0.0
        uwz = 0.0
        for j in range(f.n):
            reg_kn(f.wx[j], f.wz[j], f.wg[j], panx[i], panz[i], p.rc4, &uwx, &uwz)
        partial += gam[i]
        if has_prev:
            partial_prev += f.pg[i]
            dp_raw = (partial - partial_prev) / dt + d_lev
        else:
            dp_raw = 0.0
        ema_i = p.eta * dp_raw + (1.0 - p.eta) * (f.ema[i] if has_prev else 0.0)
        f.ema[i] = ema_i
        sv_x = vx + om * (-(panz[i] - rz))
        sv_z = vz + om * (panx[i] - rx)
        beta = (uwx - sv_x) * fx + (uwz - sv_z) * fz
        dp = p.rho * (beta * gam[i] / s + ema_i)
        pf_x = dp * s * nx
        pf_z = dp * s * nz
        fw_x += pf_x
        fw_z += pf_z
        mw += (panx[i] - xw_x) * pf_z - (panz[i] - xw_z) * pf_x

    fw_out[0] = fw_x
    fw_out[1] = fw_z
    mw_out[0] = mw

    # --- store this solve for the next step
    for i in range(nb):
        f.px[i] = panx[i]
        f.pz[i] = panz[i]
        f.pg[i] = gam[i]
    f.n_prev = nb
    f.prev_lev = lev_gamma

    if not integrate:
        return 0

    # --- elevator force (flat-plate normal-force law)
    cdef double fex = cos(th + phi), fez = sin(th + phi)
    cdef double nex = -sin(th + phi), nez = cos(th + phi)
    cdef double xe_x = rx - p.l * fx - p.l_e * fex
    cdef double xe_z = rz - p.l * fz - p.l_e * fez
    cdef double ve_x = vx - p.l * om * nx - p.l_e * (om + u) * nex
    cdef double ve_z = vz - p.l * om * nz - p.l_e * (om + u) * nez
    cdef double speed2 = ve_x * ve_x + ve_z * ve_z
    cdef double fe_x = 0.0, fe_z = 0.0
    cdef double alpha_e, cn
    if speed2 >= 1e-18:
        alpha_e = th + phi - atan2(ve_z, ve_x)
        cn = 0.5 * p.rho * speed2 * p.s_e * 2.0 * sin(alpha_e)
        fe_x = cn * nex
        fe_z = cn * nez

    # --- accelerations; wing moment transported to the center of mass
    cdef double ax = (fw_x + fe_x) / p.m
    cdef double az = (fw_z + fe_z) / p.m - p.g
    cdef double torque = mw + ((xw_x - rx) * fw_z - (xw_z - rz) * fw_x) \
        + ((xe_x - rx) * fe_z - (xe_z - rz) * fe_x)
    cdef double omdot = torque / p.inertia

    # --- forward Euler
    x[0] = rx + dt * vx
    x[1] = rz + dt * vz
    x[2] = th + dt * om
    x[3] = phi + dt * u
    if x[3] > p.phi_lim:
        x[3] = p.phi_lim
    elif x[3] < -p.phi_lim:
        x[3] = -p.phi_lim
    x[4] = vx + dt * ax
    x[5] = vz + dt * az
    x[6] = om + dt * omdot

    for i in range(7):
        if not isfinite(x[i]):
            return 2
    return 0


cdef int run_rollout(double* x, double* controls, int T, Fluid* f, Par* p,
                     double* traj, double* forces) noexcept nogil:
    """Open-loop rollout from the state/fluid buffers in place.

    Returns 0 on success, or 1 + (index of the failing step) when the step
    fails or the state leaves the containment envelope.  ``traj`` (optional)
    receives (T+1, 7) states; ``forces`` (optional) receives (T, 2) loads.
    """
    cdef int t, i, rc
    cdef double fw[2]
    cdef double mw
    if traj != NULL:
        for i in range(7):
            traj[i] = x[i]
    for t in range(T):
        rc = step_core(x, controls[t], f, p, fw, &mw, 1)
        if rc != 0:
            return 1 + t
        if fabs(x[6]) > BLOWUP_OMEGA or fabs(x[4]) > BLOWUP_SPEED or fabs(x[5]) > BLOWUP_SPEED:
            return 1 + t
        if traj != NULL:
            for i in range(7):
                traj[(t + 1) * 7 + i] = x[i]
        if forces != NULL:
            forces[t * 2] = fw[0]
            forces[t * 2 + 1] = fw[1]
    return 0


cdef void load_fluid(Fluid* f,
                     double[:, ::1] wpos, double[::1] wgam, long long[::1] wage_,
                     int n_wake, int ring_a, int ring_b,
                     double[:, ::1] ppos, double[::1] pgam, int n_prev,
                     double prev_lev, double[::1] ema,
                     double* wx, double* wz, double* wg, double* wa,
                     double* px, double* pz, double* pg, double* em,
                     int nb) noexcept nogil:
    cdef int i
    for i in range(n_wake):
        wx[i] = wpos[i, 0]
        wz[i] = wpos[i, 1]
        wg[i] = wgam[i]
        wa[i] = <double> wage_[i]
    for i in range(n_prev):
        px[i] = ppos[i, 0]
        pz[i] = ppos[i, 1]
        pg[i] = pgam[i]
    for i in range(nb):
        em[i] = ema[i]
    f.wx = wx
    f.wz = wz
    f.wg = wg
    f.wage = wa
    f.n = n_wake
    f.ring_a = ring_a
    f.ring_b = ring_b
    f.px = px
    f.pz = pz
    f.pg = pg
    f.n_prev = n_prev
    f.prev_lev = prev_lev
    f.ema = em


def _check_limits(long long[::1] iparams):
    if iparams[0] > MAXNB:
        raise ValueError(f"n_bound > {MAXNB} not supported by the compiled core")
    if iparams[1] + 4 > MAXW:
        raise ValueError(f"particle_cap > {MAXW - 4} not supported by the compiled core")


def step(double[::1] x, double u,
         double[:, ::1] wake_pos, double[::1] wake_gamma, long long[::1] wake_age,
         int n_wake, int ring_a, int ring_b,
         double[:, ::1] prev_pos, double[::1] prev_gamma, int n_prev,
         double prev_lev, double[::1] ema,
         long long[::1] iparams, double[::1] fparams, bint integrate):
    """Single step.  Returns (status, x_new, fw, mw, fluid tuple).

    The fluid tuple is (wake_pos, wake_gamma, wake_age, n_wake, ring_a,
    ring_b, prev_pos, prev_gamma, n_prev, prev_lev, ema) with fresh arrays.
    """
    _check_limits(iparams)
    cdef Par p
    fill_par(&p, &iparams[0], &fparams[0])

    cdef double wx[MAXW]
    cdef double wz[MAXW]
    cdef double wg[MAXW]
    cdef double wa[MAXW]
    cdef double px[MAXNB]
    cdef double pz[MAXNB]
    cdef double pg[MAXNB]
    cdef double em[MAXNB]
    cdef Fluid f
    load_fluid(&f, wake_pos, wake_gamma, wake_age, n_wake, ring_a, ring_b,
               prev_pos, prev_gamma, n_prev, prev_lev, ema,
               wx, wz, wg, wa, px, pz, pg, em, p.nb)

    cdef double xloc[7]
    cdef int i
    for i in range(7):
        xloc[i] = x[i]
    cdef double fw[2]
    cdef double mw = 0.0
    cdef int rc = step_core(xloc, u, &f, &p, fw, &mw, integrate)

    x_new = np.empty(7)
    cdef double[::1] xv = x_new
    for i in range(7):
        xv[i] = xloc[i]
    return rc, x_new, np.array([fw[0], fw[1]]), mw, _dump_fluid(&f, &p)


cdef _dump_fluid(Fluid* f, Par* p):
    cdef int capbuf = p.cap + 4
    wake_pos = np.zeros((capbuf, 2))
    wake_gamma = np.zeros(capbuf)
    wake_age = np.zeros(capbuf, dtype=np.int64)
    prev_pos = np.zeros((p.nb, 2))
    prev_gamma = np.zeros(p.nb)
    ema = np.zeros(p.nb)
    cdef double[:, ::1] wp = wake_pos
    cdef double[::1] wg = wake_gamma
    cdef long long[::1] wa = wake_age
    cdef double[:, ::1] pp = prev_pos
    cdef double[::1] pg = prev_gamma
    cdef double[::1] em = ema
    cdef int i
    for i in range(f.n):
        wp[i, 0] = f.wx[i]
        wp[i, 1] = f.wz[i]
        wg[i] = f.wg[i]
        wa[i] = <long long> f.wage[i]
    for i in range(f.n_prev):
        pp[i, 0] = f.px[i]
        pp[i, 1] = f.pz[i]
        pg[i] = f.pg[i]
    for i in range(p.nb):
        em[i] = f.ema[i]
    return (wake_pos, wake_gamma, wake_age, f.n, f.ring_a, f.ring_b,
            prev_pos, prev_gamma, f.n_prev, f.prev_lev, ema)


def rollout(double[::1] x0, double[::1] controls,
            double[:, ::1] wake_pos, double[::1] wake_gamma, long long[::1] wake_age,
            int n_wake, int ring_a, int ring_b,
            double[:, ::1] prev_pos, double[::1] prev_gamma, int n_prev,
            double prev_lev, double[::1] ema,
            long long[::1] iparams, double[::1] fparams,
            bint record, bint return_fluid):
    """Open-loop rollout.  Returns (status, traj, fluid-or-None).

    status 0 = success; > 0 = failed at step status - 1 (state flagged
    non-finite or out of envelope).  ``traj`` is (T+1, 7) when ``record``
    else (7,) final state.
    """
    _check_limits(iparams)
    cdef Par p
    fill_par(&p, &iparams[0], &fparams[0])
    cdef int T = controls.shape[0]

    cdef double wx[MAXW]
    cdef double wz[MAXW]
    cdef double wg[MAXW]
    cdef double wa[MAXW]
    cdef double px[MAXNB]
    cdef double pz[MAXNB]
    cdef double pg[MAXNB]
    cdef double em[MAXNB]
    cdef Fluid f
    load_fluid(&f, wake_pos, wake_gamma, wake_age, n_wake, ring_a, ring_b,
               prev_pos, prev_gamma, n_prev, prev_lev, ema,
               wx, wz, wg, wa, px, pz, pg, em, p.nb)

    cdef double xloc[7]
    cdef int i
    for i in range(7):
        xloc[i] = x0[i]

    traj = np.zeros(((T + 1), 7)) if record else None
    cdef double[:, ::1] tv
    cdef double* tptr = NULL
    if record:
        tv = traj
        tptr = &tv[0, 0]

    cdef int rc
    with nogil:
        rc = run_rollout(xloc, &controls[0] if T > 0 else NULL, T, &f, &p, tptr, NULL)

    if not record:
        traj = np.empty(7)
        for i in range(7):
            traj[i] = xloc[i]
    fluid_out = _dump_fluid(&f, &p) if return_fluid else None
    return rc, traj, fluid_out


def batch_rollout(double[::1] x0, double[:, ::1] controls,
                  double[:, ::1] wake_pos, double[::1] wake_gamma, long long[::1] wake_age,
                  int n_wake, int ring_a, int ring_b,
                  double[:, ::1] prev_pos, double[::1] prev_gamma, int n_prev,
                  double prev_lev, double[::1] ema,
                  long long[::1] iparams, double[::1] fparams,
                  bint record, int workers):
    """Batched independent rollouts from a shared initial state and fluid fork.

    Every rollout copies the fluid snapshot into private scratch, so results
    are bit-identical to sequential evaluation regardless of ``workers``.
    Returns (status (B,), finals (B, 7), trajs (B, T+1, 7) or None).
    """
    _check_limits(iparams)
    cdef Par p
    fill_par(&p, &iparams[0], &fparams[0])
    cdef int B = controls.shape[0]
    cdef int T = controls.shape[1]
    cdef int nb = p.nb
    cdef int capbuf = p.cap + 4

    if workers <= 0:
        workers = openmp.omp_get_max_threads()
    if workers > B:
        workers = B if B > 0 else 1

    status = np.zeros(B, dtype=np.int64)
    finals = np.zeros((B, 7))
    trajs = np.zeros((B, T + 1, 7)) if record else None

    cdef long long[::1] st = status
    cdef double[:, ::1] fv = finals
    cdef double[:, :, ::1] tv
    cdef double* tbase = NULL
    if record:
        tv = trajs
        tbase = &tv[0, 0, 0]

    # per-thread scratch buffers
    scratch = np.zeros((workers, 4 * capbuf + 4 * nb))
    cdef double[:, ::1] sc = scratch
    cdef int b, tid

    with nogil:
        for b in prange(B, num_threads=workers, schedule='static'):
            tid = openmp.omp_get_thread_num()
            st[b] = _one_batch_rollout(
                b, T, &x0[0], controls, wake_pos, wake_gamma, wake_age,
                n_wake, ring_a, ring_b, prev_pos, prev_gamma, n_prev,
                prev_lev, ema, &sc[tid, 0], capbuf, nb, &p, fv, tbase)
    return status, finals, trajs


cdef long long _one_batch_rollout(int b, int T, double* x0,
                                  double[:, ::1] controls,
                                  double[:, ::1] wake_pos, double[::1] wake_gamma,
                                  long long[::1] wake_age, int n_wake, int ring_a,
                                  int ring_b, double[:, ::1] prev_pos,
                                  double[::1] prev_gamma, int n_prev,
                                  double prev_lev, double[::1] ema,
                                  double* base, int capbuf, int nb, Par* p,
                                  double[:, ::1] finals, double* tbase) noexcept nogil:
    # function-local state keeps every rollout private under OpenMP
    cdef Fluid f
    cdef double xloc[7]
    cdef int i, rc
    load_fluid(&f, wake_pos, wake_gamma, wake_age, n_wake, ring_a, ring_b,
               prev_pos, prev_gamma, n_prev, prev_lev, ema,
               base, base + capbuf, base + 2 * capbuf, base + 3 * capbuf,
               base + 4 * capbuf, base + 4 * capbuf + nb,
               base + 4 * capbuf + 2 * nb, base + 4 * capbuf + 3 * nb, nb)
    for i in range(7):
        xloc[i] = x0[i]
    rc = run_rollout(xloc, &controls[b, 0] if T > 0 else NULL, T, &f, p,
                     tbase + b * (T + 1) * 7 if tbase != NULL else NULL, NULL)
    for i in range(7):
        finals[b, i] = xloc[i]
    return rc


def omp_threads():
    return openmp.omp_get_max_threads()
