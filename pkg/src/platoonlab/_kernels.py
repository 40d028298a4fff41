"""Compiled RK4 loop for long platoon runs.

Everything is O(N) per stage on the band storage of :class:`CouplingSet`.
Metrics are accumulated on every step so that long horizons can be run while
only a decimated trace is kept in memory.
"""

import math

import numpy as np
from numba import njit

# indices into the ``stats`` output vector
H0, H_MAX, MAX_DELTA, MAX_FORCE, PEAK, LAST_BAD, TOTAL_ERR, WORK, JUMPS, DIVERGED, STEPS, N_REC, D_SQ = range(13)
N_STATS = 13

DIVERGENCE_LIMIT = 1e200


@njit(cache=True)
def _field(p, dl, v0, n, inv_m, stiff, vl, vd, vu, pd, pu, wp, wd,
           dist_on, align, amp, seed, dp, dd, force, vt, dvec):
    """Writes dp, dd, force, the disturbance into dvec; returns dW/dt."""
    for i in range(n):
        vt[i] = inv_m[i] * p[i] - v0
    if dist_on:
        s = 0.0
        for i in range(n):
            if align == 0:
                dvec[i] = vt[i] / inv_m[i]
            else:
                dvec[i] = vt[i]
            s += dvec[i] * dvec[i]
        s = math.sqrt(s)
        if s > 1e-9:
            for i in range(n):
                dvec[i] = amp * dvec[i] / s
        else:
            for i in range(n):
                dvec[i] = amp * seed[i]
    else:
        for i in range(n):
            dvec[i] = 0.0
    power = 0.0
    for i in range(n):
        f = -vd[i] * vt[i] + pd[i] * dl[i]
        if i < n - 1:
            f += -vu[i] * vt[i + 1] + pu[i] * dl[i + 1]
        if i > 0:
            f += -vl[i - 1] * vt[i - 1]
            dd[i] = vt[i - 1] - vt[i]
        else:
            dd[i] = -vt[i]
        force[i] = f
        dp[i] = f + dvec[i]
        power += wp[i] * vt[i] * dp[i] + wd[i] * stiff[i] * dl[i] * dd[i]
    return power


@njit(cache=True)
def _energy(p, dl, v0, n, masses, inv_m, stiff, wp, wd):
    h = 0.0
    for i in range(n):
        vt = inv_m[i] * p[i] - v0
        h += wp[i] * masses[i] * vt * vt + wd[i] * stiff[i] * dl[i] * dl[i]
    return 0.5 * h


@njit(cache=True)
def run_rk4(p, dl, masses, stiff, vl, vd, vu, pd, pu, wp, wd,
            v_before, v_after, step_time,
            dist_kind, align, t_f, seed,
            dt, nsteps, record_every, conv_tol,
            rec_t, rec_p, rec_d, rec_f, rec_h, rec_e, rec_v0, stats):
    n = p.shape[0]
    inv_m = 1.0 / masses
    amp = 1.0 / math.sqrt(t_f) if dist_kind == 1 else 0.0

    k1p = np.empty(n); k1d = np.empty(n); k2p = np.empty(n); k2d = np.empty(n)
    k3p = np.empty(n); k3d = np.empty(n); k4p = np.empty(n); k4d = np.empty(n)
    tp = np.empty(n); td = np.empty(n); force = np.empty(n); vt = np.empty(n)
    dvec = np.empty(n); scratch = np.empty(n)

    for j in range(N_STATS):
        stats[j] = 0.0
    stats[LAST_BAD] = -1.0
    stats[MAX_DELTA] = -np.inf
    stats[MAX_FORCE] = -np.inf

    t = 0.0
    v0 = v_after if step_time <= 0.5 * dt else v_before
    stats[H0] = _energy(p, dl, v0, n, masses, inv_m, stiff, wp, wd)
    stats[H_MAX] = stats[H0]
    e_prev = 0.0
    nrec = 0
    k = 0
    while True:
        # quantities on the grid point t_k
        on = dist_kind == 1 and t < t_f - 0.5 * dt
        w1 = _field(p, dl, v0, n, inv_m, stiff, vl, vd, vu, pd, pu, wp, wd,
               on, align, amp, seed, k1p, k1d, force, vt, dvec)
        h = _energy(p, dl, v0, n, masses, inv_m, stiff, wp, wd)
        err = 0.0
        e = 0.0
        for i in range(n):
            a = abs(dl[i])
            b = abs(vt[i])
            e += dl[i] * dl[i] + vt[i] * vt[i]
            if a > err:
                err = a
            if b > err:
                err = b
            if dl[i] > stats[MAX_DELTA]:
                stats[MAX_DELTA] = dl[i]
            if force[i] > stats[MAX_FORCE]:
                stats[MAX_FORCE] = force[i]
            pm = abs(p[i] - masses[i] * v0)
            if pm > stats[PEAK]:
                stats[PEAK] = pm
            if a > stats[PEAK]:
                stats[PEAK] = a
        if h > stats[H_MAX]:
            stats[H_MAX] = h
        if err > conv_tol:
            stats[LAST_BAD] = k
        if k > 0:
            stats[TOTAL_ERR] += 0.5 * dt * (e + e_prev)
        e_prev = e
        if k % record_every == 0 or k == nsteps:
            rec_t[nrec] = t
            rec_h[nrec] = h
            rec_e[nrec] = e
            rec_v0[nrec] = v0
            for i in range(n):
                rec_p[nrec, i] = p[i]
                rec_d[nrec, i] = dl[i]
                rec_f[nrec, i] = force[i]
            nrec += 1
        stats[N_REC] = nrec
        stats[STEPS] = k
        if k == nsteps:
            break

        # one RK4 step with the leader velocity held over [t, t + dt)
        if on:
            for i in range(n):
                stats[D_SQ] += dt * dvec[i] * dvec[i]
        for i in range(n):
            tp[i] = p[i] + 0.5 * dt * k1p[i]
            td[i] = dl[i] + 0.5 * dt * k1d[i]
        w2 = _field(tp, td, v0, n, inv_m, stiff, vl, vd, vu, pd, pu, wp, wd,
                    on, align, amp, seed, k2p, k2d, scratch, vt, dvec)
        for i in range(n):
            tp[i] = p[i] + 0.5 * dt * k2p[i]
            td[i] = dl[i] + 0.5 * dt * k2d[i]
        w3 = _field(tp, td, v0, n, inv_m, stiff, vl, vd, vu, pd, pu, wp, wd,
                    on, align, amp, seed, k3p, k3d, scratch, vt, dvec)
        for i in range(n):
            tp[i] = p[i] + dt * k3p[i]
            td[i] = dl[i] + dt * k3d[i]
        w4 = _field(tp, td, v0, n, inv_m, stiff, vl, vd, vu, pd, pu, wp, wd,
                    on, align, amp, seed, k4p, k4d, scratch, vt, dvec)
        bad = False
        for i in range(n):
            p[i] += dt / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i])
            dl[i] += dt / 6.0 * (k1d[i] + 2.0 * k2d[i] + 2.0 * k3d[i] + k4d[i])
            if not (abs(p[i]) < DIVERGENCE_LIMIT and abs(dl[i]) < DIVERGENCE_LIMIT):
                bad = True
        stats[WORK] += dt / 6.0 * (w1 + 2.0 * w2 + 2.0 * w3 + w4)
        if bad:
            stats[DIVERGED] = 1.0
            break
        k += 1
        t = k * dt
        # leader switch: the jump in energy is bookkept outside the work integral
        v_new = v_after if t >= step_time - 0.5 * dt else v_before
        if v_new != v0:
            h_old = _energy(p, dl, v0, n, masses, inv_m, stiff, wp, wd)
            h_new = _energy(p, dl, v_new, n, masses, inv_m, stiff, wp, wd)
            stats[JUMPS] += h_new - h_old
            v0 = v_new
    return stats
