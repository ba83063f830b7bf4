"""Compiled integration kernel.

Trajectories are independent, so the ensemble loop is a prange over
trajectory indices.  Each iteration owns its workspaces and a counter-based
RNG substream: noise normals for (trajectory, step) come from a Philox 4x32-10
block cipher keyed by the run seed with the counter (traj, stream tag, step,
block).  That makes every draw addressable, so results are bit-identical for
any worker count and trajectories can be replayed individually.

Per step and per trajectory: evaluate the drift polynomials, assemble the
diffusion matrix D from its polynomial entries, factor D = B B^T (pivoted
elimination with a Takagi fallback, same tolerances as the factorization
module), verify the residual, draw a fixed count of standard normals, and
take an Euler-Maruyama step.  Diverged trajectories freeze in place and keep
their last valid state in later records.
"""

import numpy as np
from numba import njit, prange

from .factorization import RANK_TOL, RESIDUAL_TOL, _bbt_residual, _factor_bk, _takagi_full

DIVERGENCE_LIMIT = 1e9

STATUS_OK = 0
STATUS_DIVERGED = 1
STATUS_FACTOR_FAIL = 2

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_SHIFT32 = np.uint64(32)
_TWO_NEG32 = float(2.0**-32)


@njit(cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """One Philox 4x32-10 block; arguments and results are 32-bit values
    carried in uint64."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = ((p1 >> _SHIFT32) ^ c1 ^ k0) & _MASK32
        n1 = p1 & _MASK32
        n2 = ((p0 >> _SHIFT32) ^ c3 ^ k1) & _MASK32
        n3 = p0 & _MASK32
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return c0, c1, c2, c3


@njit(cache=True)
def fill_normals(out, count, traj, tag, step, k0, k1):
    """Standard normals via Box-Muller on Philox words; 4 per block."""
    idx = 0
    block = np.uint64(0)
    while idx < count:
        w0, w1, w2, w3 = philox4x32(traj, tag, step, block, k0, k1)
        u0 = (float(w0) + 0.5) * _TWO_NEG32
        u1 = (float(w1) + 0.5) * _TWO_NEG32
        u2 = (float(w2) + 0.5) * _TWO_NEG32
        u3 = (float(w3) + 0.5) * _TWO_NEG32
        r = np.sqrt(-2.0 * np.log(u0))
        a = 2.0 * np.pi * u1
        out[idx] = r * np.cos(a)
        idx += 1
        if idx < count:
            out[idx] = r * np.sin(a)
            idx += 1
        if idx < count:
            r = np.sqrt(-2.0 * np.log(u2))
            a = 2.0 * np.pi * u3
            out[idx] = r * np.cos(a)
            idx += 1
        if idx < count:
            out[idx] = r * np.sin(a)
            idx += 1
        block += np.uint64(1)


@njit(cache=True)
def poly_eval(ptr, coeff, vptr, vidx, k, x):
    acc = 0.0 + 0.0j
    for t in range(ptr[k], ptr[k + 1]):
        term = coeff[t]
        for u in range(vptr[t], vptr[t + 1]):
            term = term * x[vidx[u]]
        acc += term
    return acc


@njit(cache=True, parallel=True)
def run_kernel(
    states,
    logw0,
    dt,
    n_steps,
    stride,
    drift_ptr,
    drift_coeff,
    drift_vptr,
    drift_vidx,
    diff_i,
    diff_j,
    diff_ptr,
    diff_coeff,
    diff_vptr,
    diff_vidx,
    nz,
    obs_ptr,
    obs_coeff,
    obs_vptr,
    obs_vidx,
    weight_index,
    key0,
    key1,
    tag,
    values,
    logweights,
    diverged_at,
    status,
):
    n = states.shape[0]
    nv = states.shape[1]
    m = nz.shape[0]
    ne = diff_i.shape[0]
    n_obs = values.shape[2]
    sqdt = np.sqrt(dt)
    tag64 = np.uint64(tag)
    k0 = np.uint64(key0)
    k1 = np.uint64(key1)
    for traj in prange(n):
        x = states[traj].copy()
        xn = np.empty(nv, np.complex128)
        dxv = np.empty(nv, np.complex128)
        D = np.empty((m, m), np.complex128)
        S = np.empty((m, m), np.complex128)
        B = np.empty((m, m), np.complex128)
        act = np.empty(m, np.bool_)
        wn = np.empty(m, np.float64)
        lw0 = logw0[traj]
        tr64 = np.uint64(traj)
        for o in range(n_obs):
            values[traj, 0, o] = poly_eval(obs_ptr, obs_coeff, obs_vptr, obs_vidx, o, x)
        if weight_index >= 0:
            logweights[traj, 0] = lw0 + x[weight_index]
        else:
            logweights[traj, 0] = lw0
        alive = True
        for s in range(n_steps):
            if alive:
                for i in range(nv):
                    dxv[i] = poly_eval(drift_ptr, drift_coeff, drift_vptr, drift_vidx, i, x)
                rank = 0
                if m > 0:
                    for i in range(m):
                        for j in range(m):
                            D[i, j] = 0.0 + 0.0j
                    dmax = 0.0
                    for e in range(ne):
                        v = poly_eval(diff_ptr, diff_coeff, diff_vptr, diff_vidx, e, x)
                        D[diff_i[e], diff_j[e]] = v
                        D[diff_j[e], diff_i[e]] = v
                        av = abs(v)
                        if av > dmax:
                            dmax = av
                    if dmax > 0.0:
                        for i in range(m):
                            for j in range(m):
                                S[i, j] = D[i, j]
                        rank = _factor_bk(S, B, act, RANK_TOL * dmax)
                        bound = RESIDUAL_TOL * (1.0 + dmax)
                        if _bbt_residual(B, rank, D) > bound:
                            B2, rank2 = _takagi_full(D, RANK_TOL * dmax)
                            if _bbt_residual(B2, rank2, D) <= bound:
                                for i in range(m):
                                    for j in range(m):
                                        B[i, j] = B2[i, j]
                                rank = rank2
                            else:
                                alive = False
                                status[traj] = STATUS_FACTOR_FAIL
                                diverged_at[traj] = s + 1
                    if alive:
                        fill_normals(wn, m, tr64, tag64, np.uint64(s), k0, k1)
                if alive:
                    for i in range(nv):
                        xn[i] = x[i] + dxv[i] * dt
                    for c in range(rank):
                        wc = wn[c] * sqdt
                        for r in range(m):
                            xn[nz[r]] += B[r, c] * wc
                    ok = True
                    for i in range(nv):
                        re = xn[i].real
                        im = xn[i].imag
                        if (
                            not (np.isfinite(re) and np.isfinite(im))
                            or abs(re) > DIVERGENCE_LIMIT
                            or abs(im) > DIVERGENCE_LIMIT
                        ):
                            ok = False
                            break
                    if ok:
                        for i in range(nv):
                            x[i] = xn[i]
                    else:
                        alive = False
                        status[traj] = STATUS_DIVERGED
                        diverged_at[traj] = s + 1
            if (s + 1) % stride == 0:
                out = (s + 1) // stride
                for o in range(n_obs):
                    values[traj, out, o] = poly_eval(
                        obs_ptr, obs_coeff, obs_vptr, obs_vidx, o, x
                    )
                if weight_index >= 0:
                    logweights[traj, out] = lw0 + x[weight_index]
                else:
                    logweights[traj, out] = lw0
