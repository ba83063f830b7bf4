"""Noise factorization B*B^T = D for complex symmetric diffusion matrices.

The transpose is plain (no conjugation): the noise vector is real standard
Gaussian w, the increment is B*w*sqrt(dt), and its second moments are
B*E[w w^T]*B^T = B*B^T.  D is complex symmetric, generally rank deficient and
indefinite; JC-type couplings even make the whole diagonal zero, so plain
Cholesky variants with diagonal pivots cannot work.

Primary path (used per integration step): symmetric-pivoted elimination with
1x1 and 2x2 pivots.  A 1x1 pivot is taken when the largest remaining diagonal
entry is at least alpha = (1+sqrt(17))/8 times the largest off-diagonal entry
(the Bunch-Kaufman constant).  Otherwise the dominant off-diagonal entry
anchors a 2x2 pivot block [[a,b],[b,c]] with |a|,|c| < alpha*|b|, which makes
the block robustly invertible (|det| >= (1-alpha^2)*|b|^2) and is split as
T*T^T through its complex-orthogonal eigenbasis.

Fallback path (rank re-estimation on residual failure): Autonne-Takagi
through the real symmetric embedding [[Re D, Im D],[Im D, -Re D]], whose
positive eigenpairs (s, (u;v)) give D*conj(w) = s*w for w = u+iv; columns
w*sqrt(s) rebuild D exactly up to dropped near-null directions.

Both paths are numba-compiled and callable from compiled trajectory kernels.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "FactorizationError",
    "factor_complex_symmetric",
    "residual_norm",
    "RESIDUAL_TOL",
    "RANK_TOL",
]

# acceptance threshold: ||B B^T - D||_max <= RESIDUAL_TOL * (1 + ||D||_max)
RESIDUAL_TOL = 1e-10
# numerical rank threshold, relative to ||D||_max
RANK_TOL = 1e-12

_ALPHA = (1.0 + np.sqrt(17.0)) / 8.0


class FactorizationError(RuntimeError):
    pass


@njit(cache=True)
def _takagi2(a, b, c, T):
    """Split [[a,b],[b,c]] as T*T^T via its complex-orthogonal eigenbasis.

    Assumes the off-diagonal dominates (BK 2x2 pivot precondition), which
    keeps the eigenproblem non-defective and the eigenvectors anisotropic.
    """
    s = np.sqrt((a - c) * (a - c) + 4.0 * b * b)
    if abs(a + c - s) > abs(a + c + s):
        s = -s
    lam1 = 0.5 * (a + c + s)
    lam2 = 0.5 * (a + c - s)
    # two parametrizations of the lam1 eigenvector; take the less degenerate
    v0, v1 = b, lam1 - a
    w0, w1 = lam1 - c, b
    nv = v0 * v0 + v1 * v1
    nw = w0 * w0 + w1 * w1
    if abs(nw) > abs(nv):
        v0, v1, nv = w0, w1, nw
    nrm = np.sqrt(nv)
    u0 = v0 / nrm
    u1 = v1 / nrm
    r1 = np.sqrt(lam1)
    r2 = np.sqrt(lam2)
    T[0, 0] = u0 * r1
    T[1, 0] = u1 * r1
    T[0, 1] = -u1 * r2
    T[1, 1] = u0 * r2


@njit(cache=True)
def _factor_bk(S, B, act, tol):
    """Pivoted elimination of the complex symmetric matrix S.

    S is destroyed; noise columns accumulate in B[:, :k].  act is a boolean
    workspace.  Entries never exceeding tol (in absolute value) are treated
    as numerically zero, which sets the reported rank k.
    """
    n = S.shape[0]
    for i in range(n):
        act[i] = True
        for j in range(n):
            B[i, j] = 0.0 + 0.0j
    k = 0
    T = np.empty((2, 2), dtype=np.complex128)
    while True:
        dmax = 0.0
        di = -1
        omax = 0.0
        oi = -1
        oj = -1
        for i in range(n):
            if not act[i]:
                continue
            v = abs(S[i, i])
            if v > dmax:
                dmax = v
                di = i
            for j in range(i + 1, n):
                if not act[j]:
                    continue
                v = abs(S[i, j])
                if v > omax:
                    omax = v
                    oi = i
                    oj = j
        if dmax <= tol and omax <= tol:
            return k
        if dmax >= _ALPHA * omax:
            piv = np.sqrt(S[di, di])
            for r in range(n):
                if act[r]:
                    B[r, k] = S[r, di] / piv
            act[di] = False
            for r in range(n):
                if not act[r]:
                    continue
                br = B[r, k]
                for c in range(r, n):
                    if not act[c]:
                        continue
                    upd = br * B[c, k]
                    S[r, c] -= upd
                    if c != r:
                        S[c, r] -= upd
            k += 1
        else:
            a = S[oi, oi]
            b = S[oi, oj]
            c = S[oj, oj]
            _takagi2(a, b, c, T)
            det = a * c - b * b
            for r in range(n):
                if not act[r]:
                    continue
                x = (S[r, oi] * c - S[r, oj] * b) / det
                y = (S[r, oj] * a - S[r, oi] * b) / det
                B[r, k] = x * T[0, 0] + y * T[1, 0]
                B[r, k + 1] = x * T[0, 1] + y * T[1, 1]
            act[oi] = False
            act[oj] = False
            for r in range(n):
                if not act[r]:
                    continue
                b0 = B[r, k]
                b1 = B[r, k + 1]
                for cc in range(r, n):
                    if not act[cc]:
                        continue
                    upd = b0 * B[cc, k] + b1 * B[cc, k + 1]
                    S[r, cc] -= upd
                    if cc != r:
                        S[cc, r] -= upd
            k += 2


@njit(cache=True)
def _takagi_full(D, tol):
    """Autonne-Takagi factorization through the real symmetric embedding."""
    n = D.shape[0]
    M = np.empty((2 * n, 2 * n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            re = D[i, j].real
            im = D[i, j].imag
            M[i, j] = re
            M[i, j + n] = im
            M[i + n, j] = im
            M[i + n, j + n] = -re
    w, Q = np.linalg.eigh(M)
    B = np.zeros((n, n), dtype=np.complex128)
    k = 0
    for t in range(2 * n - 1, -1, -1):
        if w[t] <= tol:
            break
        if k >= n:
            break
        r = np.sqrt(w[t])
        for i in range(n):
            B[i, k] = complex(Q[i, t], Q[i + n, t]) * r
        k += 1
    return B, k


@njit(cache=True)
def _bbt_residual(B, k, D):
    n = D.shape[0]
    worst = 0.0
    for i in range(n):
        for j in range(n):
            acc = 0.0 + 0.0j
            for c in range(k):
                acc += B[i, c] * B[j, c]
            v = abs(acc - D[i, j])
            if v > worst:
                worst = v
    return worst


def residual_norm(B, D) -> float:
    k = B.shape[1] if B.ndim == 2 else 0
    if k == 0:
        return float(np.max(np.abs(D))) if D.size else 0.0
    return float(_bbt_residual(np.ascontiguousarray(B), k, np.ascontiguousarray(D)))


def factor_complex_symmetric(D: np.ndarray):
    """Factor D = B*B^T; returns (B, residual).

    B has the numerical rank of D (tolerance RANK_TOL*||D||_max) as its column
    count.  The pivoted path is tried first; on residual failure the rank is
    re-estimated by the full Takagi fallback.  Raises FactorizationError if
    neither meets RESIDUAL_TOL*(1+||D||_max).
    """
    D = np.ascontiguousarray(D, dtype=np.complex128)
    n = D.shape[0]
    if D.shape != (n, n):
        raise FactorizationError("diffusion matrix must be square")
    if n == 0:
        return np.zeros((0, 0), dtype=np.complex128), 0.0
    norm = float(np.max(np.abs(D)))
    if not np.isfinite(norm):
        raise FactorizationError("diffusion matrix has non-finite entries")
    asym = float(np.max(np.abs(D - D.T))) if n else 0.0
    if asym > 1e-12 * (1.0 + norm):
        raise FactorizationError(
            f"diffusion matrix is not complex symmetric (asymmetry {asym:.3e})"
        )
    if norm == 0.0:
        return np.zeros((n, 0), dtype=np.complex128), 0.0
    bound = RESIDUAL_TOL * (1.0 + norm)

    S = 0.5 * (D + D.T)
    B = np.empty((n, n), dtype=np.complex128)
    act = np.empty(n, dtype=np.bool_)
    k = _factor_bk(S, B, act, RANK_TOL * norm)
    res = _bbt_residual(B, k, D)
    if res <= bound:
        return B[:, :k].copy(), float(res)

    B2, k2 = _takagi_full(D, RANK_TOL * norm)
    res2 = _bbt_residual(B2, k2, D)
    if res2 <= bound:
        return B2[:, :k2].copy(), float(res2)
    raise FactorizationError(
        f"complex-symmetric factorization failed: pivoted residual {res:.3e}, "
        f"Takagi residual {res2:.3e}, bound {bound:.3e}"
    )
