"""Compile a model into an executable Ito SDE system.

Drift polynomials come from first Hamiltonian derivatives, the diffusion
matrix from second derivatives:

    field pairs       d(alpha_i) = -(i/hbar) dH/d(alphadag_i) dt + noise
                      d(alphadag_i) = +(i/hbar) dH/d(alpha_i) dt + noise
    density blocks    d(rho_{a,pq}) = (i/hbar) sum_r [rho_{a,pr} dH/drho_{a,qr}
                                      - dH/drho_{a,rp} rho_{a,rq}] dt
                                      + rate drift + noise
    C variables       d(C_{a,p}) = -(i/hbar) dH/d(Cdag_{a,p}) dt + noise, and
                      the daggered partner with +(i/hbar) and dH/dC.

Noise correlators, realized as the complex symmetric matrix D(x): within the
undaggered class (alpha_i, C_{a,p}) entries are -(i/hbar) d2H/d(dag u)d(dag v),
within the daggered class +(i/hbar) d2H/d(undag u)d(undag v), and the
cross-class block is identically zero.  Density-matrix noise is carried
directly in rho space: the raw per-level noises enter multiplied by rho rows
and columns, which after contraction gives

    D[alpha_i, rho_{a,pq}]     = -(i/hbar) sum_r d2H/d(alphadag_i)d(rho_{a,rp}) rho_{a,rq}
    D[alphadag_i, rho_{a,pq}]  = +(i/hbar) sum_r rho_{a,pr} d2H/d(alpha_i)d(rho_{a,qr})
    D[rho_{a,pq}, rho_{b,uv}]  = -(i/hbar) sum_{r,s} d2H/d(rho_{a,rp})d(rho_{b,su}) rho_{a,rq} rho_{b,sv}
                                 +(i/hbar) sum_{r,s} rho_{a,pr} rho_{b,us} d2H/d(rho_{a,qr})d(rho_{b,vs})

(same-emitter blocks vanish because H never carries two projectors of one
emitter).  The rate (Lindblad) tensor contributes pure drift and no noise.

Everything is lowered to flat index tables so integration kernels evaluate
drift and diffusion without any symbol lookups.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import algebra
from .algebra import (
    CVAR,
    CVAR_DAG,
    FIELD,
    FIELD_DAG,
    RHO,
    PhaseSymbol,
    Polynomial,
    dagger_symbol,
    to_cvariables,
    validate_exactness,
)
from .model import CVAR_FORM, RHO_FORM, ModelSpec

__all__ = [
    "CompileError",
    "DriftSystem",
    "DiffusionSpec",
    "CompiledSystem",
    "WeightVar",
    "build_drift",
    "build_diffusion",
    "lindblad_drift",
    "lindblad_drift_poly",
    "compile_model",
    "extend_with_gauge",
    "factor_diffusion",
    "eval_lowered",
]

DIVERGENCE_LIMIT = 1e9


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class WeightVar:
    """Extra state slot for the gauge log-weight C0."""

    label: str = "C0"

    def __str__(self):
        return self.label


@dataclass
class DriftSystem:
    variables: list
    polys: List[Polynomial]

    def __post_init__(self):
        if len(self.variables) != len(self.polys):
            raise CompileError("one drift polynomial per state variable required")


@dataclass
class DiffusionSpec:
    """Upper-triangle polynomial entries over the noise-coupled variables."""

    noise_vars: list
    entries: Dict[Tuple[int, int], Polynomial]  # local (i, j), i <= j

    def matrix(self, assignment) -> np.ndarray:
        m = len(self.noise_vars)
        D = np.zeros((m, m), dtype=complex)
        for (i, j), poly in self.entries.items():
            v = poly.evaluate(assignment)
            D[i, j] = v
            if i != j:
                D[j, i] = v
        return D


# ---------------------------------------------------------------------------
# rate (Lindblad) drift
# ---------------------------------------------------------------------------


def lindblad_drift(gamma: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Deterministic rate drift of one emitter block; no noise.

    d(rho_pq) = 1/2 sum_{r,s} (2 G_{prqs} rho_rs - G_{rqrs} rho_ps
                               - G_{rsrp} rho_sq)

    Trace preserving for every tensor: the three contractions cancel exactly
    after summing p = q.
    """
    t1 = 2.0 * np.einsum("prqs,rs->pq", gamma, rho)
    t2 = np.einsum("rqrs,ps->pq", gamma, rho)
    t3 = np.einsum("rsrp,sq->pq", gamma, rho)
    return 0.5 * (t1 - t2 - t3)


def lindblad_drift_poly(gamma: np.ndarray, emitter: int, p: int, q: int) -> Polynomial:
    """The same rate drift as a polynomial in the rho_{emitter,*} symbols."""
    L = gamma.shape[0]
    out = Polynomial.zero()
    for r in range(L):
        for s in range(L):
            c = gamma[p, r, q, s]
            if c != 0:
                out = out + Polynomial({(algebra.emitter_rho(emitter, r, s),): c})
            c = -0.5 * gamma[r, q, r, s]
            if c != 0:
                out = out + Polynomial({(algebra.emitter_rho(emitter, p, s),): c})
            c = -0.5 * gamma[r, s, r, p]
            if c != 0:
                out = out + Polynomial({(algebra.emitter_rho(emitter, s, q),): c})
    return out


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------


def build_drift(m: ModelSpec, formulation: str = RHO_FORM) -> DriftSystem:
    hbar = m.hbar
    variables = m.variables(formulation)
    H = m.hamiltonian if formulation == RHO_FORM else to_cvariables(m.hamiltonian)
    polys: List[Polynomial] = []

    if formulation == RHO_FORM:
        for v in variables:
            if v.kind == FIELD:
                polys.append(H.differentiate(dagger_symbol(v)) * (-1j / hbar))
            elif v.kind == FIELD_DAG:
                polys.append(H.differentiate(dagger_symbol(v)) * (+1j / hbar))
            else:  # rho_{a,pq}
                a, p, q = v.idx, v.p, v.q
                L = m.emitters[a].levels
                acc = Polynomial.zero()
                for r in range(L):
                    acc = acc + Polynomial.symbol(
                        algebra.emitter_rho(a, p, r)
                    ) * H.differentiate(algebra.emitter_rho(a, q, r))
                    acc = acc - H.differentiate(
                        algebra.emitter_rho(a, r, p)
                    ) * Polynomial.symbol(algebra.emitter_rho(a, r, q))
                acc = acc * (1j / hbar)
                if a in m.lindblad:
                    acc = acc + lindblad_drift_poly(m.lindblad[a].gamma, a, p, q)
                polys.append(acc)
    elif formulation == CVAR_FORM:
        for v in variables:
            if v.kind in (FIELD, CVAR):
                polys.append(H.differentiate(dagger_symbol(v)) * (-1j / hbar))
            else:
                polys.append(H.differentiate(dagger_symbol(v)) * (+1j / hbar))
    else:
        raise CompileError(f"unknown formulation {formulation!r}")
    return DriftSystem(variables, polys)


# ---------------------------------------------------------------------------
# diffusion
# ---------------------------------------------------------------------------

_MINUS_CLASS = (FIELD, CVAR)
_PLUS_CLASS = (FIELD_DAG, CVAR_DAG)


def build_diffusion(m: ModelSpec, formulation: str = RHO_FORM) -> DiffusionSpec:
    hbar = m.hbar
    variables = m.variables(formulation)
    fminus = -1j / hbar
    fplus = +1j / hbar
    raw: Dict[Tuple[int, int], Polynomial] = {}

    def put(u: int, v: int, poly: Polynomial) -> None:
        if poly.is_zero():
            return
        key = (u, v) if u <= v else (v, u)
        raw[key] = raw.get(key, Polynomial.zero()) + poly

    if formulation == RHO_FORM:
        H = m.hamiltonian

        def rho_sym(a, p, q):
            return algebra.emitter_rho(a, p, q)

        idx = {s: i for i, s in enumerate(variables)}
        rho_vars = [v for v in variables if v.kind == RHO]
        for i, u in enumerate(variables):
            if u.kind == FIELD:
                for v in variables[i:]:
                    if v.kind == FIELD:
                        put(
                            idx[u],
                            idx[v],
                            H.differentiate(dagger_symbol(u)).differentiate(
                                dagger_symbol(v)
                            )
                            * fminus,
                        )
            elif u.kind == FIELD_DAG:
                for v in variables[i:]:
                    if v.kind == FIELD_DAG:
                        put(
                            idx[u],
                            idx[v],
                            H.differentiate(dagger_symbol(u)).differentiate(
                                dagger_symbol(v)
                            )
                            * fplus,
                        )
        for u in [v for v in variables if v.kind in (FIELD, FIELD_DAG)]:
            du = H.differentiate(dagger_symbol(u))
            for rv in rho_vars:
                a, p, q = rv.idx, rv.p, rv.q
                L = m.emitters[a].levels
                acc = Polynomial.zero()
                if u.kind == FIELD:
                    for r in range(L):
                        acc = acc + du.differentiate(
                            rho_sym(a, r, p)
                        ) * Polynomial.symbol(rho_sym(a, r, q))
                    acc = acc * fminus
                else:
                    for r in range(L):
                        acc = acc + Polynomial.symbol(
                            rho_sym(a, p, r)
                        ) * du.differentiate(rho_sym(a, q, r))
                    acc = acc * fplus
                put(idx[u], idx[rv], acc)
        for ii, ru in enumerate(rho_vars):
            for rv in rho_vars[ii:]:
                a, p, q = ru.idx, ru.p, ru.q
                b, u_, v_ = rv.idx, rv.p, rv.q
                if a == b:
                    continue  # one projector per emitter in H: block vanishes
                La, Lb = m.emitters[a].levels, m.emitters[b].levels
                acc = Polynomial.zero()
                for r in range(La):
                    dr = H.differentiate(rho_sym(a, r, p))
                    if dr.is_zero():
                        continue
                    for s in range(Lb):
                        d2 = dr.differentiate(rho_sym(b, s, u_))
                        if d2.is_zero():
                            continue
                        acc = acc + d2 * Polynomial.symbol(
                            rho_sym(a, r, q)
                        ) * Polynomial.symbol(rho_sym(b, s, v_))
                acc = acc * fminus
                acc2 = Polynomial.zero()
                for r in range(La):
                    dr = H.differentiate(rho_sym(a, q, r))
                    if dr.is_zero():
                        continue
                    for s in range(Lb):
                        d2 = dr.differentiate(rho_sym(b, v_, s))
                        if d2.is_zero():
                            continue
                        acc2 = acc2 + Polynomial.symbol(rho_sym(a, p, r)) * Polynomial.symbol(
                            rho_sym(b, u_, s)
                        ) * d2
                put(idx[ru], idx[rv], acc + acc2 * fplus)
    elif formulation == CVAR_FORM:
        H = to_cvariables(m.hamiltonian)
        idx = {s: i for i, s in enumerate(variables)}
        minus = [v for v in variables if v.kind in _MINUS_CLASS]
        plus = [v for v in variables if v.kind in _PLUS_CLASS]
        for group, fac in ((minus, fminus), (plus, fplus)):
            for i, u in enumerate(group):
                du = H.differentiate(dagger_symbol(u))
                for v in group[i:]:
                    put(idx[u], idx[v], du.differentiate(dagger_symbol(v)) * fac)
    else:
        raise CompileError(f"unknown formulation {formulation!r}")

    coupled = sorted({i for key in raw for i in key})
    local = {g: l for l, g in enumerate(coupled)}
    entries = {(local[i], local[j]): poly for (i, j), poly in raw.items()}
    return DiffusionSpec([variables[g] for g in coupled], entries)


# ---------------------------------------------------------------------------
# compiled system
# ---------------------------------------------------------------------------


@dataclass
class CompiledSystem:
    model: ModelSpec
    formulation: str
    variables: list
    drift: DriftSystem
    diffusion: DiffusionSpec
    exact: bool
    truncated: bool
    gauged: bool = False
    weight_index: int = -1  # state slot of the gauge log-weight, -1 if none

    def __post_init__(self):
        self.var_index = {v: i for i, v in enumerate(self.variables)}
        self.n_vars = len(self.variables)
        self.nz_global = np.array(
            [self.var_index[v] for v in self.diffusion.noise_vars], dtype=np.int32
        )
        self.n_noise_vars = len(self.nz_global)
        (
            self.drift_ptr,
            self.drift_coeff,
            self.drift_vptr,
            self.drift_vidx,
        ) = _lower_polys(self.drift.polys, self.var_index)
        keys = sorted(self.diffusion.entries)
        self.diff_i = np.array([k[0] for k in keys], dtype=np.int32)
        self.diff_j = np.array([k[1] for k in keys], dtype=np.int32)
        (
            self.diff_ptr,
            self.diff_coeff,
            self.diff_vptr,
            self.diff_vidx,
        ) = _lower_polys([self.diffusion.entries[k] for k in keys], self.var_index)

    # reference (python) evaluation ------------------------------------

    def assignment(self, x: np.ndarray) -> dict:
        return {v: x[i] for i, v in enumerate(self.variables)}

    def drift_vector(self, x: np.ndarray) -> np.ndarray:
        a = self.assignment(x)
        return np.array([p.evaluate(a) for p in self.drift.polys], dtype=complex)

    def diffusion_matrix(self, x: np.ndarray) -> np.ndarray:
        return self.diffusion.matrix(self.assignment(x))

    def drift_vector_lowered(self, x: np.ndarray) -> np.ndarray:
        return np.array(
            [
                eval_lowered(
                    self.drift_ptr, self.drift_coeff, self.drift_vptr, self.drift_vidx, k, x
                )
                for k in range(self.n_vars)
            ],
            dtype=complex,
        )

    def diffusion_matrix_lowered(self, x: np.ndarray) -> np.ndarray:
        m = self.n_noise_vars
        D = np.zeros((m, m), dtype=complex)
        for e in range(len(self.diff_i)):
            v = eval_lowered(
                self.diff_ptr, self.diff_coeff, self.diff_vptr, self.diff_vidx, e, x
            )
            D[self.diff_i[e], self.diff_j[e]] = v
            D[self.diff_j[e], self.diff_i[e]] = v
        return D

    def describe(self) -> str:
        lines = [
            f"formulation: {self.formulation}",
            f"variables ({self.n_vars}): " + " ".join(str(v) for v in self.variables),
            f"exact: {'yes' if self.exact else 'no (truncated)' if self.truncated else 'no'}",
            "drift:",
        ]
        for v, p in zip(self.drift.variables, self.drift.polys):
            lines.append(f"  d {v} = {p}")
        lines.append(
            "diffusion over ("
            + " ".join(str(v) for v in self.diffusion.noise_vars)
            + "):"
        )
        for (i, j) in sorted(self.diffusion.entries):
            u, v = self.diffusion.noise_vars[i], self.diffusion.noise_vars[j]
            lines.append(f"  D[{u}, {v}] = {self.diffusion.entries[(i, j)]}")
        if self.gauged:
            lines.append("gauge: drift shift active, weight variable C0 appended")
        return "\n".join(lines) + "\n"


def eval_lowered(ptr, coeff, vptr, vidx, k: int, x: np.ndarray) -> complex:
    """Reference evaluation of the k-th lowered polynomial at state x."""
    acc = 0.0 + 0.0j
    for t in range(ptr[k], ptr[k + 1]):
        term = coeff[t]
        for u in range(vptr[t], vptr[t + 1]):
            term *= x[vidx[u]]
        acc += term
    return acc


def _lower_polys(polys: List[Polynomial], var_index: dict):
    ptr = np.zeros(len(polys) + 1, dtype=np.int32)
    coeff: List[complex] = []
    vptr: List[int] = [0]
    vidx: List[int] = []
    for k, poly in enumerate(polys):
        for mono in poly.monomials():
            coeff.append(mono.coefficient)
            for s in mono.symbols:
                vidx.append(var_index[s])
            vptr.append(len(vidx))
        ptr[k + 1] = len(coeff)
    return (
        ptr,
        np.array(coeff, dtype=np.complex128),
        np.array(vptr, dtype=np.int32),
        np.array(vidx, dtype=np.int32),
    )


def compile_model(
    m: ModelSpec, formulation: str = RHO_FORM, allow_truncation: bool = False
) -> CompiledSystem:
    m.validate()
    if formulation == CVAR_FORM and m.lindblad:
        raise CompileError(
            "rate (lindblad) terms are defined on density blocks; dissipative "
            "models need the effective-density formulation"
        )
    report = validate_exactness(m.hamiltonian)
    if not report.exact and not allow_truncation:
        bad = "; ".join(str(mo.symbols) for mo in report.offending)
        raise CompileError(
            "model is not exact at second order (offending monomials: "
            f"{bad}); rerun with truncation explicitly allowed"
        )
    drift = build_drift(m, formulation)
    diffusion = build_diffusion(m, formulation)
    if formulation == RHO_FORM:
        _assert_trace_preserving(m, drift)
    return CompiledSystem(
        model=m,
        formulation=formulation,
        variables=drift.variables,
        drift=drift,
        diffusion=diffusion,
        exact=report.exact,
        truncated=not report.exact,
    )


def _assert_trace_preserving(m: ModelSpec, drift: DriftSystem) -> None:
    """Each emitter trace must be a constant of the drift, coefficient-wise."""
    index = {v: i for i, v in enumerate(drift.variables)}
    for a, em in enumerate(m.emitters):
        tr = Polynomial.zero()
        for p in range(em.levels):
            tr = tr + drift.polys[index[algebra.emitter_rho(a, p, p)]]
        resid = max((abs(c) for c in tr.terms.values()), default=0.0)
        scale = max(
            (
                abs(c)
                for p in range(em.levels)
                for c in drift.polys[index[algebra.emitter_rho(a, p, p)]].terms.values()
            ),
            default=0.0,
        )
        if resid > 1e-12 * (1.0 + scale):
            raise CompileError(
                f"drift does not conserve the trace of emitter {em.name} "
                f"(residual {resid:.3e})"
            )


# ---------------------------------------------------------------------------
# gauge extension
# ---------------------------------------------------------------------------


def extend_with_gauge(sys: CompiledSystem, gauge) -> CompiledSystem:
    """Border the system with the weight variable C0.

    Drift becomes A + deltaA; C0 obeys dC0 = A0 dt + xi0 dW with
    <xi xi0> = -deltaA and <xi0 xi0> = -2 A0, realized by bordering D with a
    -deltaA row/column and a -2 A0 corner before factorization.
    """
    base_vars = list(sys.variables)
    var_index = dict(sys.var_index)
    known = set(base_vars)
    for s, poly in gauge.delta_drift.items():
        if s not in known:
            raise CompileError(f"gauge shifts unknown variable {s}")
        for t in poly.free_symbols():
            if t not in known:
                raise CompileError(f"gauge polynomial references unknown variable {t}")
    for t in gauge.a0.free_symbols():
        if t not in known:
            raise CompileError(f"gauge A0 references unknown variable {t}")

    w = WeightVar()
    variables = base_vars + [w]
    polys = list(sys.drift.polys)
    for s, poly in gauge.delta_drift.items():
        polys[var_index[s]] = polys[var_index[s]] + poly
    polys.append(gauge.a0)

    old_nvars = sys.diffusion.noise_vars
    targets = [s for s, poly in gauge.delta_drift.items() if not poly.is_zero()]
    coupled = sorted(
        {sys.var_index[v] for v in old_nvars} | {var_index[s] for s in targets}
    )
    noise_vars = [base_vars[g] for g in coupled] + [w]
    local = {v: l for l, v in enumerate(noise_vars)}
    entries: Dict[Tuple[int, int], Polynomial] = {}
    for (i, j), poly in sys.diffusion.entries.items():
        entries[(local[old_nvars[i]], local[old_nvars[j]])] = poly
    wl = len(noise_vars) - 1
    for s in targets:
        entries[(local[s], wl)] = gauge.delta_drift[s] * (-1.0)
    if not gauge.a0.is_zero():
        entries[(wl, wl)] = gauge.a0 * (-2.0)

    return CompiledSystem(
        model=sys.model,
        formulation=sys.formulation,
        variables=variables,
        drift=DriftSystem(variables, polys),
        diffusion=DiffusionSpec(noise_vars, entries),
        exact=sys.exact,
        truncated=sys.truncated,
        gauged=True,
        weight_index=len(variables) - 1,
    )


def factor_diffusion(sys: CompiledSystem, x: np.ndarray):
    """Evaluate D at the state and factor it; returns (B, residual)."""
    from .factorization import factor_complex_symmetric

    return factor_complex_symmetric(sys.diffusion_matrix(x))
