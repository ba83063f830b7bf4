"""Exact reference evolution on a truncated Hilbert space.

Every model small enough to fit in a few thousand basis states can be
integrated exactly: build sparse matrices for the mode ladder operators
and the emitter projectors, reassemble the Hamiltonian and the jump
operators, and run a dense Runge-Kutta integration of the Lindblad
master equation

    drho/dt = -(i/hbar) [H, rho] + 1/2 sum_k ([L_k rho, L_k^+] + [L_k, rho L_k^+]).

The stochastic engine is validated against the expectation values this
module produces.

Conventions
-----------
The Hamiltonian stored on a ``ModelSpec`` is a polynomial in commuting
phase-space symbols and stands for the normally ordered operator: per
mode, every creation operator sits left of every annihilation operator,
and the phase symbol ``rho(a, p, q)`` stands for the projector
``|q><p|`` of emitter ``a``.  Jump operators come from the eigenvalue
decomposition of the (pq),(rs) matricization of each gamma tensor, with
sigma_pq = |p><q|.

Tensor factors are ordered modes first, then emitters, both in
declaration order, matching the sampler's layout of initial data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from . import algebra
from .algebra import FIELD, FIELD_DAG, RHO, FieldOp, SigmaOp
from .engine import TimeGrid
from .model import ModelSpec

__all__ = [
    "DIMENSION_GUARD",
    "DensityOperator",
    "HilbertConfig",
    "MasterSolution",
    "OperatorSet",
    "OracleError",
    "build_operators",
    "coherent_truncation_defect",
    "evolve_master",
    "expectation",
    "initial_state",
    "observable_operator",
    "run_oracle",
]


class OracleError(RuntimeError):
    pass


# A density matrix larger than this is out of scope for a desk-scale
# reference integration; the stochastic engine exists for those systems.
DIMENSION_GUARD = 4096

HERMITICITY_TOL = 1e-10
TRACE_TOL = 1e-10
EIGENVALUE_FLOOR = -1e-8
TRACE_DRIFT_TOL = 1e-9
MAX_DT_HALVINGS = 4

# relative cutoff below which eigenvalues of the matricized gamma tensor
# are treated as zero and contribute no jump operator
GAMMA_EIGENVALUE_CUT = 1e-12


# ---------------------------------------------------------------------------
# configuration and state types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HilbertConfig:
    """Truncation choices fixing the finite-dimensional basis.

    ``n_max[i]`` keeps Fock states 0..n_max[i] for mode i, so the factor
    dimension is ``n_max[i] + 1``; emitters contribute their full level
    count.  The total dimension is capped at :data:`DIMENSION_GUARD`.
    """

    n_max: Tuple[int, ...]
    levels: Tuple[int, ...]

    def __post_init__(self):
        for n in self.n_max:
            if n < 1:
                raise OracleError("mode cutoff n_max must be at least 1")
        for L in self.levels:
            if L < 2:
                raise OracleError("emitters need at least 2 levels")
        d = self.dimension
        if d > DIMENSION_GUARD:
            raise OracleError(
                f"truncated Hilbert space has dimension {d}, above the "
                f"guard of {DIMENSION_GUARD}; lower the mode cutoffs"
            )

    @classmethod
    def for_model(cls, m: ModelSpec, n_max: Union[int, Sequence[int]]) -> "HilbertConfig":
        if isinstance(n_max, int):
            cuts = (n_max,) * len(m.modes)
        else:
            cuts = tuple(int(n) for n in n_max)
            if len(cuts) != len(m.modes):
                raise OracleError(
                    f"got {len(cuts)} mode cutoffs for {len(m.modes)} modes"
                )
        return cls(cuts, tuple(e.levels for e in m.emitters))

    @property
    def factor_dims(self) -> Tuple[int, ...]:
        return tuple(n + 1 for n in self.n_max) + self.levels

    @property
    def dimension(self) -> int:
        d = 1
        for n in self.factor_dims:
            d *= n
        return d


@dataclass
class DensityOperator:
    """A d x d density matrix with its defining invariants.

    ``validate`` is called on every recorded output of the master
    integration, so a state that drifts away from Hermiticity, unit
    trace, or positivity is reported rather than silently propagated.
    """

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise OracleError("density matrix must be square")

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def validate(self) -> None:
        m = self.matrix
        if not np.all(np.isfinite(m.view(np.float64))):
            raise OracleError("density matrix has non-finite entries")
        herm = float(np.max(np.abs(m - m.conj().T)))
        if herm > HERMITICITY_TOL:
            raise OracleError(
                f"density matrix is not Hermitian (max asymmetry {herm:.3e})"
            )
        tr = complex(np.trace(m))
        if abs(tr - 1.0) > TRACE_TOL:
            raise OracleError(
                f"density matrix trace deviates from 1 by {abs(tr - 1.0):.3e}"
            )
        lo = float(np.linalg.eigvalsh((m + m.conj().T) / 2.0).min())
        if lo < EIGENVALUE_FLOOR:
            raise OracleError(
                f"density matrix has eigenvalue {lo:.3e} below the "
                f"{EIGENVALUE_FLOOR:g} floor"
            )


@dataclass
class OperatorSet:
    """Sparse operators for one model on one truncation.

    ``sigma[a][(p, q)]`` is |p><q| on emitter a embedded in the full
    space; ``annihilate``/``create`` are the embedded mode ladder
    operators.
    """

    config: HilbertConfig
    hbar: float
    annihilate: List[sp.spmatrix]
    create: List[sp.spmatrix]
    sigma: List[Dict[Tuple[int, int], sp.spmatrix]]
    hamiltonian: sp.spmatrix
    lindblads: List[sp.spmatrix]
    identity: sp.spmatrix = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# operator construction
# ---------------------------------------------------------------------------


def _embed(local: sp.spmatrix, slot: int, dims: Sequence[int]) -> sp.spmatrix:
    """Kronecker-embed a single-factor operator into the product space."""
    left = 1
    for d in dims[:slot]:
        left *= d
    right = 1
    for d in dims[slot + 1:]:
        right *= d
    op = local
    if left > 1:
        op = sp.kron(sp.identity(left, dtype=complex, format="csr"), op)
    if right > 1:
        op = sp.kron(op, sp.identity(right, dtype=complex, format="csr"))
    return sp.csr_matrix(op)


def _local_annihilate(n_max: int) -> sp.spmatrix:
    off = np.sqrt(np.arange(1, n_max + 1, dtype=float))
    return sp.diags(off, offsets=1, dtype=complex, format="csr")


def _local_projector(levels: int, p: int, q: int) -> sp.spmatrix:
    op = sp.lil_matrix((levels, levels), dtype=complex)
    op[p, q] = 1.0
    return sp.csr_matrix(op)


def _assemble_hamiltonian(m: ModelSpec, ops: OperatorSet) -> sp.spmatrix:
    d = ops.config.dimension
    total = sp.csr_matrix((d, d), dtype=complex)
    for syms, coeff in m.hamiltonian.terms.items():
        n_dag = [0] * len(m.modes)
        n_ann = [0] * len(m.modes)
        projectors = []
        for s in syms:
            if s.kind == FIELD:
                n_ann[s.idx] += 1
            elif s.kind == FIELD_DAG:
                n_dag[s.idx] += 1
            elif s.kind == RHO:
                # the phase symbol rho(a, p, q) stands for |q><p|
                projectors.append(ops.sigma[s.idx][(s.q, s.p)])
            else:  # pragma: no cover - ruled out by ModelSpec.validate
                raise OracleError("unexpected symbol kind in the Hamiltonian")
        term = sp.identity(d, dtype=complex, format="csr") * coeff
        for i in range(len(m.modes)):
            for _ in range(n_dag[i]):
                term = term @ ops.create[i]
            for _ in range(n_ann[i]):
                term = term @ ops.annihilate[i]
        for proj in projectors:
            term = term @ proj
        total = total + term
    return sp.csr_matrix(total)


def _jump_operators(m: ModelSpec, ops: OperatorSet) -> List[sp.spmatrix]:
    jumps = []
    for a in sorted(m.lindblad):
        lb = m.lindblad[a]
        L = m.emitters[a].levels
        g = lb.matricized()
        evals, evecs = np.linalg.eigh(g)
        cut = GAMMA_EIGENVALUE_CUT * float(np.max(np.abs(evals))) if evals.size else 0.0
        for k in range(evals.size):
            lam = float(evals[k])
            if lam <= cut:
                # zero modes and roundoff-negative values carry no jump
                continue
            coeffs = sqrt(lam) * evecs[:, k].reshape(L, L)
            d = ops.config.dimension
            jump = sp.csr_matrix((d, d), dtype=complex)
            for p in range(L):
                for q in range(L):
                    c = coeffs[p, q]
                    if c != 0:
                        jump = jump + c * ops.sigma[a][(p, q)]
            jumps.append(sp.csr_matrix(jump))
    return jumps


def build_operators(m: ModelSpec, h: HilbertConfig) -> OperatorSet:
    """Embed ladder and projector operators and rebuild H and the L_k."""
    if h.levels != tuple(e.levels for e in m.emitters) or len(h.n_max) != len(m.modes):
        raise OracleError("truncation config does not match the model layout")
    dims = h.factor_dims
    n_modes = len(m.modes)

    annihilate = []
    create = []
    for i, n in enumerate(h.n_max):
        a_local = _local_annihilate(n)
        a_full = _embed(a_local, i, dims)
        annihilate.append(a_full)
        create.append(sp.csr_matrix(a_full.conj().T))

    sigma: List[Dict[Tuple[int, int], sp.spmatrix]] = []
    for j, e in enumerate(m.emitters):
        table = {}
        for p in range(e.levels):
            for q in range(e.levels):
                table[(p, q)] = _embed(
                    _local_projector(e.levels, p, q), n_modes + j, dims
                )
        sigma.append(table)

    ops = OperatorSet(
        config=h,
        hbar=m.hbar,
        annihilate=annihilate,
        create=create,
        sigma=sigma,
        hamiltonian=sp.csr_matrix((h.dimension, h.dimension), dtype=complex),
        lindblads=[],
        identity=sp.identity(h.dimension, dtype=complex, format="csr"),
    )
    ops.hamiltonian = _assemble_hamiltonian(m, ops)
    ops.lindblads = _jump_operators(m, ops)
    return ops


def observable_operator(ops: OperatorSet, terms) -> sp.spmatrix:
    """Rebuild one observable from its (coefficient, factors) terms.

    Factors are multiplied in written order.  Terms repeating an emitter
    are dropped: their phase-space average vanishes identically, so the
    engine reports exactly zero for them, and the reference must score
    the same quantity.
    """
    d = ops.config.dimension
    total = sp.csr_matrix((d, d), dtype=complex)
    for coeff, factors in terms:
        emitters_seen = set()
        skip = False
        for f in factors:
            if isinstance(f, SigmaOp):
                if f.emitter in emitters_seen:
                    skip = True
                    break
                emitters_seen.add(f.emitter)
        if skip:
            continue
        term = ops.identity * coeff
        for f in factors:
            if isinstance(f, FieldOp):
                term = term @ (ops.create[f.mode] if f.dag else ops.annihilate[f.mode])
            elif isinstance(f, SigmaOp):
                term = term @ ops.sigma[f.emitter][(f.p, f.q)]
            else:
                raise OracleError(f"cannot rebuild an operator from {f!r}")
        total = total + term
    return sp.csr_matrix(total)


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------


def coherent_truncation_defect(alpha: complex, n_max: int) -> float:
    """Probability mass of a coherent state above the Fock cutoff."""
    x = abs(alpha) ** 2
    mass = 0.0
    term = np.exp(-x)
    for n in range(n_max + 1):
        mass += term
        term *= x / (n + 1)
    return max(0.0, 1.0 - mass)


def initial_state(m: ModelSpec, h: HilbertConfig) -> DensityOperator:
    """Truncated coherent modes tensored with the emitter matrices.

    Each coherent amplitude is expanded in the kept Fock states and
    renormalized, so the returned matrix always has unit trace; check
    :func:`coherent_truncation_defect` to see how much mass the cutoff
    discarded.
    """
    init = m.initial_state()
    rho = np.ones((1, 1), dtype=complex)
    for i, n in enumerate(h.n_max):
        alpha = init.alpha0[i]
        vec = np.zeros(n + 1, dtype=complex)
        vec[0] = 1.0
        for k in range(1, n + 1):
            vec[k] = vec[k - 1] * alpha / sqrt(k)
        vec *= np.exp(-abs(alpha) ** 2 / 2.0)
        nrm = float(np.linalg.norm(vec))
        if nrm == 0.0:
            raise OracleError(
                f"coherent amplitude {alpha} underflows at cutoff {n}"
            )
        vec /= nrm
        rho = np.kron(rho, np.outer(vec, vec.conj()))
    for p0 in init.emitter_p0:
        rho = np.kron(rho, np.asarray(p0, dtype=complex))
    out = DensityOperator(rho)
    out.validate()
    return out


def expectation(op, rho: DensityOperator) -> complex:
    """Tr(op rho) for a sparse or dense operator."""
    m = rho.matrix
    if sp.issparse(op):
        if op.shape != m.shape:
            raise OracleError(f"operator shape {op.shape} does not match state {m.shape}")
        return complex(op.multiply(m.T).sum())
    op = np.asarray(op)
    if op.shape != m.shape:
        raise OracleError(f"operator shape {op.shape} does not match state {m.shape}")
    return complex(np.sum(op * m.T))


# ---------------------------------------------------------------------------
# master-equation integration
# ---------------------------------------------------------------------------


@dataclass
class MasterSolution:
    """States recorded on the output grid, plus the step actually used.

    ``dt`` can be smaller than requested when the integration had to
    halve its step to keep the trace pinned; ``halvings`` counts how
    often that happened.
    """

    times: np.ndarray
    states: List[DensityOperator]
    dt: float
    halvings: int

    def expectations(self, op) -> np.ndarray:
        return np.array([expectation(op, s) for s in self.states])


def _lindblad_rhs(rho, h_eff, jump_pairs):
    out = h_eff @ rho - rho @ h_eff
    for ld, ldh, ll in jump_pairs:
        out = out + ld @ rho @ ldh - 0.5 * (ll @ rho + rho @ ll)
    return out


def _try_evolve(rho0, h_eff, jump_pairs, grid: TimeGrid):
    rho = rho0.copy()
    states = [DensityOperator(rho0.copy())]
    dt = grid.dt
    step = 0
    for _ in range(grid.n_out - 1):
        for _ in range(grid.stride):
            k1 = _lindblad_rhs(rho, h_eff, jump_pairs)
            k2 = _lindblad_rhs(rho + 0.5 * dt * k1, h_eff, jump_pairs)
            k3 = _lindblad_rhs(rho + 0.5 * dt * k2, h_eff, jump_pairs)
            k4 = _lindblad_rhs(rho + dt * k3, h_eff, jump_pairs)
            rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            rho = 0.5 * (rho + rho.conj().T)
            step += 1
            tr = complex(np.trace(rho))
            if not np.isfinite(tr.real) or abs(tr - 1.0) > TRACE_DRIFT_TOL:
                raise OracleError(
                    f"trace drifted by {abs(tr - 1.0):.3e} after {step} steps "
                    f"of size {dt:g}"
                )
        recorded = DensityOperator(rho.copy())
        recorded.validate()
        states.append(recorded)
    return states


def evolve_master(
    rho0: DensityOperator,
    ops: OperatorSet,
    t1: float,
    dt: float,
    *,
    t0: float = 0.0,
    stride: int = 1,
) -> MasterSolution:
    """Integrate the Lindblad equation with classical Runge-Kutta.

    Records the state every ``stride`` steps (the same output convention
    as the stochastic engine).  If the trace drifts by more than 1e-9,
    or an output state violates the density-matrix invariants, the step
    is halved and the whole run retried, up to four times.
    """
    rho0.validate()
    if rho0.dimension != ops.config.dimension:
        raise OracleError(
            f"initial state dimension {rho0.dimension} does not match the "
            f"operator set ({ops.config.dimension})"
        )
    h_eff = np.asarray((-1j / ops.hbar) * ops.hamiltonian.todense())
    jump_pairs = []
    for L in ops.lindblads:
        ld = np.asarray(L.todense())
        ldh = ld.conj().T
        jump_pairs.append((ld, ldh, ldh @ ld))

    grid = TimeGrid(t0, t1, dt, stride)
    last_err: Optional[OracleError] = None
    for halvings in range(MAX_DT_HALVINGS + 1):
        try:
            states = _try_evolve(rho0.matrix, h_eff, jump_pairs, grid)
        except OracleError as err:
            last_err = err
            grid = TimeGrid(t0, t1, grid.dt / 2.0, grid.stride * 2)
            continue
        return MasterSolution(grid.times(), states, grid.dt, halvings)
    raise OracleError(
        f"master equation failed to hold the trace after {MAX_DT_HALVINGS} "
        f"dt halvings: {last_err}"
    )


def run_oracle(
    m: ModelSpec,
    n_max: Union[int, Sequence[int]],
    t1: float,
    dt: float,
    *,
    t0: float = 0.0,
    stride: int = 1,
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Exact expectation series for every observable declared by a model.

    Returns the output times and a label -> complex array mapping, the
    same quantities the stochastic engine estimates.
    """
    h = HilbertConfig.for_model(m, n_max)
    ops = build_operators(m, h)
    rho0 = initial_state(m, h)
    sol = evolve_master(rho0, ops, t1, dt, t0=t0, stride=stride)
    series = {}
    for label, terms in m.observables:
        op = observable_operator(ops, terms)
        series[label] = sol.expectations(op)
    return sol.times, series
