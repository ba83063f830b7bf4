"""Model containers: modes, emitters, Hamiltonian IR, Lindblad tensors, inits.

A ModelSpec is what the text parser produces and what the compiler consumes.
Validation lives here so models built programmatically get the same checks as
parsed ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import algebra
from .algebra import FIELD, FIELD_DAG, RHO, PhaseSymbol, Polynomial

__all__ = [
    "ModelError",
    "ModeSpec",
    "EmitterSpec",
    "LindbladSpec",
    "InitialStateSpec",
    "ModelSpec",
    "RHO_FORM",
    "CVAR_FORM",
    "format_complex",
]

RHO_FORM = "rho"
CVAR_FORM = "cvar"

# sampling strategies for the initial emitter phases
ETA_ON = "on"          # weighted unit-phase sampling
ETA_OFF = "off"
ETA_PROPER = "proper"  # genuine-probability alternative, for cross-checks


class ModelError(ValueError):
    """Raised for structurally invalid models."""


@dataclass
class ModeSpec:
    name: str
    index: int
    alpha0: complex = 0j


@dataclass
class EmitterSpec:
    name: str
    index: int
    labels: Tuple[str, ...]
    # exactly one of c0 (pure) / p0 (mixed) is authoritative; p0 is always
    # derivable and kept in sync by ModelSpec.validate()
    c0: Optional[np.ndarray] = None
    p0: Optional[np.ndarray] = None
    eta: str = ETA_ON
    theta: str = ETA_ON

    @property
    def levels(self) -> int:
        return len(self.labels)

    def level_index(self, token: str) -> int:
        if token in self.labels:
            return self.labels.index(token)
        try:
            i = int(token)
        except ValueError:
            raise ModelError(
                f"emitter {self.name}: unknown level label {token!r} "
                f"(have {', '.join(self.labels)})"
            ) from None
        if not 0 <= i < self.levels:
            raise ModelError(f"emitter {self.name}: level index {i} out of range")
        return i


@dataclass
class LindbladSpec:
    """Rate tensor gamma_{pqrs} for one emitter.

    Hermitian symmetry gamma*_{pqrs} = gamma_{rspq} and positive
    semidefiniteness of the (pq),(rs) matricization are required; both are
    what make the tensor decomposable into jump operators.
    """

    emitter: int
    gamma: np.ndarray  # (L, L, L, L) complex

    def matricized(self) -> np.ndarray:
        n = self.gamma.shape[0]
        return self.gamma.reshape(n * n, n * n)

    def validate(self, name: str = "") -> None:
        g = np.asarray(self.gamma, dtype=complex)
        if g.ndim != 4 or len(set(g.shape)) != 1:
            raise ModelError(f"lindblad {name}: gamma must be an (L,L,L,L) tensor")
        m = self.matricized()
        scale = float(np.max(np.abs(m))) if m.size else 0.0
        if scale == 0.0:
            return
        herm_err = float(np.max(np.abs(m - m.conj().T)))
        if herm_err > 1e-12 * scale:
            raise ModelError(
                f"lindblad {name}: gamma_(pq),(rs) is not Hermitian "
                f"(max asymmetry {herm_err:.3e}); supply conjugate partners"
            )
        evals = np.linalg.eigvalsh((m + m.conj().T) / 2.0)
        norm = float(np.max(np.abs(evals)))
        if evals.min() < -1e-10 * norm:
            raise ModelError(
                f"lindblad {name}: gamma is not positive semidefinite "
                f"(min eigenvalue {evals.min():.3e}, norm {norm:.3e})"
            )


@dataclass
class InitialStateSpec:
    """Initial data the per-trajectory sampler consumes."""

    alpha0: np.ndarray          # (n_modes,) complex
    emitter_p0: List[np.ndarray]    # per emitter (L,L), Hermitian, trace 1
    emitter_c0: List[Optional[np.ndarray]]  # per emitter pure vector or None
    eta: List[str]
    theta: List[str]


@dataclass
class ModelSpec:
    modes: List[ModeSpec] = field(default_factory=list)
    emitters: List[EmitterSpec] = field(default_factory=list)
    constants: Dict[str, complex] = field(default_factory=dict)
    hamiltonian: Polynomial = field(default_factory=Polynomial.zero)
    lindblad: Dict[int, LindbladSpec] = field(default_factory=dict)
    # (label, [(coeff, operator factor tuple), ...]) in operator language
    observables: List[Tuple[str, list]] = field(default_factory=list)
    # (mode index, fock cutoff)
    reconstructions: List[Tuple[int, int]] = field(default_factory=list)

    # ------------------------------------------------------------------

    @property
    def hbar(self) -> float:
        return float(np.real(self.constants.get("hbar", 1.0)))

    def mode_by_name(self, name: str) -> ModeSpec:
        for m in self.modes:
            if m.name == name:
                return m
        raise ModelError(f"unknown mode {name!r}")

    def emitter_by_name(self, name: str) -> EmitterSpec:
        for e in self.emitters:
            if e.name == name:
                return e
        raise ModelError(f"unknown emitter {name!r}")

    def variables(self, formulation: str = RHO_FORM) -> List[PhaseSymbol]:
        """State-vector layout: field pairs interleaved, then emitter blocks."""
        out: List[PhaseSymbol] = []
        for m in self.modes:
            out.append(algebra.field_amp(m.index))
            out.append(algebra.field_amp_dag(m.index))
        for e in self.emitters:
            if formulation == RHO_FORM:
                for p in range(e.levels):
                    for q in range(e.levels):
                        out.append(algebra.emitter_rho(e.index, p, q))
            elif formulation == CVAR_FORM:
                for p in range(e.levels):
                    out.append(algebra.cvar(e.index, p))
                for p in range(e.levels):
                    out.append(algebra.cvar_dag(e.index, p))
            else:
                raise ModelError(f"unknown formulation {formulation!r}")
        return out

    def initial_state(self) -> InitialStateSpec:
        self._sync_initial_data()
        return InitialStateSpec(
            alpha0=np.array([m.alpha0 for m in self.modes], dtype=complex),
            emitter_p0=[e.p0.copy() for e in self.emitters],
            emitter_c0=[None if e.c0 is None else e.c0.copy() for e in self.emitters],
            eta=[e.eta for e in self.emitters],
            theta=[e.theta for e in self.emitters],
        )

    # ------------------------------------------------------------------

    def _sync_initial_data(self) -> None:
        for e in self.emitters:
            if e.c0 is None and e.p0 is None:
                ground = np.zeros(e.levels, dtype=complex)
                ground[0] = 1.0
                e.c0 = ground
            if e.c0 is not None:
                e.c0 = np.asarray(e.c0, dtype=complex)
                e.p0 = np.outer(e.c0, e.c0.conj())

    def validate(self) -> None:
        names = [m.name for m in self.modes] + [e.name for e in self.emitters]
        if len(set(names)) != len(names):
            raise ModelError("mode/emitter names must be unique")
        self._sync_initial_data()

        for e in self.emitters:
            if e.levels < 2:
                raise ModelError(f"emitter {e.name}: needs at least 2 levels")
            if len(set(e.labels)) != e.levels:
                raise ModelError(f"emitter {e.name}: duplicate level labels")
            if e.c0 is not None:
                norm = float(np.sum(np.abs(e.c0) ** 2))
                if abs(norm - 1.0) > 1e-12:
                    raise ModelError(
                        f"emitter {e.name}: pure initial amplitudes must have "
                        f"unit norm (got {norm!r})"
                    )
            p0 = np.asarray(e.p0, dtype=complex)
            if p0.shape != (e.levels, e.levels):
                raise ModelError(f"emitter {e.name}: p0 must be {e.levels}x{e.levels}")
            if np.max(np.abs(p0 - p0.conj().T)) > 1e-12:
                raise ModelError(f"emitter {e.name}: initial density matrix is not Hermitian")
            if abs(np.trace(p0) - 1.0) > 1e-12:
                raise ModelError(f"emitter {e.name}: initial density matrix trace != 1")
            if np.linalg.eigvalsh((p0 + p0.conj().T) / 2).min() < -1e-12:
                raise ModelError(f"emitter {e.name}: initial density matrix not PSD")
            if e.eta not in (ETA_ON, ETA_OFF, ETA_PROPER):
                raise ModelError(f"emitter {e.name}: bad eta setting {e.eta!r}")
            if e.theta not in (ETA_ON, ETA_OFF, ETA_PROPER):
                raise ModelError(f"emitter {e.name}: bad theta setting {e.theta!r}")

        self._validate_hamiltonian()

        for idx, lb in self.lindblad.items():
            if idx >= len(self.emitters):
                raise ModelError("lindblad tensor refers to an unknown emitter")
            e = self.emitters[idx]
            if lb.gamma.shape != (e.levels,) * 4:
                raise ModelError(
                    f"lindblad {e.name}: gamma shape {lb.gamma.shape} does not "
                    f"match {e.levels} levels"
                )
            lb.validate(e.name)

        for midx, cutoff in self.reconstructions:
            if midx >= len(self.modes):
                raise ModelError("reconstruct clause refers to an unknown mode")
            if cutoff < 1:
                raise ModelError("reconstruct cutoff must be >= 1")

    def _validate_hamiltonian(self) -> None:
        h = self.hamiltonian
        nm, ne = len(self.modes), len(self.emitters)
        scale = max((abs(c) for c in h.terms.values()), default=0.0)
        for syms, c in h.terms.items():
            if not np.isfinite(c):
                raise ModelError("hamiltonian has a non-finite coefficient")
            emitters_seen = set()
            for s in syms:
                if s.kind in (FIELD, FIELD_DAG):
                    if s.idx >= nm:
                        raise ModelError(f"hamiltonian references undeclared mode {s.idx}")
                elif s.kind == RHO:
                    if s.idx >= ne:
                        raise ModelError(f"hamiltonian references undeclared emitter {s.idx}")
                    L = self.emitters[s.idx].levels
                    if not (0 <= s.p < L and 0 <= s.q < L):
                        raise ModelError(
                            f"hamiltonian: rho level indices ({s.p},{s.q}) out of "
                            f"range for emitter {self.emitters[s.idx].name}"
                        )
                    if s.idx in emitters_seen:
                        raise ModelError(
                            f"hamiltonian: product of two projectors on emitter "
                            f"{self.emitters[s.idx].name}; same-emitter products "
                            "are excluded by the composite-boson rule"
                        )
                    emitters_seen.add(s.idx)
                else:
                    raise ModelError("hamiltonian IR must use field/rho symbols only")
        if scale > 0:
            dag = algebra.dagger(h)
            diff = dag - h
            err = max((abs(c) for c in diff.terms.values()), default=0.0)
            if err > 1e-12 * scale:
                raise ModelError(
                    "hamiltonian is not Hermitian under the dagger involution "
                    f"(max coefficient mismatch {err:.3e})"
                )

    # ------------------------------------------------------------------

    def print_dsl(self) -> str:
        """Render back to model-file text; parse(print(m)) reproduces m."""
        self._sync_initial_data()
        lines = []
        for m in self.modes:
            lines.append(f"mode {m.name};")
        for e in self.emitters:
            if e.labels == _default_labels(e.levels):
                lines.append(f"emitter {e.name} levels {e.levels};")
            else:
                lines.append(f"emitter {e.name} levels {' '.join(e.labels)};")
        if self.hbar != 1.0:
            lines.append(f"const hbar = {format_complex(self.hbar)};")
        lines.append(f"H = {self._print_poly(self.hamiltonian)};")
        for idx, lb in sorted(self.lindblad.items()):
            e = self.emitters[idx]
            g = lb.gamma
            for p in range(e.levels):
                for q in range(e.levels):
                    for r in range(e.levels):
                        for s in range(e.levels):
                            if g[p, q, r, s] != 0:
                                lines.append(
                                    f"lindblad {e.name} : gamma({e.labels[p]},{e.labels[q]},"
                                    f"{e.labels[r]},{e.labels[s]}) = "
                                    f"{format_complex(g[p, q, r, s])};"
                                )
        for m in self.modes:
            if m.alpha0 != 0:
                lines.append(f"init mode {m.name} coherent {format_complex(m.alpha0)};")
        for e in self.emitters:
            if e.c0 is not None:
                if not (e.c0[0] == 1.0 and np.all(e.c0[1:] == 0)):
                    entries = ", ".join(format_complex(z) for z in e.c0)
                    lines.append(f"init emitter {e.name} pure ({entries});")
            else:
                rows = []
                for p in range(e.levels):
                    rows.append("[" + ", ".join(format_complex(z) for z in e.p0[p]) + "]")
                lines.append(f"init emitter {e.name} mixed [{', '.join(rows)}];")
            if e.eta != ETA_ON:
                lines.append(f"eta {e.name} {e.eta};")
            if e.theta != ETA_ON:
                lines.append(f"theta {e.name} {e.theta};")
        for label, terms in self.observables:
            lines.append(f'observe "{label}" = {self._print_operator_terms(terms)};')
        for midx, cutoff in self.reconstructions:
            lines.append(f"reconstruct mode {self.modes[midx].name} cutoff {cutoff};")
        return "\n".join(lines) + "\n"

    def _print_poly(self, poly: Polynomial) -> str:
        if poly.is_zero():
            return "0"
        parts = []
        for m in poly.monomials():
            factors = [format_complex(m.coefficient)]
            for s in m.symbols:
                factors.append(self._print_symbol(s))
            parts.append("*".join(factors))
        return " + ".join(parts)

    def _print_symbol(self, s: PhaseSymbol) -> str:
        if s.kind == FIELD:
            return f"a({self.modes[s.idx].name})"
        if s.kind == FIELD_DAG:
            return f"adag({self.modes[s.idx].name})"
        if s.kind == RHO:
            e = self.emitters[s.idx]
            return f"rho({e.name},{e.labels[s.p]},{e.labels[s.q]})"
        raise ModelError("C-variable symbols are internal and never printed")

    def _print_operator_terms(self, terms: list) -> str:
        parts = []
        for coeff, factors in terms:
            bits = [format_complex(coeff)]
            for f in factors:
                if isinstance(f, algebra.FieldOp):
                    name = self.modes[f.mode].name
                    bits.append(f"adag({name})" if f.dag else f"a({name})")
                else:
                    e = self.emitters[f.emitter]
                    bits.append(f"sigma({e.name},{e.labels[f.p]},{e.labels[f.q]})")
            parts.append("*".join(bits))
        return " + ".join(parts) if parts else "0"


def _default_labels(n: int) -> Tuple[str, ...]:
    if n == 2:
        return ("g", "e")
    return tuple(str(i) for i in range(n))


def format_complex(z: complex) -> str:
    """Shortest reparseable literal: 2, -0.5, 2i, (1+2i)."""
    z = complex(z)
    re, im = z.real, z.imag
    if im == 0.0:
        return repr(re) if re != int(re) else repr(int(re))
    ims = repr(im) if im != int(im) else repr(int(im))
    if re == 0.0:
        return f"{ims}i" if im >= 0 else f"(0-{ims.lstrip('-')}i)"
    res = repr(re) if re != int(re) else repr(int(re))
    sign = "+" if im >= 0 else "-"
    return f"({res}{sign}{ims.lstrip('-')}i)"
