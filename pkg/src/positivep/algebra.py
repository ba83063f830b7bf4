"""Polynomial algebra over phase-space symbols.

The stochastic formulation works with normally ordered Hamiltonians that are
polynomials in independent complex variables: one pair (alpha_i, alphadag_i)
per boson mode and, per emitter, either an effective density matrix block
rho_{a,pq} or a pair of level amplitudes (C_{a,p}, Cdag_{a,p}).  alphadag is an
independent variable, not the conjugate of alpha; same for Cdag.

Everything downstream (drift construction, diffusion matrices, observable
mapping) is formal differentiation and multiplication of these polynomials, so
the representation is kept exact: a polynomial is a mapping from a canonically
sorted symbol tuple to a complex coefficient, and equality is decidable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Sequence, Union

__all__ = [
    "PhaseSymbol",
    "Monomial",
    "Polynomial",
    "HamiltonianIR",
    "FieldOp",
    "SigmaOp",
    "OperatorTerm",
    "field_amp",
    "field_amp_dag",
    "emitter_rho",
    "cvar",
    "cvar_dag",
    "differentiate",
    "evaluate",
    "substitute_sigma",
    "dagger",
    "dagger_symbols",
    "to_cvariables",
    "creation_count",
    "annihilation_count",
    "validate_exactness",
    "ExactnessReport",
]

# symbol kinds
FIELD = 0        # alpha_i
FIELD_DAG = 1    # alphadag_i
RHO = 2          # rho_{a,pq}
CVAR = 3         # C_{a,p}
CVAR_DAG = 4     # Cdag_{a,p}

_KIND_NAMES = {FIELD: "a", FIELD_DAG: "adag", RHO: "rho", CVAR: "C", CVAR_DAG: "Cdag"}


@dataclass(frozen=True, order=False)
class PhaseSymbol:
    """A single phase-space variable.

    ``idx`` is the mode index for field symbols and the emitter index for
    rho/C symbols.  ``p``/``q`` are level indices (``q`` unused for C symbols).
    """

    kind: int
    idx: int
    p: int = 0
    q: int = 0

    def sort_key(self):
        # canonical monomial order: modes before emitters, ascending index,
        # daggered before undaggered within one mode/emitter
        if self.kind == FIELD:
            return (0, self.idx, 1, 0, 0)
        if self.kind == FIELD_DAG:
            return (0, self.idx, 0, 0, 0)
        if self.kind == CVAR_DAG:
            return (1, self.idx, 0, self.p, 0)
        if self.kind == CVAR:
            return (1, self.idx, 1, self.p, 0)
        return (1, self.idx, 0, self.p, self.q)  # RHO

    def __lt__(self, other: "PhaseSymbol"):
        return self.sort_key() < other.sort_key()

    def __str__(self):
        if self.kind in (FIELD, FIELD_DAG):
            return f"{_KIND_NAMES[self.kind]}({self.idx})"
        if self.kind == RHO:
            return f"rho({self.idx},{self.p},{self.q})"
        return f"{_KIND_NAMES[self.kind]}({self.idx},{self.p})"

    __repr__ = __str__


def field_amp(mode: int) -> PhaseSymbol:
    return PhaseSymbol(FIELD, mode)


def field_amp_dag(mode: int) -> PhaseSymbol:
    return PhaseSymbol(FIELD_DAG, mode)


def emitter_rho(emitter: int, p: int, q: int) -> PhaseSymbol:
    return PhaseSymbol(RHO, emitter, p, q)


def cvar(emitter: int, p: int) -> PhaseSymbol:
    return PhaseSymbol(CVAR, emitter, p)


def cvar_dag(emitter: int, p: int) -> PhaseSymbol:
    return PhaseSymbol(CVAR_DAG, emitter, p)


@dataclass(frozen=True)
class Monomial:
    coefficient: complex
    symbols: tuple    # canonically sorted tuple of PhaseSymbol

    def degree(self) -> int:
        return len(self.symbols)


class Polynomial:
    """Sum of canonically ordered monomials with merged coefficients.

    Immutable by convention: all operations return new instances.  Exact zero
    coefficients are dropped, so ``p == q`` is structural equality of the
    reduced forms.
    """

    __slots__ = ("_terms",)

    def __init__(self, terms: Mapping[tuple, complex] | None = None):
        reduced = {}
        if terms:
            for syms, c in terms.items():
                c = complex(c)
                if c != 0:
                    key = tuple(sorted(syms, key=PhaseSymbol.sort_key))
                    reduced[key] = reduced.get(key, 0j) + c
            reduced = {k: v for k, v in reduced.items() if v != 0}
        self._terms = reduced

    # construction helpers -------------------------------------------------

    @staticmethod
    def zero() -> "Polynomial":
        return Polynomial()

    @staticmethod
    def constant(c: complex) -> "Polynomial":
        return Polynomial({(): complex(c)})

    @staticmethod
    def symbol(s: PhaseSymbol) -> "Polynomial":
        return Polynomial({(s,): 1.0 + 0j})

    # views -----------------------------------------------------------------

    @property
    def terms(self) -> Mapping[tuple, complex]:
        return self._terms

    def monomials(self) -> Iterator[Monomial]:
        for syms in sorted(self._terms, key=lambda t: tuple(s.sort_key() for s in t)):
            yield Monomial(self._terms[syms], syms)

    def is_zero(self) -> bool:
        return not self._terms

    def free_symbols(self) -> set:
        out = set()
        for syms in self._terms:
            out.update(syms)
        return out

    def max_degree(self) -> int:
        return max((len(s) for s in self._terms), default=0)

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = _as_poly(other)
        out = dict(self._terms)
        for syms, c in other._terms.items():
            out[syms] = out.get(syms, 0j) + c
        return Polynomial(out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial({s: -c for s, c in self._terms.items()})

    def __sub__(self, other):
        return self + (-_as_poly(other))

    def __rsub__(self, other):
        return _as_poly(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float, complex)):
            return Polynomial({s: c * other for s, c in self._terms.items()})
        other = _as_poly(other)
        out = {}
        for s1, c1 in self._terms.items():
            for s2, c2 in other._terms.items():
                key = tuple(sorted(s1 + s2, key=PhaseSymbol.sort_key))
                out[key] = out.get(key, 0j) + c1 * c2
        return Polynomial(out)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        if not isinstance(n, int) or n < 0:
            raise ValueError("polynomial powers must be nonnegative integers")
        out = Polynomial.constant(1.0)
        for _ in range(n):
            out = out * self
        return out

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._terms == other._terms

    def __hash__(self):
        return hash(frozenset(self._terms.items()))

    def __str__(self):
        if not self._terms:
            return "0"
        parts = []
        for m in self.monomials():
            factors = "*".join(str(s) for s in m.symbols) or "1"
            parts.append(f"({m.coefficient})*{factors}")
        return " + ".join(parts)

    __repr__ = __str__

    # calculus and substitution ----------------------------------------------

    def differentiate(self, s: PhaseSymbol) -> "Polynomial":
        out = {}
        for syms, c in self._terms.items():
            k = syms.count(s)
            if k == 0:
                continue
            rest = list(syms)
            rest.remove(s)
            key = tuple(rest)
            out[key] = out.get(key, 0j) + k * c
        return Polynomial(out)

    def evaluate(self, assignment: Mapping[PhaseSymbol, complex]) -> complex:
        total = 0j
        for syms, c in self._terms.items():
            v = c
            for s in syms:
                v *= assignment[s]
            total += v
        return total

    def map_symbols(self, fn: Callable[[PhaseSymbol], "Polynomial"]) -> "Polynomial":
        """Substitute every symbol by a polynomial and expand."""
        out = Polynomial.zero()
        for syms, c in self._terms.items():
            term = Polynomial.constant(c)
            for s in syms:
                term = term * fn(s)
            out = out + term
        return out


HamiltonianIR = Polynomial


def _as_poly(x) -> Polynomial:
    if isinstance(x, Polynomial):
        return x
    if isinstance(x, PhaseSymbol):
        return Polynomial.symbol(x)
    if isinstance(x, (int, float, complex)):
        return Polynomial.constant(x)
    raise TypeError(f"cannot coerce {type(x)!r} to Polynomial")


def differentiate(h: Polynomial, s: PhaseSymbol) -> Polynomial:
    """Formal partial derivative; symbols are mutually independent."""
    return h.differentiate(s)


def evaluate(h: Polynomial, assignment: Mapping[PhaseSymbol, complex]) -> complex:
    return h.evaluate(assignment)


# ---------------------------------------------------------------------------
# dagger involution
# ---------------------------------------------------------------------------

_DAG_MAP = {FIELD: FIELD_DAG, FIELD_DAG: FIELD, CVAR: CVAR_DAG, CVAR_DAG: CVAR}


def dagger_symbol(s: PhaseSymbol) -> PhaseSymbol:
    if s.kind == RHO:
        # rho_{pq} represents the projector |q><p|, whose adjoint is |p><q|
        return PhaseSymbol(RHO, s.idx, s.q, s.p)
    return PhaseSymbol(_DAG_MAP[s.kind], s.idx, s.p, s.q)


def dagger_symbols(syms: Sequence[PhaseSymbol]) -> tuple:
    return tuple(sorted((dagger_symbol(s) for s in syms), key=PhaseSymbol.sort_key))


def dagger(h: Polynomial) -> Polynomial:
    """Image of the polynomial under the operator adjoint.

    Hermitian Hamiltonians are fixed points of this map.
    """
    return Polynomial({dagger_symbols(syms): c.conjugate() for syms, c in h.terms.items()})


# ---------------------------------------------------------------------------
# operator-level terms and the sigma substitution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldOp:
    mode: int
    dag: bool


@dataclass(frozen=True)
class SigmaOp:
    emitter: int
    p: int
    q: int


# an operator term is (coefficient, ordered factor tuple); factor order is the
# order the operators were written in, which matters before substitution
OperatorTerm = tuple  # (complex, tuple[FieldOp | SigmaOp, ...])


class NormalOrderError(ValueError):
    pass


def _check_normal_order(factors) -> None:
    seen_undagged = set()
    sigma_seen = set()
    for f in factors:
        if isinstance(f, FieldOp):
            if f.dag:
                if f.mode in seen_undagged:
                    raise NormalOrderError(
                        f"mode {f.mode}: creation operator appears after an "
                        "annihilation operator; terms must be normally ordered"
                    )
            else:
                seen_undagged.add(f.mode)
        elif isinstance(f, SigmaOp):
            if f.emitter in sigma_seen:
                raise NormalOrderError(
                    f"emitter {f.emitter}: more than one projector in a single "
                    "product; same-emitter products are excluded by the "
                    "composite-boson rule"
                )
            sigma_seen.add(f.emitter)
        else:
            raise TypeError(f"unknown operator factor {f!r}")


def substitute_sigma(terms: Iterable[OperatorTerm]) -> Polynomial:
    """Map normally ordered operator terms onto phase-space symbols.

    a_i -> alpha_i, adag_i -> alphadag_i and sigma_{a,pq} -> rho_{a,qp}; the
    index transposition on rho is part of the representation and is applied
    exactly once, here.  Input terms must be normally ordered per mode and
    contain at most one sigma per emitter.
    """
    out = Polynomial.zero()
    for coeff, factors in terms:
        _check_normal_order(factors)
        syms = []
        for f in factors:
            if isinstance(f, FieldOp):
                syms.append(PhaseSymbol(FIELD_DAG if f.dag else FIELD, f.mode))
            else:
                syms.append(PhaseSymbol(RHO, f.emitter, f.q, f.p))
        out = out + Polynomial({tuple(syms): coeff})
    return out


def to_cvariables(h: Polynomial) -> Polynomial:
    """Rewrite rho_{a,pq} as C_{a,p} * Cdag_{a,q}; other symbols pass through."""

    def sub(s: PhaseSymbol) -> Polynomial:
        if s.kind == RHO:
            return Polynomial({(PhaseSymbol(CVAR, s.idx, s.p), PhaseSymbol(CVAR_DAG, s.idx, s.q)): 1.0 + 0j})
        return Polynomial.symbol(s)

    return h.map_symbols(sub)


# ---------------------------------------------------------------------------
# exactness of the second-order truncation
# ---------------------------------------------------------------------------


def creation_count(syms: Sequence[PhaseSymbol]) -> int:
    """Creation-class factor count; a rho symbol carries one of each class."""
    return sum(1 for s in syms if s.kind in (FIELD_DAG, CVAR_DAG, RHO))


def annihilation_count(syms: Sequence[PhaseSymbol]) -> int:
    return sum(1 for s in syms if s.kind in (FIELD, CVAR, RHO))


@dataclass
class ExactnessReport:
    exact: bool
    offending: list

    def __bool__(self):
        return self.exact


def validate_exactness(h: Polynomial) -> ExactnessReport:
    """Classify whether second-order derivatives capture the full generator.

    The phase-space generator expands in pure creation-class (and pure
    annihilation-class) derivatives of H; all third and higher derivatives
    vanish identically iff every monomial has at most two creation-class and
    at most two annihilation-class factors, counting a rho factor once in each
    class.  Models failing this are integrable only under explicit truncation.
    """
    bad = []
    for m in h.monomials():
        if creation_count(m.symbols) > 2 or annihilation_count(m.symbols) > 2:
            bad.append(m)
    return ExactnessReport(exact=not bad, offending=bad)
