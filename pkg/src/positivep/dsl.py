"""Parser for the plain-text model language and for gauge files.

Clause-oriented format, ';' terminated, '#' starts a comment:

    mode f;
    emitter A levels 2;            # labels g,e; or: emitter A levels s0 s1 s2;
    const g = 1.5;
    H = g*(adag(f)*rho(A,e,g) + a(f)*rho(A,g,e));
    lindblad A : gamma(g,e,g,e) = 0.159154943091895;
    init mode f coherent 1+0i;
    init emitter A pure (0, 1);
    init emitter A mixed [[0.5, 0], [0, 0.5]];
    eta A on;                      # or: eta off;  (global), values on|off|proper
    observe "P_e" = sigma(A,e,e);
    observe "n" = adag(f)*a(f);
    reconstruct mode f cutoff 12;

Expressions support +, -, *, parentheses and integer powers (^ or **).
Complex literals are written 1.5, 2i or 1+2i.  In H and gauge expressions the
calls a(m), adag(m), rho(e,p,q) (and C(e,p), Cdag(e,p) in gauge files) denote
phase-space variables; in observe clauses a(m), adag(m), sigma(e,p,q) denote
operators and keep their written order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import algebra
from .algebra import FieldOp, PhaseSymbol, Polynomial, SigmaOp
from .model import (
    EmitterSpec,
    LindbladSpec,
    ModeSpec,
    ModelError,
    ModelSpec,
)

__all__ = ["DSLError", "OperatorPoly", "parse_model", "parse_gauge", "tokenize"]


class DSLError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None, col: Optional[int] = None):
        if line is not None:
            msg = f"line {line}, col {col}: {msg}"
        super().__init__(msg)
        self.line = line
        self.col = col


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<comment>\#[^\n]*)
      | (?P<number>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?i?)
      | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
      | (?P<string>"[^"\n]*")
      | (?P<punct>\*\*|[;,()\[\]=:+\-*^])
    """,
    re.VERBOSE,
)


@dataclass
class Token:
    kind: str  # name | number | string | punct | end
    text: str
    line: int
    col: int
    value: complex = 0j


def tokenize(text: str) -> List[Token]:
    toks: List[Token] = []
    pos, line, line_start = 0, 1, 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DSLError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        col = pos - line_start + 1
        kind = m.lastgroup
        tok = m.group()
        if kind == "ws" or kind == "comment":
            nl = tok.count("\n")
            if nl:
                line += nl
                line_start = pos + tok.rindex("\n") + 1
        elif kind == "number":
            if tok.endswith("i"):
                val = complex(0.0, float(tok[:-1]))
            else:
                val = complex(float(tok), 0.0)
            toks.append(Token("number", tok, line, col, val))
        elif kind == "string":
            toks.append(Token("string", tok[1:-1], line, col))
        else:
            toks.append(Token(kind, tok, line, col))
        pos = m.end()
    toks.append(Token("end", "<end of input>", line, n - line_start + 1))
    return toks


# ---------------------------------------------------------------------------
# operator-level sums for observe clauses
# ---------------------------------------------------------------------------


class OperatorPoly:
    """Linear combination of ordered operator products.

    Unlike Polynomial, factor tuples are *not* sorted: operator order is
    physical (normal ordering is checked downstream, where the product is
    mapped onto trajectory variables).
    """

    __slots__ = ("terms",)

    def __init__(self, terms: Optional[Dict[tuple, complex]] = None):
        self.terms = {}
        if terms:
            for fac, c in terms.items():
                c = complex(c)
                if c != 0:
                    self.terms[fac] = self.terms.get(fac, 0j) + c
            self.terms = {k: v for k, v in self.terms.items() if v != 0}

    @staticmethod
    def constant(c: complex) -> "OperatorPoly":
        return OperatorPoly({(): complex(c)})

    @staticmethod
    def of(op) -> "OperatorPoly":
        return OperatorPoly({(op,): 1.0 + 0j})

    def __add__(self, other: "OperatorPoly") -> "OperatorPoly":
        out = dict(self.terms)
        for fac, c in other.terms.items():
            out[fac] = out.get(fac, 0j) + c
        return OperatorPoly(out)

    def __sub__(self, other: "OperatorPoly") -> "OperatorPoly":
        return self + (other * -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float, complex)):
            return OperatorPoly({f: c * other for f, c in self.terms.items()})
        out: Dict[tuple, complex] = {}
        for f1, c1 in self.terms.items():
            for f2, c2 in other.terms.items():
                key = f1 + f2
                out[key] = out.get(key, 0j) + c1 * c2
        return OperatorPoly(out)

    def __pow__(self, n: int) -> "OperatorPoly":
        out = OperatorPoly.constant(1.0)
        for _ in range(n):
            out = out * self
        return out

    def __eq__(self, other):
        if not isinstance(other, OperatorPoly):
            return NotImplemented
        return self.terms == other.terms

    def as_terms(self) -> List[Tuple[complex, list]]:
        """Deterministically ordered (coefficient, factor list) pairs."""

        def key(fac):
            return tuple(
                (0, f.mode, 0 if f.dag else 1)
                if isinstance(f, FieldOp)
                else (1, f.emitter, f.p, f.q)
                for f in fac
            )

        return [(self.terms[f], list(f)) for f in sorted(self.terms, key=key)]


# ---------------------------------------------------------------------------
# recursive-descent parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, toks: List[Token]):
        self.toks = toks
        self.i = 0

    def peek(self) -> Token:
        return self.toks[self.i]

    def next(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "end":
            self.i += 1
        return t

    def expect(self, kind: str, text: Optional[str] = None, what: str = "") -> Token:
        t = self.next()
        if t.kind != kind or (text is not None and t.text != text):
            want = what or (text if text is not None else kind)
            raise DSLError(f"expected {want}, got {t.text!r}", t.line, t.col)
        return t

    def at_punct(self, *texts: str) -> bool:
        t = self.peek()
        return t.kind == "punct" and t.text in texts


class _PhaseContext:
    """Resolves expression atoms to Polynomial over phase-space symbols."""

    def __init__(self, model: ModelSpec):
        self.model = model

    def constant(self, z: complex) -> Polynomial:
        return Polynomial.constant(z)

    def name(self, tok: Token) -> Polynomial:
        if tok.text in self.model.constants:
            return Polynomial.constant(self.model.constants[tok.text])
        raise DSLError(f"unknown constant {tok.text!r}", tok.line, tok.col)

    def call(self, fname: str, args: List[Token], tok: Token) -> Polynomial:
        if fname in ("a", "adag"):
            mode = _resolve_mode(self.model, _one(args, fname, tok))
            sym = algebra.field_amp_dag(mode) if fname == "adag" else algebra.field_amp(mode)
            return Polynomial.symbol(sym)
        if fname == "rho":
            e, p, q = _emitter_levels(self.model, args, 2, fname, tok)
            return Polynomial.symbol(algebra.emitter_rho(e.index, p, q))
        if fname in ("C", "Cdag"):
            raise DSLError(
                "C variables are not valid here; Hamiltonians are written "
                "with rho(...)",
                tok.line,
                tok.col,
            )
        if fname == "sigma":
            raise DSLError(
                "sigma(...) is operator-level; use rho(e,p,q) in this context",
                tok.line,
                tok.col,
            )
        raise DSLError(f"unknown symbol call {fname!r}", tok.line, tok.col)


class _GaugeContext(_PhaseContext):
    """Like _PhaseContext but admits C/Cdag variables (gauge files only)."""

    def call(self, fname: str, args: List[Token], tok: Token) -> Polynomial:
        if fname in ("C", "Cdag"):
            e, p = _emitter_level1(self.model, args, fname, tok)
            sym = (
                algebra.cvar_dag(e.index, p) if fname == "Cdag" else algebra.cvar(e.index, p)
            )
            return Polynomial.symbol(sym)
        return super().call(fname, args, tok)


class _OperatorContext:
    """Resolves expression atoms to OperatorPoly for observe clauses."""

    def __init__(self, model: ModelSpec):
        self.model = model

    def constant(self, z: complex) -> OperatorPoly:
        return OperatorPoly.constant(z)

    def name(self, tok: Token) -> OperatorPoly:
        if tok.text in self.model.constants:
            return OperatorPoly.constant(self.model.constants[tok.text])
        raise DSLError(f"unknown constant {tok.text!r}", tok.line, tok.col)

    def call(self, fname: str, args: List[Token], tok: Token) -> OperatorPoly:
        if fname in ("a", "adag"):
            mode = _resolve_mode(self.model, _one(args, fname, tok))
            return OperatorPoly.of(FieldOp(mode, fname == "adag"))
        if fname == "sigma":
            e, p, q = _emitter_levels(self.model, args, 2, fname, tok)
            return OperatorPoly.of(SigmaOp(e.index, p, q))
        if fname == "rho":
            raise DSLError(
                "observables are operator-level; use sigma(e,p,q) instead of rho",
                tok.line,
                tok.col,
            )
        raise DSLError(f"unknown operator call {fname!r}", tok.line, tok.col)


def _one(args: List[Token], fname: str, tok: Token) -> Token:
    if len(args) != 1:
        raise DSLError(f"{fname}() takes one argument", tok.line, tok.col)
    return args[0]


def _resolve_mode(model: ModelSpec, tok: Token) -> int:
    for m in model.modes:
        if m.name == tok.text:
            return m.index
    raise DSLError(f"unknown mode {tok.text!r}", tok.line, tok.col)


def _resolve_emitter(model: ModelSpec, tok: Token) -> EmitterSpec:
    for e in model.emitters:
        if e.name == tok.text:
            return e
    raise DSLError(f"unknown emitter {tok.text!r}", tok.line, tok.col)


def _level(e: EmitterSpec, tok: Token) -> int:
    try:
        return e.level_index(tok.text)
    except ModelError as exc:
        raise DSLError(str(exc), tok.line, tok.col) from None


def _emitter_levels(model, args, nlevels, fname, tok):
    if len(args) != nlevels + 1:
        raise DSLError(
            f"{fname}() takes an emitter and {nlevels} level argument(s)",
            tok.line,
            tok.col,
        )
    e = _resolve_emitter(model, args[0])
    levels = [_level(e, a) for a in args[1:]]
    return (e, *levels)


def _emitter_level1(model, args, fname, tok):
    e, p = _emitter_levels(model, args, 1, fname, tok)
    return e, p


# expression grammar ---------------------------------------------------------


def _parse_expr(p: _Parser, ctx):
    node = _parse_term(p, ctx)
    while p.at_punct("+", "-"):
        op = p.next().text
        rhs = _parse_term(p, ctx)
        node = node + rhs if op == "+" else node - rhs
    return node


def _parse_term(p: _Parser, ctx):
    node = _parse_unary(p, ctx)
    while p.at_punct("*"):
        p.next()
        node = node * _parse_unary(p, ctx)
    return node


def _parse_unary(p: _Parser, ctx):
    sign = 1.0
    while p.at_punct("+", "-"):
        if p.next().text == "-":
            sign = -sign
    node = _parse_power(p, ctx)
    return node if sign > 0 else node * -1.0


def _parse_power(p: _Parser, ctx):
    base = _parse_atom(p, ctx)
    if p.at_punct("^", "**"):
        p.next()
        t = p.expect("number", what="an integer exponent")
        n = t.value
        if n.imag != 0 or n.real != int(n.real) or n.real < 0:
            raise DSLError("exponents must be nonnegative integers", t.line, t.col)
        return base ** int(n.real)
    return base


def _parse_atom(p: _Parser, ctx):
    t = p.next()
    if t.kind == "number":
        return ctx.constant(t.value)
    if t.kind == "punct" and t.text == "(":
        node = _parse_expr(p, ctx)
        p.expect("punct", ")")
        return node
    if t.kind == "name":
        if p.at_punct("("):
            p.next()
            args: List[Token] = []
            if not p.at_punct(")"):
                while True:
                    a = p.next()
                    if a.kind not in ("name", "number"):
                        raise DSLError(
                            f"expected a name or index in {t.text}(...), got {a.text!r}",
                            a.line,
                            a.col,
                        )
                    args.append(a)
                    if p.at_punct(","):
                        p.next()
                        continue
                    break
            p.expect("punct", ")")
            return ctx.call(t.text, args, t)
        return ctx.name(t)
    raise DSLError(f"unexpected {t.text!r} in expression", t.line, t.col)


def _constant_expr(p: _Parser, model: ModelSpec, what: str) -> complex:
    t = p.peek()
    poly = _parse_expr(p, _PhaseContext(model))
    extra = [s for s in poly.terms if s != ()]
    if extra:
        raise DSLError(f"{what} must be a constant expression", t.line, t.col)
    return poly.terms.get((), 0j)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def parse_model(text: str) -> ModelSpec:
    p = _Parser(tokenize(text))
    m = ModelSpec()
    gamma: Dict[int, Dict[Tuple[int, int, int, int], complex]] = {}
    flags: List[Tuple[str, Optional[Token], str, Token]] = []

    while p.peek().kind != "end":
        t = p.next()
        if t.kind != "name":
            raise DSLError(f"expected a clause keyword, got {t.text!r}", t.line, t.col)
        kw = t.text

        if kw == "mode":
            name = p.expect("name", what="a mode name")
            m.modes.append(ModeSpec(name.text, len(m.modes)))

        elif kw == "emitter":
            name = p.expect("name", what="an emitter name")
            p.expect("name", "levels")
            nxt = p.peek()
            if nxt.kind == "number":
                p.next()
                if nxt.value.imag != 0 or nxt.value.real != int(nxt.value.real):
                    raise DSLError("level count must be an integer", nxt.line, nxt.col)
                n = int(nxt.value.real)
                if n < 2:
                    raise DSLError("emitters need at least 2 levels", nxt.line, nxt.col)
                labels = ("g", "e") if n == 2 else tuple(str(i) for i in range(n))
            else:
                labels = []
                while p.peek().kind == "name":
                    labels.append(p.next().text)
                if len(labels) < 2:
                    raise DSLError(
                        "expected a level count or at least two level labels",
                        nxt.line,
                        nxt.col,
                    )
                labels = tuple(labels)
            m.emitters.append(EmitterSpec(name.text, len(m.emitters), labels))

        elif kw == "const":
            name = p.expect("name", what="a constant name")
            p.expect("punct", "=")
            m.constants[name.text] = _constant_expr(p, m, f"const {name.text}")

        elif kw == "H":
            p.expect("punct", "=")
            h = _parse_expr(p, _PhaseContext(m))
            _reject_same_emitter_products(h, m, t)
            m.hamiltonian = m.hamiltonian + h

        elif kw == "lindblad":
            ename = p.expect("name", what="an emitter name")
            e = _resolve_emitter(m, ename)
            p.expect("punct", ":")
            p.expect("name", "gamma")
            p.expect("punct", "(")
            idx = []
            for k in range(4):
                a = p.next()
                if a.kind not in ("name", "number"):
                    raise DSLError("expected a level label", a.line, a.col)
                idx.append(_level(e, a))
                if k < 3:
                    p.expect("punct", ",")
            p.expect("punct", ")")
            p.expect("punct", "=")
            val = _constant_expr(p, m, "gamma entry")
            slot = gamma.setdefault(e.index, {})
            key = tuple(idx)
            if key in slot:
                raise DSLError(
                    f"duplicate gamma entry for {e.name}{key}", ename.line, ename.col
                )
            slot[key] = val

        elif kw == "init":
            which = p.expect("name", what="'mode' or 'emitter'")
            if which.text == "mode":
                name = p.expect("name", what="a mode name")
                midx = _resolve_mode(m, name)
                p.expect("name", "coherent")
                m.modes[midx].alpha0 = _constant_expr(p, m, "coherent amplitude")
            elif which.text == "emitter":
                name = p.expect("name", what="an emitter name")
                e = _resolve_emitter(m, name)
                style = p.expect("name", what="'pure' or 'mixed'")
                if style.text == "pure":
                    p.expect("punct", "(")
                    vals = [_constant_expr(p, m, "amplitude")]
                    while p.at_punct(","):
                        p.next()
                        vals.append(_constant_expr(p, m, "amplitude"))
                    p.expect("punct", ")")
                    if len(vals) != e.levels:
                        raise DSLError(
                            f"emitter {e.name} has {e.levels} levels, got "
                            f"{len(vals)} amplitudes",
                            style.line,
                            style.col,
                        )
                    e.c0 = np.array(vals, dtype=complex)
                    e.p0 = None
                elif style.text == "mixed":
                    p.expect("punct", "[")
                    rows = [_parse_number_row(p, m)]
                    while p.at_punct(","):
                        p.next()
                        rows.append(_parse_number_row(p, m))
                    p.expect("punct", "]")
                    mat = np.array(rows, dtype=complex)
                    if mat.shape != (e.levels, e.levels):
                        raise DSLError(
                            f"emitter {e.name}: expected a {e.levels}x{e.levels} "
                            f"matrix, got {mat.shape[0]}x{mat.shape[1]}",
                            style.line,
                            style.col,
                        )
                    e.p0 = mat
                    e.c0 = None
                else:
                    raise DSLError(
                        f"expected 'pure' or 'mixed', got {style.text!r}",
                        style.line,
                        style.col,
                    )
            else:
                raise DSLError(
                    f"expected 'mode' or 'emitter' after init, got {which.text!r}",
                    which.line,
                    which.col,
                )

        elif kw in ("eta", "theta"):
            first = p.next()
            if first.kind != "name":
                raise DSLError("expected an emitter name or on/off/proper", first.line, first.col)
            if first.text in ("on", "off", "proper"):
                flags.append((kw, None, first.text, t))
            else:
                setting = p.expect("name", what="on, off or proper")
                if setting.text not in ("on", "off", "proper"):
                    raise DSLError(
                        f"expected on, off or proper, got {setting.text!r}",
                        setting.line,
                        setting.col,
                    )
                flags.append((kw, first, setting.text, t))

        elif kw == "observe":
            label = p.expect("string", what="a quoted label")
            p.expect("punct", "=")
            opoly = _parse_expr(p, _OperatorContext(m))
            m.observables.append((label.text, opoly.as_terms()))

        elif kw == "reconstruct":
            p.expect("name", "mode")
            name = p.expect("name", what="a mode name")
            midx = _resolve_mode(m, name)
            p.expect("name", "cutoff")
            num = p.expect("number", what="a Fock cutoff")
            if num.value.imag != 0 or num.value.real != int(num.value.real):
                raise DSLError("cutoff must be an integer", num.line, num.col)
            m.reconstructions.append((midx, int(num.value.real)))

        elif kw == "gauge":
            raise DSLError(
                "gauge clauses live in a separate gauge file (--gauge)", t.line, t.col
            )

        else:
            raise DSLError(f"unknown clause {kw!r}", t.line, t.col)

        p.expect("punct", ";")

    for eidx, entries in gamma.items():
        L = m.emitters[eidx].levels
        tensor = np.zeros((L, L, L, L), dtype=complex)
        for key, val in entries.items():
            tensor[key] = val
        m.lindblad[eidx] = LindbladSpec(eidx, tensor)

    for kw, etok, setting, clause_tok in flags:
        targets = m.emitters if etok is None else [_resolve_emitter(m, etok)]
        if not targets and etok is None:
            raise DSLError("eta/theta flag given but no emitters declared",
                           clause_tok.line, clause_tok.col)
        for e in targets:
            if kw == "eta":
                e.eta = setting
            else:
                e.theta = setting

    try:
        m.validate()
    except ModelError as exc:
        raise DSLError(str(exc)) from None
    return m


def _parse_number_row(p: _Parser, m: ModelSpec) -> List[complex]:
    p.expect("punct", "[")
    vals = [_constant_expr(p, m, "matrix entry")]
    while p.at_punct(","):
        p.next()
        vals.append(_constant_expr(p, m, "matrix entry"))
    p.expect("punct", "]")
    return vals


def _reject_same_emitter_products(h: Polynomial, m: ModelSpec, tok: Token) -> None:
    for syms in h.terms:
        seen = set()
        for s in syms:
            if s.kind == algebra.RHO:
                if s.idx in seen:
                    name = m.emitters[s.idx].name if s.idx < len(m.emitters) else s.idx
                    raise DSLError(
                        f"H contains a product of two projectors on emitter "
                        f"{name}; same-emitter products vanish identically "
                        "(composite-boson rule) and are rejected rather than "
                        "silently dropped",
                        tok.line,
                        tok.col,
                    )
                seen.add(s.idx)


# ---------------------------------------------------------------------------
# gauge files
# ---------------------------------------------------------------------------


def parse_gauge(text: str, model: ModelSpec):
    """Parse drift-gauge clauses against an existing model.

        gauge deltaA(alpha f) = -0.05*a(f);
        gauge A0 = 0;

    Designators: `alpha <mode>`, `alphadag <mode>`, `rho <emitter> <p> <q>`,
    `C <emitter> <p>`, `Cdag <emitter> <p>`.  Right-hand sides are polynomials
    in the phase-space variables (a, adag, rho, C, Cdag calls).
    """
    from .gauge import GaugeSpec

    p = _Parser(tokenize(text))
    delta: Dict[PhaseSymbol, Polynomial] = {}
    a0 = Polynomial.zero()
    ctx = _GaugeContext(model)

    while p.peek().kind != "end":
        t = p.expect("name", "gauge", what="a gauge clause")
        which = p.expect("name", what="deltaA or A0")
        if which.text == "deltaA":
            p.expect("punct", "(")
            sym = _parse_designator(p, model)
            p.expect("punct", ")")
            p.expect("punct", "=")
            poly = _parse_expr(p, ctx)
            if sym in delta:
                raise DSLError(f"duplicate deltaA for {sym}", which.line, which.col)
            delta[sym] = poly
        elif which.text == "A0":
            p.expect("punct", "=")
            a0 = a0 + _parse_expr(p, ctx)
        else:
            raise DSLError(
                f"expected deltaA or A0, got {which.text!r}", which.line, which.col
            )
        p.expect("punct", ";")

    return GaugeSpec(delta_drift=delta, a0=a0)


def _parse_designator(p: _Parser, model: ModelSpec) -> PhaseSymbol:
    kind = p.expect("name", what="alpha, alphadag, rho, C or Cdag")

    def arg() -> Token:
        if p.at_punct(","):
            p.next()
        a = p.next()
        if a.kind not in ("name", "number"):
            raise DSLError(f"expected a name or index, got {a.text!r}", a.line, a.col)
        return a

    if kind.text in ("alpha", "alphadag"):
        midx = _resolve_mode(model, arg())
        return (
            algebra.field_amp_dag(midx)
            if kind.text == "alphadag"
            else algebra.field_amp(midx)
        )
    if kind.text == "rho":
        e = _resolve_emitter(model, arg())
        pl = _level(e, arg())
        ql = _level(e, arg())
        return algebra.emitter_rho(e.index, pl, ql)
    if kind.text in ("C", "Cdag"):
        e = _resolve_emitter(model, arg())
        pl = _level(e, arg())
        return (
            algebra.cvar_dag(e.index, pl) if kind.text == "Cdag" else algebra.cvar(e.index, pl)
        )
    raise DSLError(
        f"unknown gauge variable class {kind.text!r}", kind.line, kind.col
    )
