"""Weighted-moment estimation and single-mode state reconstruction.

Requested observables arrive as operator products and are mapped onto
trajectory variables before any data is touched: a -> alpha,
adag -> alphadag, sigma_{a,pq} -> rho_{a,qp}, with rho further split into
C_p * Cdag_q when the system was compiled on C-variables.  A product
carrying two sigma factors of the same emitter averages to zero identically
in this representation, so such terms are dropped up front; an observable
whose terms all vanish is reported as an exact zero with a zero error bar.

Every estimate is the self-normalizing ratio sum(W f) / sum(W) over the
trajectories still alive at the output time.  Error bars come from a
delete-one jackknife of that ratio (pushed through hermitization and trace
normalization in the reconstruction case), and the effective sample size is
Kish's (sum|W|)^2 / sum|W|^2.  No complex conjugation is applied to
trajectory data anywhere: alphadag is an independent variable, and the
estimate of a daggered observable is the estimate of its partner monomials.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from . import algebra
from .algebra import FieldOp, Polynomial, SigmaOp
from .compiler import CompiledSystem, _lower_polys
from .engine import EnsembleResult
from .model import CVAR_FORM, ModelSpec

__all__ = [
    "EstimatorError",
    "ObservableTable",
    "MomentEstimate",
    "ReconstructedState",
    "compile_observables",
    "estimate",
    "amplitude_labels",
    "reconstruction_requests",
    "reconstruct_single_mode",
    "KISH_RELIABLE",
]

# effective-sample-size floor below which an estimate is flagged unreliable
KISH_RELIABLE = 10.0

# reconstruction must capture at least this much trace below the cutoff
MASS_FLOOR = 1.0 - 1e-3

_CHUNK = 8192


class EstimatorError(RuntimeError):
    pass


@dataclass
class ObservableTable:
    """Observable polynomials lowered to the kernel's flat monomial layout."""

    labels: List[str]
    ptr: np.ndarray    # (n_obs+1,) monomial slice per observable
    coeff: np.ndarray  # monomial coefficients
    vptr: np.ndarray   # symbol slice per monomial
    vidx: np.ndarray   # variable indices


def compile_observables(sys: CompiledSystem, requests) -> ObservableTable:
    """Lower (label, operator terms) requests onto the system's variables.

    `requests` follows ModelSpec.observables: each entry is
    (label, [(coefficient, [FieldOp | SigmaOp, ...]), ...]).  Terms must be
    normally ordered per mode; a term with a repeated emitter index is
    dropped (its weighted average vanishes identically), and an observable
    left with no terms lowers to the empty polynomial, which the kernel
    records as exactly zero.
    """
    labels: List[str] = []
    polys: List[Polynomial] = []
    for label, terms in requests:
        kept = []
        for coeff, factors in terms:
            emitters = [f.emitter for f in factors if isinstance(f, SigmaOp)]
            if len(emitters) != len(set(emitters)):
                continue
            kept.append((coeff, tuple(factors)))
        poly = algebra.substitute_sigma(kept)
        if sys.formulation == CVAR_FORM:
            poly = algebra.to_cvariables(poly)
        for mono in poly.monomials():
            for s in mono.symbols:
                if s not in sys.var_index:
                    raise EstimatorError(
                        f"observable {label!r} uses {s}, which is not a "
                        "variable of this system"
                    )
        labels.append(label)
        polys.append(poly)
    ptr, coeff, vptr, vidx = _lower_polys(polys, sys.var_index)
    return ObservableTable(labels, ptr, coeff, vptr, vidx)


@dataclass
class MomentEstimate:
    value: complex
    stderr: float
    n_effective: float
    time: float
    reliable: bool


def estimate(result: EnsembleResult, obs: Union[int, str]) -> List[MomentEstimate]:
    """Ratio estimate of one recorded observable at every output time.

    The value is sum(W f)/sum(W) over trajectories alive at that time; the
    standard error is a delete-one jackknife of the ratio, real and
    imaginary spreads added in quadrature.
    """
    if isinstance(obs, str):
        try:
            idx = result.obs_labels.index(obs)
        except ValueError:
            raise EstimatorError(f"no recorded observable {obs!r}") from None
    else:
        idx = int(obs)
    series: List[MomentEstimate] = []
    for i in range(result.times.size):
        mask = result.alive_mask(i)
        m = int(mask.sum())
        if m == 0:
            raise EstimatorError(
                f"every trajectory diverged before t={result.times[i]:g}"
            )
        w = np.exp(result.logweights[mask, i])
        f = result.values[mask, i, idx]
        num = w @ f
        den = w.sum()
        if den == 0:
            raise EstimatorError(f"total weight vanished at t={result.times[i]:g}")
        value = num / den
        stderr = _jackknife_ratio(w, f, num, den) if m > 1 else float("inf")
        ess = _kish(w)
        series.append(
            MomentEstimate(
                value=complex(value),
                stderr=stderr,
                n_effective=ess,
                time=float(result.times[i]),
                reliable=bool(ess >= KISH_RELIABLE and np.isfinite(stderr)),
            )
        )
    return series


def _kish(w: np.ndarray) -> float:
    aw = np.abs(w)
    return float(aw.sum() ** 2 / (aw @ aw))


def _jackknife_ratio(w, f, num, den) -> float:
    m = w.size
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (num - w * f) / (den - w)
    if not np.all(np.isfinite(v.view(np.float64))):
        return float("inf")
    dr = v.real - v.real.mean()
    di = v.imag - v.imag.mean()
    return float(np.sqrt((m - 1) / m * (dr @ dr + di @ di)))


# ---------------------------------------------------------------------------
# density-matrix reconstruction from projector averages
# ---------------------------------------------------------------------------


def amplitude_labels(model: ModelSpec, mode_idx: int) -> Tuple[str, str]:
    name = model.modes[mode_idx].name
    return f"_amp:{name}", f"_ampdag:{name}"


def reconstruction_requests(model: ModelSpec) -> list:
    """Hidden observable requests recording raw mode amplitudes.

    Reconstruction needs alpha and alphadag per trajectory; these requests
    are appended to the model's observe list before a run.  Labels start
    with an underscore so report writers can skip them.
    """
    reqs = []
    seen = set()
    for mode_idx, _cutoff in model.reconstructions:
        if mode_idx in seen:
            continue
        seen.add(mode_idx)
        la, lad = amplitude_labels(model, mode_idx)
        reqs.append((la, [(1.0 + 0j, [FieldOp(mode_idx, False)])]))
        reqs.append((lad, [(1.0 + 0j, [FieldOp(mode_idx, True)])]))
    return reqs


@dataclass
class ReconstructedState:
    """Fock-basis density matrix estimated from one output time.

    `raw` is the hermitized projector average before trace normalization;
    its trace (`raw_trace`) measures how much mass the cutoff captured.
    `matrix` is `raw` scaled to unit trace and `stderr` holds per-entry
    jackknife errors of the normalized matrix.
    """

    time: float
    matrix: np.ndarray
    raw: np.ndarray
    raw_trace: float
    stderr: np.ndarray
    n_effective: float


def reconstruct_single_mode(
    result: EnsembleResult, cutoff: int, mode_name: Optional[str] = None
) -> List[ReconstructedState]:
    """Estimate <m|rho|n> for m,n <= cutoff at every output time.

    Matrix elements are weighted averages of the coherent-state projector
    kernel alpha^m alphadag^n exp(-alpha*alphadag)/sqrt(m! n!) evaluated on
    the recorded amplitude columns.  Raises when the captured mass falls
    below 1-1e-3 (cutoff too small for the state).
    """
    if cutoff < 0:
        raise EstimatorError("cutoff must be non-negative")
    ia, iad = _find_amplitude_columns(result, mode_name)
    d = cutoff + 1
    out: List[ReconstructedState] = []
    for i in range(result.times.size):
        mask = result.alive_mask(i)
        m_alive = int(mask.sum())
        if m_alive == 0:
            raise EstimatorError(
                f"every trajectory diverged before t={result.times[i]:g}"
            )
        w = np.exp(result.logweights[mask, i])
        a = result.values[mask, i, ia]
        ad = result.values[mask, i, iad]
        den = w.sum()
        if den == 0:
            raise EstimatorError(f"total weight vanished at t={result.times[i]:g}")
        num = np.zeros((d, d), dtype=np.complex128)
        for s in range(0, m_alive, _CHUNK):
            lam = _lambda_chunk(a[s : s + _CHUNK], ad[s : s + _CHUNK], d)
            num += np.einsum("c,cmn->mn", w[s : s + _CHUNK], lam)
        raw = num / den
        raw = 0.5 * (raw + raw.conj().T)
        tau = float(np.trace(raw).real)
        if tau < MASS_FLOOR:
            raise EstimatorError(
                f"cutoff {cutoff} too small: reconstructed mass {tau:.6f} "
                f"at t={result.times[i]:g}"
            )
        matrix = raw / tau
        stderr = _reconstruction_stderr(w, a, ad, d, num, den, matrix, m_alive)
        out.append(
            ReconstructedState(
                time=float(result.times[i]),
                matrix=matrix,
                raw=raw,
                raw_trace=tau,
                stderr=stderr,
                n_effective=_kish(w),
            )
        )
    return out


def _find_amplitude_columns(result: EnsembleResult, mode_name: Optional[str]):
    if mode_name is not None:
        pairs = [(f"_amp:{mode_name}", f"_ampdag:{mode_name}")]
    else:
        pairs = [
            (la, "_ampdag:" + la[5:])
            for la in result.obs_labels
            if la.startswith("_amp:")
        ]
    pairs = [p for p in pairs if p[0] in result.obs_labels and p[1] in result.obs_labels]
    if not pairs:
        raise EstimatorError(
            "no recorded amplitude columns; run with reconstruction_requests()"
        )
    if len(pairs) > 1:
        raise EstimatorError(
            "amplitude columns for several modes recorded; pass mode_name"
        )
    la, lad = pairs[0]
    return result.obs_labels.index(la), result.obs_labels.index(lad)


def _lambda_chunk(a: np.ndarray, ad: np.ndarray, d: int) -> np.ndarray:
    """Projector kernel alpha^m alphadag^n e^{-alpha*alphadag}/sqrt(m!n!)."""
    c = a.size
    pa = np.empty((c, d), dtype=np.complex128)
    pad = np.empty((c, d), dtype=np.complex128)
    pa[:, 0] = 1.0
    pad[:, 0] = 1.0
    for m in range(1, d):
        r = 1.0 / np.sqrt(m)
        pa[:, m] = pa[:, m - 1] * a * r
        pad[:, m] = pad[:, m - 1] * ad * r
    return pa[:, :, None] * pad[:, None, :] * np.exp(-a * ad)[:, None, None]


def _reconstruction_stderr(w, a, ad, d, num, den, center, m_alive) -> np.ndarray:
    """Delete-one jackknife of the hermitized, trace-normalized entries.

    Replicas are accumulated as deviations from the full-sample matrix so
    near-constant ensembles do not lose the spread to cancellation.
    """
    if m_alive < 2:
        return np.full((d, d), np.inf)
    s1 = np.zeros((d, d), dtype=np.complex128)
    s2r = np.zeros((d, d))
    s2i = np.zeros((d, d))
    for s in range(0, m_alive, _CHUNK):
        lam = _lambda_chunk(a[s : s + _CHUNK], ad[s : s + _CHUNK], d)
        wc = w[s : s + _CHUNK]
        with np.errstate(divide="ignore", invalid="ignore"):
            rep = (num[None, :, :] - wc[:, None, None] * lam) / (den - wc)[
                :, None, None
            ]
            rep = 0.5 * (rep + np.conj(np.swapaxes(rep, 1, 2)))
            tr = np.einsum("cmm->c", rep).real
            rep = rep / tr[:, None, None]
        # isfinite on the complex array itself: rep's layout follows the
        # transposed operand above numpy's buffering threshold, so a float
        # view of the last axis is not available here
        if not np.all(np.isfinite(rep)):
            return np.full((d, d), np.inf)
        dev = rep - center[None, :, :]
        s1 += dev.sum(axis=0)
        s2r += np.einsum("cmn,cmn->mn", dev.real, dev.real)
        s2i += np.einsum("cmn,cmn->mn", dev.imag, dev.imag)
    ssr = np.maximum(s2r - s1.real**2 / m_alive, 0.0)
    ssi = np.maximum(s2i - s1.imag**2 / m_alive, 0.0)
    return np.sqrt((m_alive - 1) / m_alive * (ssr + ssi))
