"""Drift gauge: modified drift plus a compensating stochastic weight.

A gauge shifts the drift of selected variables by user-chosen polynomials
deltaA and adds one extra weight variable C0 with

    dC0 = A0 dt + xi0 dW,   Omega(t) = exp(C0(t)),

where the joint noise satisfies <xi xi0> = -deltaA and <xi0 xi0> = -2*A0.
Weighted moments <f Omega> then evolve exactly as the ungauged moments <f>:
the Ito cross term f'(x) <xi xi0> cancels the drift shift, and
d<Omega> = Omega*(A0 + <xi0 xi0>/2) dt = 0 makes Omega a martingale for any
choice of A0.  The correlators are realized by bordering the diffusion matrix
with a (-deltaA) row/column and a (-2*A0) corner and refactorizing, so they
hold at the factorization tolerance rather than approximately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

from .algebra import PhaseSymbol, Polynomial

__all__ = ["GaugeSpec", "identity_gauge", "apply_drift_gauge", "weighted_expectation"]


@dataclass
class GaugeSpec:
    delta_drift: Dict[PhaseSymbol, Polynomial] = field(default_factory=dict)
    a0: Polynomial = field(default_factory=Polynomial.zero)

    def is_identity(self) -> bool:
        return self.a0.is_zero() and all(p.is_zero() for p in self.delta_drift.values())


def identity_gauge() -> GaugeSpec:
    return GaugeSpec()


def apply_drift_gauge(sys, g: GaugeSpec):
    """Extend a compiled system with gauge drift shifts and the weight SDE.

    The identity gauge returns ``sys`` unchanged (same object), which makes
    gauged-with-identity runs bit-identical to ungauged runs.
    """
    from .compiler import extend_with_gauge

    if g.is_identity():
        return sys
    return extend_with_gauge(sys, g)


def weighted_expectation(result, obs):
    """Moments of a gauged run: Omega is already folded into the weights.

    The engine records log(w_init) + C0(t) per output time, so the ordinary
    ratio estimator over those weights realizes sum(w Omega f)/sum(w Omega).
    This is the same estimator used for ungauged runs, which is what makes
    the identity gauge a strict no-op at the moment level.
    """
    from .estimator import estimate

    return estimate(result, obs)
