"""Weighted initial conditions for trajectories.

Fields start deterministically at their coherent amplitudes.  Emitters need
more care: reproducing the one-excitation-per-emitter moment structure
requires either eta-numbers (effective density) or theta-numbers plus a
random phase (C-variables).  Both are unit-modulus phases e^{i psi} carrying
a complex weight,

    eta:   w(psi) = 1 + e^{-i psi}   so that <eta^m>_w   = 1 for m in {0, 1}, else 0
    theta: w(psi) = 1 + e^{-2i psi}  so that <theta^2n>_w = 1 for n in {0, 1}, else 0

with psi uniform on [0, 2pi).  Logs of the weights accumulate into the
trajectory log-weight that later multiplies every estimator.

A genuinely probabilistic alternative samples the pair (z, zdag) from the
positive-P function of a one-boson Fock state: z = mu + nu, zdag equals
conj(mu - nu) with |mu|^2 ~ Gamma(2, 1) at uniform phase and nu a standard
complex normal.  The pair carries no weight and satisfies the same moment
rules (<z zdag> = 1, <z^2 zdag^2> = 0), which makes it a handy cross-check
for the weighted phases.  Flag value "proper" selects it per emitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    CVAR_FORM,
    ETA_OFF,
    ETA_ON,
    ETA_PROPER,
    RHO_FORM,
    InitialStateSpec,
)

__all__ = [
    "SamplerError",
    "WeightedSample",
    "sample_eta",
    "sample_theta",
    "sample_pair_proper",
    "init_effective_density",
    "init_cvariables",
    "sample_ensemble",
]

_TWO_PI = 2.0 * np.pi


class SamplerError(ValueError):
    pass


@dataclass
class WeightedSample:
    """State vector (model variable order) plus its initial log-weight."""

    state: np.ndarray
    logweight: complex


def sample_eta(rng) -> tuple:
    psi = rng.uniform(0.0, _TWO_PI)
    return np.exp(1j * psi), np.log(1.0 + np.exp(-1j * psi))


def sample_theta(rng) -> tuple:
    psi = rng.uniform(0.0, _TWO_PI)
    return np.exp(1j * psi), np.log(1.0 + np.exp(-2j * psi))


def sample_pair_proper(rng) -> tuple:
    mu = np.sqrt(rng.gamma(2.0)) * np.exp(1j * rng.uniform(0.0, _TWO_PI))
    nu = complex(rng.normal(scale=np.sqrt(0.5)), rng.normal(scale=np.sqrt(0.5)))
    return mu + nu, np.conj(mu - nu)


def _field_block(spec: InitialStateSpec) -> list:
    out = []
    for a0 in spec.alpha0:
        out.append(a0)
        out.append(np.conj(a0))
    return out


def init_effective_density(spec: InitialStateSpec, rng) -> WeightedSample:
    entries = _field_block(spec)
    logw = 0.0 + 0.0j
    for a, p0 in enumerate(spec.emitter_p0):
        flag = spec.eta[a]
        if flag == ETA_OFF:
            eta = 1.0 + 0.0j
        elif flag == ETA_ON:
            eta, lw = sample_eta(rng)
            logw += lw
        elif flag == ETA_PROPER:
            z, zd = sample_pair_proper(rng)
            eta = z * zd
        else:
            raise SamplerError(f"unknown eta flag {flag!r}")
        entries.extend((eta * p0).ravel())
    state = np.array(entries, dtype=complex)
    if not (np.isfinite(logw) and np.all(np.isfinite(state))):
        raise SamplerError("non-finite initial sample")
    return WeightedSample(state, logw)


def init_cvariables(spec: InitialStateSpec, rng) -> WeightedSample:
    entries = _field_block(spec)
    logw = 0.0 + 0.0j
    for a, c0 in enumerate(spec.emitter_c0):
        if c0 is None:
            raise SamplerError(
                f"emitter {a} has a mixed initial state; C-variables need "
                "pure-state amplitudes"
            )
        flag = spec.theta[a]
        if flag == ETA_PROPER:
            z, zd = sample_pair_proper(rng)
        else:
            phi = rng.uniform(0.0, _TWO_PI)
            if flag == ETA_OFF:
                theta = 1.0 + 0.0j
            elif flag == ETA_ON:
                theta, lw = sample_theta(rng)
                logw += lw
            else:
                raise SamplerError(f"unknown theta flag {flag!r}")
            z = theta * np.exp(1j * phi)
            zd = theta * np.exp(-1j * phi)
        entries.extend(z * c0)
        entries.extend(zd * np.conj(c0))
    state = np.array(entries, dtype=complex)
    if not (np.isfinite(logw) and np.all(np.isfinite(state))):
        raise SamplerError("non-finite initial sample")
    return WeightedSample(state, logw)


# ---------------------------------------------------------------------------
# vectorized ensemble initialization
# ---------------------------------------------------------------------------


def _pair_proper_batch(rng, n: int):
    mu = np.sqrt(rng.gamma(2.0, size=n)) * np.exp(1j * rng.uniform(0.0, _TWO_PI, size=n))
    nu = rng.normal(scale=np.sqrt(0.5), size=n) + 1j * rng.normal(scale=np.sqrt(0.5), size=n)
    return mu + nu, np.conj(mu - nu)


def sample_ensemble(spec: InitialStateSpec, formulation: str, n: int, seed: int):
    """Initial states (n, n_vars) and log-weights (n,) for a whole ensemble.

    Uses a counter-based bit generator keyed by the seed, so the result is
    reproducible and independent of how the integration is parallelized.
    """
    if n < 1:
        raise SamplerError("ensemble size must be positive")
    rng = np.random.Generator(np.random.Philox(key=seed))
    levels = [p0.shape[0] for p0 in spec.emitter_p0]
    if formulation == RHO_FORM:
        nv = 2 * len(spec.alpha0) + sum(L * L for L in levels)
    elif formulation == CVAR_FORM:
        nv = 2 * len(spec.alpha0) + 2 * sum(levels)
    else:
        raise SamplerError(f"unknown formulation {formulation!r}")
    states = np.empty((n, nv), dtype=complex)
    logw = np.zeros(n, dtype=complex)
    col = 0
    for a0 in spec.alpha0:
        states[:, col] = a0
        states[:, col + 1] = np.conj(a0)
        col += 2
    for a in range(len(spec.emitter_p0)):
        if formulation == RHO_FORM:
            p0 = spec.emitter_p0[a]
            flag = spec.eta[a]
            if flag == ETA_OFF:
                eta = np.ones(n, dtype=complex)
            elif flag == ETA_ON:
                psi = rng.uniform(0.0, _TWO_PI, size=n)
                eta = np.exp(1j * psi)
                logw += np.log(1.0 + np.exp(-1j * psi))
            else:
                z, zd = _pair_proper_batch(rng, n)
                eta = z * zd
            k = p0.size
            states[:, col : col + k] = eta[:, None] * p0.ravel()[None, :]
            col += k
        elif formulation == CVAR_FORM:
            c0 = spec.emitter_c0[a]
            if c0 is None:
                raise SamplerError(
                    f"emitter {a} has a mixed initial state; C-variables need "
                    "pure-state amplitudes"
                )
            flag = spec.theta[a]
            if flag == ETA_PROPER:
                z, zd = _pair_proper_batch(rng, n)
            else:
                phi = rng.uniform(0.0, _TWO_PI, size=n)
                if flag == ETA_OFF:
                    theta = np.ones(n, dtype=complex)
                else:
                    psi = rng.uniform(0.0, _TWO_PI, size=n)
                    theta = np.exp(1j * psi)
                    logw += np.log(1.0 + np.exp(-2j * psi))
                z = theta * np.exp(1j * phi)
                zd = theta * np.exp(-1j * phi)
            L = c0.size
            states[:, col : col + L] = z[:, None] * c0[None, :]
            states[:, col + L : col + 2 * L] = zd[:, None] * np.conj(c0)[None, :]
            col += 2 * L
    if not (np.all(np.isfinite(logw)) and np.all(np.isfinite(states))):
        raise SamplerError("non-finite initial sample")
    return states, logw
