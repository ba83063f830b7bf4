"""Ensemble integration over a time grid.

The heavy loop lives in the compiled kernel; this module owns grid
validation, output allocation, seeding, and the result container.  Only
strided observable values and log-weights are retained per trajectory, so
memory is bounded by n_traj * n_out * (n_obs + 1) complex numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import _kernel
from .compiler import CompiledSystem
from .factorization import factor_complex_symmetric
from .model import InitialStateSpec
from .sampler import WeightedSample, sample_ensemble

__all__ = [
    "EngineError",
    "TimeGrid",
    "EnsembleResult",
    "TrajectoryRecord",
    "step",
    "run_trajectory",
    "run_ensemble",
    "NOISE_STREAM_TAG",
]

NOISE_STREAM_TAG = 1  # counter field separating dynamics noise from other draws


class EngineError(RuntimeError):
    pass


@dataclass
class TimeGrid:
    t0: float
    t1: float
    dt: float
    stride: int = 1

    def __post_init__(self):
        if not (self.dt > 0):
            raise EngineError("dt must be positive")
        if not (self.t1 > self.t0):
            raise EngineError("t1 must exceed t0")
        span = self.t1 - self.t0
        ratio = span / self.dt
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > np.spacing(ratio):
            raise EngineError(
                f"(t1-t0)/dt = {ratio!r} is not an integer number of steps"
            )
        if self.stride < 1 or n % self.stride != 0:
            raise EngineError(f"stride {self.stride} does not divide {n} steps")
        self.n_steps = n
        self.n_out = n // self.stride + 1

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * self.stride * np.arange(self.n_out)


@dataclass
class EnsembleResult:
    """Strided per-trajectory observable values and log-weights.

    `values[k, i, o]` is observable o of trajectory k at output time i;
    trajectories frozen before that time keep their last valid values and
    must be masked out via `alive_mask`.
    """

    grid: TimeGrid
    times: np.ndarray
    obs_labels: List[str]
    values: np.ndarray       # (n, n_out, n_obs) complex
    logweights: np.ndarray   # (n, n_out) complex
    diverged_at: np.ndarray  # (n,) int64; first invalid step, -1 if none
    status: np.ndarray       # (n,) int8
    seed: int
    formulation: str

    @property
    def n_traj(self) -> int:
        return self.values.shape[0]

    def alive_mask(self, out_idx: int) -> np.ndarray:
        step_of = out_idx * self.grid.stride
        return (self.diverged_at < 0) | (self.diverged_at > step_of)

    def diverged_count(self, out_idx: int) -> int:
        return int(self.n_traj - self.alive_mask(out_idx).sum())

    def weight_stats(self) -> dict:
        lw = self.logweights[self.alive_mask(self.grid.n_out - 1), -1]
        if lw.size == 0:
            return {"mean_abs_weight": float("nan"), "max_abs_logweight": float("nan")}
        return {
            "mean_abs_weight": float(np.mean(np.abs(np.exp(lw)))),
            "max_abs_logweight": float(np.max(np.abs(lw))),
        }


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray      # (n_out, n_vars) complex
    logweights: np.ndarray  # (n_out,) complex
    diverged_at: int
    status: int


def step(sys: CompiledSystem, x: np.ndarray, dt: float, rng=None, noise=None) -> np.ndarray:
    """Reference Euler-Maruyama step (left-endpoint evaluation).

    `noise` supplies the standard normals directly; otherwise they come from
    `rng`.  Factorization failures propagate.
    """
    out = x + sys.drift_vector_lowered(x) * dt
    m = sys.n_noise_vars
    if m:
        D = sys.diffusion_matrix_lowered(x)
        if not np.all(np.isfinite(D.view(np.float64))):
            raise EngineError("step produced a non-finite diffusion matrix")
        B, _ = factor_complex_symmetric(D)
        k = B.shape[1]
        if k:
            if noise is None:
                noise = rng.standard_normal(m)
            out[sys.nz_global] += B @ (noise[:k] * np.sqrt(dt))
    if not np.all(np.isfinite(out.view(np.float64))):
        raise EngineError("step produced a non-finite state")
    return out


def _split_seed(seed: int):
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    return np.uint64(s & np.uint64(0xFFFFFFFF)), np.uint64(s >> np.uint64(32))


def _identity_obs(sys: CompiledSystem):
    nv = sys.n_vars
    ptr = np.arange(nv + 1, dtype=np.int32)
    coeff = np.ones(nv, dtype=np.complex128)
    vptr = np.arange(nv + 1, dtype=np.int32)
    vidx = np.arange(nv, dtype=np.int32)
    return ptr, coeff, vptr, vidx


def _launch(sys, states, logw0, grid, seed, obs_tables, n_obs, workers):
    if workers is not None:
        import numba

        numba.set_num_threads(max(1, int(workers)))
    n = states.shape[0]
    values = np.empty((n, grid.n_out, n_obs), dtype=np.complex128)
    logweights = np.empty((n, grid.n_out), dtype=np.complex128)
    diverged_at = np.full(n, -1, dtype=np.int64)
    status = np.zeros(n, dtype=np.int8)
    key0, key1 = _split_seed(seed)
    obs_ptr, obs_coeff, obs_vptr, obs_vidx = obs_tables
    _kernel.run_kernel(
        states,
        logw0,
        float(grid.dt),
        grid.n_steps,
        grid.stride,
        sys.drift_ptr,
        sys.drift_coeff,
        sys.drift_vptr,
        sys.drift_vidx,
        sys.diff_i,
        sys.diff_j,
        sys.diff_ptr,
        sys.diff_coeff,
        sys.diff_vptr,
        sys.diff_vidx,
        sys.nz_global,
        obs_ptr,
        obs_coeff,
        obs_vptr,
        obs_vidx,
        sys.weight_index,
        key0,
        key1,
        np.uint64(NOISE_STREAM_TAG),
        values,
        logweights,
        diverged_at,
        status,
    )
    return values, logweights, diverged_at, status


def _with_weight_column(sys: CompiledSystem, states: np.ndarray) -> np.ndarray:
    if sys.weight_index < 0:
        return states
    n = states.shape[0]
    return np.hstack([states, np.zeros((n, 1), dtype=complex)])


def run_trajectory(
    sys: CompiledSystem,
    init: WeightedSample,
    grid: TimeGrid,
    seed: int,
    traj_index: int = 0,
) -> TrajectoryRecord:
    """Integrate one trajectory, recording full state snapshots.

    Uses the same noise substream as trajectory `traj_index` of an ensemble
    run with this seed, so single trajectories can be replayed exactly.
    """
    states = init.state[None, :].astype(complex)
    states = _with_weight_column(sys, states)
    if states.shape[1] != sys.n_vars:
        raise EngineError("initial state size does not match the system")
    if traj_index:
        pad = np.zeros((traj_index, states.shape[1]), dtype=complex)
        states = np.vstack([pad, states])
    logw0 = np.full(states.shape[0], init.logweight, dtype=complex)
    values, logweights, diverged_at, status = _launch(
        sys, states, logw0, grid, seed, _identity_obs(sys), sys.n_vars, None
    )
    return TrajectoryRecord(
        times=grid.times(),
        states=values[traj_index],
        logweights=logweights[traj_index],
        diverged_at=int(diverged_at[traj_index]),
        status=int(status[traj_index]),
    )


def run_ensemble(
    sys: CompiledSystem,
    grid: TimeGrid,
    n: int,
    seed: int,
    spec: Optional[InitialStateSpec] = None,
    observables=None,
    workers: Optional[int] = None,
) -> EnsembleResult:
    """Integrate n weighted trajectories and record requested observables.

    `observables` is an ObservableTable (see the estimator module); when
    omitted, the model's `observe` declarations are used.
    """
    if n < 2:
        raise EngineError("ensemble needs at least 2 trajectories")
    from .estimator import compile_observables

    if observables is None:
        observables = compile_observables(sys, sys.model.observables)
    if spec is None:
        spec = sys.model.initial_state()
    states, logw0 = sample_ensemble(spec, sys.formulation, n, seed)
    states = _with_weight_column(sys, states)
    if states.shape[1] != sys.n_vars:
        raise EngineError("sampled state size does not match the system")
    values, logweights, diverged_at, status = _launch(
        sys,
        states,
        logw0,
        grid,
        seed,
        (observables.ptr, observables.coeff, observables.vptr, observables.vidx),
        len(observables.labels),
        workers,
    )
    result = EnsembleResult(
        grid=grid,
        times=grid.times(),
        obs_labels=list(observables.labels),
        values=values,
        logweights=logweights,
        diverged_at=diverged_at,
        status=status,
        seed=seed,
        formulation=sys.formulation,
    )
    if not result.alive_mask(grid.n_out - 1).any():
        last = -1
        for i in range(grid.n_out):
            if result.alive_mask(i).any():
                last = i
        when = f"t={result.times[last]:g}" if last >= 0 else "the initial time"
        err = EngineError(f"every trajectory diverged; last surviving output at {when}")
        err.partial_result = result
        raise err
    return result
