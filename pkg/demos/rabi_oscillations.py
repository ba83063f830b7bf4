"""Vacuum Rabi oscillations from weighted trajectories.

The resonant exchange model (one mode, one two-level emitter, vacuum
field, emitter excited) has the closed-form excited population
P_e(t) = cos(t)^2, which makes it the friendliest first target: every
piece of the pipeline shows up (eta-weighted initial sampling, state
dependent noise, the ratio estimator), yet the answer is known exactly.

It also shows the method's honest limitation.  The estimator is
unbiased at every time, but the sampling variance of the ungauged
positive-P variables grows explosively here once t passes ~1.5: the
early rows track cos(t)^2 within a tight standard error, the late rows
drown in it.  Longer horizons need more trajectories than they are
worth, or a drift gauge (see kerr_gauge.py for that tool).

    python3 demos/rabi_oscillations.py [n_trajectories]
"""

import sys
from importlib import resources

import numpy as np

from positivep.compiler import compile_model
from positivep.dsl import parse_model
from positivep.engine import TimeGrid, run_ensemble
from positivep.estimator import estimate


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 20000
    text = (resources.files("positivep") / "models" / "jaynes_cummings.pp").read_text()
    model = parse_model(text)
    system = compile_model(model)

    grid = TimeGrid(0.0, 3.2, 2e-3, stride=160)
    result = run_ensemble(system, grid, n, seed=7)

    print(f"{n} trajectories, {grid.n_steps} steps of {grid.dt}")
    print(f"{'t':>5} {'P_e':>12} {'exact':>8} {'stderr':>9} {'ess/n':>6}")
    for est in estimate(result, "P_e"):
        exact = np.cos(est.time) ** 2
        print(
            f"{est.time:5.2f} {est.value.real:12.4f} {exact:8.4f} "
            f"{est.stderr:9.2e} {est.n_effective / n:6.3f}"
        )
    print("\nunbiased throughout, resolved only while the stderr column is")
    print("small; past t ~ 1.5 the weight tails swallow the signal")


if __name__ == "__main__":
    main()
