"""Kernel, time grid, and ensemble integration tests.

The counter-based generator is frozen against the published Philox 4x32-10
reference vectors, the compiled kernel is replayed step by step against the
python stepper, and statistical assertions use wide (5 standard error)
bands so they stay deterministic for fixed seeds.
"""

import numpy as np
import pytest

from positivep import _kernel
from positivep.compiler import compile_model
from positivep.dsl import parse_model
from positivep.engine import (
    NOISE_STREAM_TAG,
    EngineError,
    TimeGrid,
    _identity_obs,
    _split_seed,
    run_ensemble,
    run_trajectory,
    step,
)
from positivep.estimator import ObservableTable, estimate
from positivep.sampler import WeightedSample, sample_ensemble

JC = """
mode f;
emitter A levels 2;
const g_c = 1;
H = g_c*(adag(f)*rho(A,e,g) + a(f)*rho(A,g,e));
init emitter A pure (0, 1);
observe "P_e" = sigma(A,e,e);
"""

DECAY = """
emitter A levels 2;
lindblad A : gamma(g,e,g,e) = 1;
init emitter A pure (0, 1);
observe "P_e" = sigma(A,e,e);
"""

KERR_UNSTABLE = """
mode f;
const chi = 1;
H = chi*adag(f)*adag(f)*a(f)*a(f);
init mode f coherent 2;
observe "n" = adag(f)*a(f);
"""


def identity_table(sys):
    ptr, coeff, vptr, vidx = _identity_obs(sys)
    return ObservableTable([str(v) for v in sys.variables], ptr, coeff, vptr, vidx)


class TestPhilox:
    # Reference vectors for Philox 4x32-10 from the Random123 distribution.
    def test_zero_input(self):
        z = np.uint64(0)
        out = _kernel.philox4x32(z, z, z, z, z, z)
        assert [hex(int(w)) for w in out] == [
            "0x6627e8d5",
            "0xe169c58d",
            "0xbc57ac4c",
            "0x9b00dbd8",
        ]

    def test_all_ones_input(self):
        f = np.uint64(0xFFFFFFFF)
        out = _kernel.philox4x32(f, f, f, f, f, f)
        assert [hex(int(w)) for w in out] == [
            "0x408f276d",
            "0x41c83b0e",
            "0xa20bc7c6",
            "0x6d5451fd",
        ]

    def test_counter_words_all_matter(self):
        z = np.uint64(0)
        one = np.uint64(1)
        base = _kernel.philox4x32(z, z, z, z, z, z)
        for pos in range(4):
            args = [z, z, z, z]
            args[pos] = one
            assert _kernel.philox4x32(*args, z, z) != base

    def test_key_words_matter(self):
        z = np.uint64(0)
        one = np.uint64(1)
        base = _kernel.philox4x32(z, z, z, z, z, z)
        assert _kernel.philox4x32(z, z, z, z, one, z) != base
        assert _kernel.philox4x32(z, z, z, z, z, one) != base


class TestNormals:
    def test_moments(self):
        n = 1_000_000
        buf = np.empty(n)
        _kernel.fill_normals(
            buf, n, np.uint64(3), np.uint64(1), np.uint64(0), np.uint64(42), np.uint64(7)
        )
        se_mean = 1.0 / np.sqrt(n)
        assert abs(buf.mean()) < 5 * se_mean
        assert abs(buf.var() - 1.0) < 5 * np.sqrt(2.0 / n)
        # adjacent draws share a Philox block; they must still be uncorrelated
        lag1 = np.mean(buf[:-1] * buf[1:])
        assert abs(lag1) < 5 * se_mean

    def test_streams_are_distinct_and_reproducible(self):
        def draw(traj, tag, stp):
            buf = np.empty(8)
            _kernel.fill_normals(
                buf, 8, np.uint64(traj), np.uint64(tag), np.uint64(stp),
                np.uint64(9), np.uint64(9),
            )
            return buf

        a = draw(0, 1, 0)
        assert np.array_equal(a, draw(0, 1, 0))
        assert not np.array_equal(a, draw(1, 1, 0))
        assert not np.array_equal(a, draw(0, 2, 0))
        assert not np.array_equal(a, draw(0, 1, 1))


class TestTimeGrid:
    def test_counts_and_times(self):
        g = TimeGrid(0.0, 1.0, 0.25)
        assert g.n_steps == 4 and g.n_out == 5
        np.testing.assert_allclose(g.times(), [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_stride(self):
        g = TimeGrid(0.0, 1.0, 0.125, stride=4)
        assert g.n_steps == 8 and g.n_out == 3
        np.testing.assert_allclose(g.times(), [0.0, 0.5, 1.0])

    def test_round_off_ratio_accepted(self):
        g = TimeGrid(0.0, 0.3, 0.1)
        assert g.n_steps == 3

    @pytest.mark.parametrize(
        "args",
        [
            (0.0, 1.0, -0.1),
            (0.0, 1.0, 0.0),
            (1.0, 1.0, 0.1),
            (0.0, 2 * np.pi, 2e-3),
            (0.0, 1.0, 0.25, 3),
        ],
    )
    def test_invalid_grids(self, args):
        with pytest.raises(EngineError):
            TimeGrid(*args)


class TestReferenceStep:
    def test_free_mode_single_step(self):
        m = parse_model("mode f;\nconst w = 2;\nH = w*adag(f)*a(f);\n")
        sys = compile_model(m)
        x = np.array([1.0 + 0.5j, 1.0 - 0.5j])
        out = step(sys, x, 0.01)
        np.testing.assert_allclose(out[0], x[0] * (1 - 2j * 0.01), rtol=1e-15)
        np.testing.assert_allclose(out[1], x[1] * (1 + 2j * 0.01), rtol=1e-15)

    def test_non_finite_state_rejected(self):
        m = parse_model("mode f;\nconst c = 1;\nH = c*adag(f)*adag(f)*a(f)*a(f);\n")
        sys = compile_model(m)
        x = np.array([1e200 + 0j, 1e200 + 0j])
        with pytest.raises(EngineError, match="non-finite"):
            with np.errstate(all="ignore"):
                step(sys, x, 0.01, rng=np.random.default_rng(0))


class TestKernelAgainstReference:
    def test_single_trajectory_replay(self):
        """The compiled kernel and the python stepper integrate identically
        when fed the same counter-based noise."""
        sys = compile_model(parse_model(JC))
        spec = sys.model.initial_state()
        states, logw = sample_ensemble(spec, "rho", 1, seed=123)
        grid = TimeGrid(0.0, 0.2, 0.01)
        rec = run_trajectory(sys, WeightedSample(states[0], logw[0]), grid, seed=123)
        assert rec.status == _kernel.STATUS_OK

        k0, k1 = _split_seed(123)
        m = sys.n_noise_vars
        x = states[0].copy()
        for s in range(grid.n_steps):
            wn = np.empty(m)
            _kernel.fill_normals(
                wn, m, np.uint64(0), np.uint64(NOISE_STREAM_TAG), np.uint64(s), k0, k1
            )
            x = step(sys, x, grid.dt, noise=wn)
            np.testing.assert_allclose(rec.states[s + 1], x, rtol=1e-12, atol=1e-14)

    def test_trajectory_is_deterministic(self):
        sys = compile_model(parse_model(JC))
        spec = sys.model.initial_state()
        states, logw = sample_ensemble(spec, "rho", 1, seed=5)
        grid = TimeGrid(0.0, 0.5, 0.01, stride=10)
        a = run_trajectory(sys, WeightedSample(states[0], logw[0]), grid, seed=5)
        b = run_trajectory(sys, WeightedSample(states[0], logw[0]), grid, seed=5)
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.logweights, b.logweights)

    def test_ensemble_substream_replay(self):
        """Row k of an ensemble run equals run_trajectory with traj_index=k."""
        sys = compile_model(parse_model(JC))
        spec = sys.model.initial_state()
        grid = TimeGrid(0.0, 0.3, 0.01, stride=5)
        res = run_ensemble(sys, grid, 4, seed=21, observables=identity_table(sys))
        states, logw = sample_ensemble(spec, "rho", 4, seed=21)
        rec = run_trajectory(
            sys, WeightedSample(states[2], logw[2]), grid, seed=21, traj_index=2
        )
        assert np.array_equal(rec.states, res.values[2])
        assert np.array_equal(rec.logweights, res.logweights[2])


class TestRunTrajectory:
    def test_pure_decay_matches_euler_product(self):
        sys = compile_model(parse_model(DECAY))
        grid = TimeGrid(0.0, 2.0, 1e-3, stride=200)
        spec = sys.model.initial_state()
        spec.eta[0] = "off"
        states, logw = sample_ensemble(spec, "rho", 1, seed=1)
        rec = run_trajectory(sys, WeightedSample(states[0], logw[0]), grid, seed=1)
        # rho_ee is variables[3]; Euler gives (1-dt)^s, within 1e-3 of e^-t
        rho_ee = rec.states[:, 3]
        for k, t in enumerate(rec.times):
            s = k * grid.stride
            np.testing.assert_allclose(rho_ee[k], (1 - grid.dt) ** s, rtol=1e-12)
            assert abs(rho_ee[k] - np.exp(-t)) < 1.5e-3

    def test_free_mode_conserves_amplitude_product(self):
        m = parse_model("mode f;\nconst w = 1;\nH = w*adag(f)*a(f);\ninit mode f coherent 1+1i;\n")
        sys = compile_model(m)
        grid = TimeGrid(0.0, 1e-5, 1e-6)
        spec = sys.model.initial_state()
        states, logw = sample_ensemble(spec, "rho", 1, seed=1)
        rec = run_trajectory(sys, WeightedSample(states[0], logw[0]), grid, seed=1)
        n0 = states[0, 0] * states[0, 1]
        for row in rec.states:
            assert abs(row[0] * row[1] - n0) <= 1e-10


class TestDivergenceHandling:
    def test_divergence_freezes_state(self):
        sys = compile_model(parse_model(KERR_UNSTABLE))
        grid = TimeGrid(0.0, 4.0, 0.01, stride=40)
        res = run_ensemble(sys, grid, 64, seed=5, observables=identity_table(sys))
        n_final = res.diverged_count(grid.n_out - 1)
        assert 0 < n_final < 64
        assert np.all(res.status[res.diverged_at >= 0] == _kernel.STATUS_DIVERGED)
        # counts can only grow along the grid
        counts = [res.diverged_count(i) for i in range(grid.n_out)]
        assert counts == sorted(counts)
        # a frozen trajectory repeats its last recorded state and stays finite
        k = int(np.argmax(res.diverged_at > 0))
        first_bad = res.diverged_at[k]
        outs = np.where(np.arange(grid.n_out) * grid.stride >= first_bad)[0]
        assert np.all(np.isfinite(res.values[k, :, :].view(np.float64)))
        if outs.size > 1:
            assert np.array_equal(res.values[k, outs[0]], res.values[k, outs[-1]])

    def test_masked_estimates_ignore_frozen_rows(self):
        sys = compile_model(parse_model(KERR_UNSTABLE))
        grid = TimeGrid(0.0, 2.0, 0.01, stride=40)
        res = run_ensemble(sys, grid, 128, seed=9)
        series = estimate(res, "n")
        for e in series:
            assert np.isfinite(e.value.real) and np.isfinite(e.stderr)
        assert series[0].n_effective == pytest.approx(128.0)

    def test_all_diverged_raises(self):
        m = parse_model(
            "mode f;\nconst chi = 4;\nH = chi*adag(f)*adag(f)*a(f)*a(f);\n"
            "init mode f coherent 4;\n"
        )
        sys = compile_model(m)
        grid = TimeGrid(0.0, 4.0, 0.02, stride=25)
        with pytest.raises(EngineError, match="every trajectory diverged"):
            run_ensemble(sys, grid, 8, seed=11, observables=identity_table(sys))


class TestEnsembleStatistics:
    def test_deterministic_coherent_rotation(self):
        m = parse_model(
            "mode f;\nconst w = 2;\nH = w*adag(f)*a(f);\n"
            'init mode f coherent 1+0.5i;\nobserve "a" = a(f);\n'
        )
        sys = compile_model(m)
        grid = TimeGrid(0.0, 1.0, 0.01, stride=20)
        res = run_ensemble(sys, grid, 8, seed=3)
        series = estimate(res, "a")
        alpha = 1 + 0.5j
        for k, e in enumerate(series):
            expected = alpha * (1 - 2j * grid.dt) ** (k * grid.stride)
            np.testing.assert_allclose(e.value, expected, rtol=1e-13)
            assert e.stderr == 0.0
            assert e.n_effective == pytest.approx(8.0)

    def test_jc_matches_rabi_oscillation(self):
        sys = compile_model(parse_model(JC))
        grid = TimeGrid(0.0, 1.5, 2e-3, stride=150)
        res = run_ensemble(sys, grid, 4000, seed=17)
        for e in estimate(res, "P_e"):
            assert abs(e.value.real - np.cos(e.time) ** 2) < 5 * e.stderr + 5e-3
            assert e.reliable

    def test_stderr_shrinks_with_ensemble_size(self):
        sys = compile_model(parse_model(JC))
        grid = TimeGrid(0.0, 0.8, 4e-3, stride=200)
        se_small = estimate(run_ensemble(sys, grid, 500, seed=31), "P_e")[-1].stderr
        se_large = estimate(run_ensemble(sys, grid, 8000, seed=32), "P_e")[-1].stderr
        assert 2.4 < se_small / se_large < 7.0

    def test_rate_only_model_is_noiseless(self):
        sys = compile_model(parse_model(DECAY))
        assert sys.n_noise_vars == 0
        grid = TimeGrid(0.0, 1.0, 1e-3, stride=250)
        spec = sys.model.initial_state()
        spec.eta[0] = "off"
        res = run_ensemble(sys, grid, 16, seed=2, spec=spec)
        for e in estimate(res, "P_e"):
            assert e.stderr == 0.0
            np.testing.assert_allclose(e.value.real, np.exp(-e.time), rtol=2e-3)

    def test_weighted_initial_phases_average_out(self):
        sys = compile_model(parse_model(DECAY))
        grid = TimeGrid(0.0, 1.0, 1e-3, stride=500)
        res = run_ensemble(sys, grid, 4000, seed=13)
        for e in estimate(res, "P_e"):
            assert abs(e.value.real - np.exp(-e.time)) < 5 * e.stderr + 1e-3
