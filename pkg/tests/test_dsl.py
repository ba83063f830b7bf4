import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from positivep import DSLError, ModelError, Polynomial, algebra, parse_gauge, parse_model
from positivep.algebra import FieldOp, SigmaOp, dagger, emitter_rho, field_amp, field_amp_dag

JC_TEXT = """
mode f;
emitter A levels 2;
const g = 1;
H = g*(adag(f)*rho(A,e,g) + a(f)*rho(A,g,e));
init emitter A pure (0, 1);
observe "P_e" = sigma(A,e,e);
observe "n" = adag(f)*a(f);
"""


class TestBasicClauses:
    def test_harmonic_mode(self):
        m = parse_model("mode f; emitter A levels 2; const w = 1.5; H = w * adag(f)*a(f);")
        assert len(m.modes) == 1
        assert m.emitters[0].levels == 2
        assert m.hamiltonian == Polynomial({(field_amp_dag(0), field_amp(0)): 1.5})

    def test_jc_coupling_two_monomials(self):
        m = parse_model(JC_TEXT)
        assert len(m.hamiltonian.terms) == 2
        assert dagger(m.hamiltonian) == m.hamiltonian

    def test_level_labels_default_two(self):
        m = parse_model("emitter A levels 2; H = 0;")
        assert m.emitters[0].labels == ("g", "e")

    def test_level_labels_custom(self):
        m = parse_model("emitter A levels s0 s1 s2; H = rho(A,s2,s2) - rho(A,2,2);")
        assert m.emitters[0].levels == 3
        assert m.hamiltonian.is_zero()

    def test_numeric_level_count(self):
        m = parse_model("emitter B levels 3; H = rho(B,0,2) + rho(B,2,0);")
        assert m.emitters[0].labels == ("0", "1", "2")

    def test_constants_fold(self):
        m = parse_model("mode f; const w = 2; const u = w*w; H = u*adag(f)*a(f);")
        assert m.hamiltonian.terms[(field_amp_dag(0), field_amp(0))] == 4.0


class TestLiterals:
    @pytest.mark.parametrize(
        "lit,val",
        [
            ("1.5", 1.5),
            ("2i", 2j),
            ("1+2i", 1 + 2j),
            ("2e-3", 2e-3),
            ("(1-0.5i)", 1 - 0.5j),
            ("-3", -3.0),
            (".25", 0.25),
        ],
    )
    def test_complex_forms(self, lit, val):
        m = parse_model(f"const c = {lit}; H = 0;")
        assert m.constants["c"] == val

    def test_powers(self):
        m = parse_model("mode f; H = adag(f)^2*a(f)**2 + adag(f)*a(f);")
        assert m.hamiltonian.max_degree() == 4

    def test_fractional_power_rejected(self):
        with pytest.raises(DSLError):
            parse_model("mode f; H = adag(f)^1.5;")


class TestErrors:
    def test_same_emitter_product(self):
        with pytest.raises(DSLError, match="composite-boson"):
            parse_model("emitter A levels 2; H = rho(A,e,g)*rho(A,g,e);")

    def test_syntax_error_has_position(self):
        with pytest.raises(DSLError, match=r"line 2"):
            parse_model("mode f;\nH = adag(f *;")

    def test_unknown_mode(self):
        with pytest.raises(DSLError, match="unknown mode"):
            parse_model("mode f; H = a(gg);")

    def test_unknown_constant(self):
        with pytest.raises(DSLError, match="unknown constant"):
            parse_model("mode f; H = w*a(f);")

    def test_level_out_of_range(self):
        with pytest.raises(DSLError):
            parse_model("emitter A levels 2; H = rho(A,2,0);")

    def test_non_hermitian_h(self):
        with pytest.raises(DSLError, match="Hermitian"):
            parse_model("mode f; H = a(f);")

    def test_non_hermitian_gamma(self):
        text = (
            "emitter A levels 2; H = 0;"
            "lindblad A : gamma(g,e,e,g) = 1;"
        )
        with pytest.raises(DSLError, match="Hermitian"):
            parse_model(text)

    def test_gamma_not_psd(self):
        text = (
            "emitter A levels 2; H = 0;"
            "lindblad A : gamma(g,e,g,e) = -1;"
        )
        with pytest.raises(DSLError, match="positive semidefinite"):
            parse_model(text)

    def test_duplicate_gamma_entry(self):
        text = (
            "emitter A levels 2; H = 0;"
            "lindblad A : gamma(g,e,g,e) = 1;"
            "lindblad A : gamma(g,e,g,e) = 1;"
        )
        with pytest.raises(DSLError, match="duplicate"):
            parse_model(text)

    def test_sigma_in_h_rejected(self):
        with pytest.raises(DSLError, match="rho"):
            parse_model("emitter A levels 2; H = sigma(A,e,e);")

    def test_rho_in_observable_rejected(self):
        with pytest.raises(DSLError, match="sigma"):
            parse_model('emitter A levels 2; H = 0; observe "x" = rho(A,e,e);')

    def test_gauge_clause_in_model_rejected(self):
        with pytest.raises(DSLError, match="gauge file"):
            parse_model("mode f; H = 0; gauge A0 = 0;")

    @given(st.text(alphabet="modeH=a()*+;2 \n\"#fg", max_size=60))
    @settings(max_examples=300)
    def test_parsing_is_total(self, text):
        try:
            parse_model(text)
        except (DSLError, ModelError):
            pass


class TestInitClauses:
    def test_coherent(self):
        m = parse_model("mode f; H = 0; init mode f coherent 1+0.5i;")
        assert m.modes[0].alpha0 == 1 + 0.5j

    def test_pure(self):
        m = parse_model("emitter A levels 2; H = 0; init emitter A pure (0, 1);")
        assert np.allclose(m.emitters[0].c0, [0, 1])
        assert np.allclose(m.emitters[0].p0, [[0, 0], [0, 1]])

    def test_mixed(self):
        m = parse_model(
            "emitter A levels 2; H = 0; init emitter A mixed [[0.5, 0], [0, 0.5]];"
        )
        assert m.emitters[0].c0 is None
        assert np.allclose(m.emitters[0].p0, np.eye(2) / 2)

    def test_default_is_ground(self):
        m = parse_model("emitter A levels 2; H = 0;")
        assert np.allclose(m.initial_state().emitter_p0[0], [[1, 0], [0, 0]])

    def test_bad_norm_rejected(self):
        with pytest.raises(DSLError, match="unit norm"):
            parse_model("emitter A levels 2; H = 0; init emitter A pure (1, 1);")

    def test_bad_trace_rejected(self):
        with pytest.raises(DSLError, match="trace"):
            parse_model(
                "emitter A levels 2; H = 0; init emitter A mixed [[1, 0], [0, 1]];"
            )

    def test_flags_global_and_per_emitter(self):
        m = parse_model(
            "emitter A levels 2; emitter B levels 2; H = 0;"
            "eta off; theta proper; eta B on;"
        )
        assert m.emitters[0].eta == "off"
        assert m.emitters[1].eta == "on"
        assert all(e.theta == "proper" for e in m.emitters)


class TestObservables:
    def test_operator_order_kept(self):
        m = parse_model('mode f; H = 0; observe "x" = a(f)*adag(f);')
        _, terms = m.observables[0]
        _, fac = terms[0]
        assert fac == [FieldOp(0, False), FieldOp(0, True)]

    def test_same_emitter_product_allowed_in_observable(self):
        m = parse_model(
            'emitter A levels 2; H = 0; observe "z" = sigma(A,e,g)*sigma(A,g,e);'
        )
        (_, terms) = m.observables[0]
        assert len(terms[0][1]) == 2

    def test_linear_combination(self):
        m = parse_model(
            'emitter A levels 2; H = 0;'
            'observe "inv" = sigma(A,e,e) - sigma(A,g,g);'
        )
        (_, terms) = m.observables[0]
        assert sorted((c for c, _ in terms), key=lambda z: z.real) == [-1, 1]


class TestRoundTrip:
    CASES = [
        JC_TEXT,
        "mode f; H = 0; init mode f coherent 1;",
        "mode f; const chi = 1; H = chi*adag(f)^2*a(f)^2; init mode f coherent 0.5;"
        'observe "n" = adag(f)*a(f); reconstruct mode f cutoff 12;',
        "emitter A levels 2; H = 0;"
        "lindblad A : gamma(g,e,g,e) = 0.1592;"
        "init emitter A pure (0, 1); eta A off;",
        "emitter A levels 2; H = 0; init emitter A mixed [[0.75, 0.1i], [(0-0.1i), 0.25]];",
        "mode f; emitter A levels 2; emitter B levels r s t;"
        "const J = 0.25;"
        "H = J*(rho(A,e,g)*rho(B,s,r) + rho(A,g,e)*rho(B,r,s)) + a(f)*adag(f)*1;"
        "theta off; eta proper;",
    ]

    @pytest.mark.parametrize("case", range(len(CASES)))
    def test_parse_print_parse_fixed_point(self, case):
        text = self.CASES[case]
        m1 = parse_model(text)
        printed = m1.print_dsl()
        m2 = parse_model(printed)
        assert m2.print_dsl() == printed
        assert m2.hamiltonian == m1.hamiltonian
        assert [mo.alpha0 for mo in m2.modes] == [mo.alpha0 for mo in m1.modes]
        for e1, e2 in zip(m1.emitters, m2.emitters):
            assert e1.labels == e2.labels
            assert np.allclose(e1.p0, e2.p0)
            assert (e1.eta, e1.theta) == (e2.eta, e2.theta)
        assert sorted(m1.lindblad) == sorted(m2.lindblad)
        for k in m1.lindblad:
            assert np.allclose(m1.lindblad[k].gamma, m2.lindblad[k].gamma)
        assert m1.observables == m2.observables
        assert m1.reconstructions == m2.reconstructions

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_random_hermitian_models_round_trip(self, data):
        # random two-level model with a random Hermitian H and PSD gamma
        coeff = st.builds(
            complex, st.floats(-2, 2, allow_nan=False), st.floats(-2, 2, allow_nan=False)
        )
        half = Polynomial.zero()
        pool = (
            field_amp(0),
            field_amp_dag(0),
            emitter_rho(0, 0, 0),
            emitter_rho(0, 0, 1),
            emitter_rho(0, 1, 0),
            emitter_rho(0, 1, 1),
        )
        for _ in range(data.draw(st.integers(1, 4))):
            deg = data.draw(st.integers(1, 2))
            syms = [data.draw(st.sampled_from(pool)) for _ in range(deg)]
            if len({s.idx for s in syms if s.kind == algebra.RHO}) < sum(
                1 for s in syms if s.kind == algebra.RHO
            ):
                continue  # skip same-emitter products
            half = half + Polynomial({tuple(syms): data.draw(coeff)})
        h = half + dagger(half)

        from positivep.model import ModeSpec, EmitterSpec, ModelSpec

        m = ModelSpec(
            modes=[ModeSpec("f", 0)],
            emitters=[EmitterSpec("A", 0, ("g", "e"))],
            hamiltonian=h,
        )
        m.validate()
        printed = m.print_dsl()
        m2 = parse_model(printed)
        assert m2.hamiltonian == m.hamiltonian
        assert m2.print_dsl() == printed


class TestGaugeFiles:
    def test_kerr_damping_gauge(self):
        m = parse_model("mode f; const chi = 1; H = chi*adag(f)^2*a(f)^2;")
        g = parse_gauge("gauge deltaA(alpha f) = -0.05*a(f); gauge A0 = 0;", m)
        assert g.delta_drift[field_amp(0)] == Polynomial({(field_amp(0),): -0.05})
        assert g.a0.is_zero()

    def test_rho_designator(self):
        m = parse_model("emitter A levels 2; H = 0;")
        g = parse_gauge("gauge deltaA(rho A g e) = rho(A,g,e);", m)
        assert emitter_rho(0, 0, 1) in g.delta_drift

    def test_cvar_designator(self):
        m = parse_model("emitter A levels 2; H = 0;")
        g = parse_gauge("gauge deltaA(C A e) = 2*C(A,e); gauge A0 = Cdag(A,g);", m)
        assert algebra.cvar(0, 1) in g.delta_drift
        assert not g.a0.is_zero()

    def test_unknown_mode_rejected(self):
        m = parse_model("mode f; H = 0;")
        with pytest.raises(DSLError, match="unknown mode"):
            parse_gauge("gauge deltaA(alpha q) = 0;", m)

    def test_duplicate_target_rejected(self):
        m = parse_model("mode f; H = 0;")
        with pytest.raises(DSLError, match="duplicate"):
            parse_gauge(
                "gauge deltaA(alpha f) = 0; gauge deltaA(alpha f) = a(f);", m
            )
