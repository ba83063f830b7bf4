import numpy as np
import pytest
from hypothesis import strategies as st

from positivep import Polynomial, algebra

# a small formal symbol pool: two modes, one 2-level rho block, one C pair.
# Algebra-level tests treat these as independent formal variables.
SYMBOL_POOL = (
    algebra.field_amp(0),
    algebra.field_amp_dag(0),
    algebra.field_amp(1),
    algebra.field_amp_dag(1),
    algebra.emitter_rho(0, 0, 0),
    algebra.emitter_rho(0, 0, 1),
    algebra.emitter_rho(0, 1, 0),
    algebra.emitter_rho(0, 1, 1),
    algebra.cvar(1, 0),
    algebra.cvar_dag(1, 0),
)

coefficients = st.builds(
    complex,
    st.floats(-2.0, 2.0, allow_nan=False),
    st.floats(-2.0, 2.0, allow_nan=False),
).filter(lambda z: abs(z) > 1e-3)


@st.composite
def polynomials(draw, pool=SYMBOL_POOL, max_terms=4, max_degree=3):
    p = Polynomial.zero()
    for _ in range(draw(st.integers(0, max_terms))):
        deg = draw(st.integers(0, max_degree))
        syms = tuple(draw(st.sampled_from(pool)) for _ in range(deg))
        p = p + Polynomial({syms: draw(coefficients)})
    return p


@st.composite
def states(draw, pool=SYMBOL_POOL, radius=1.4):
    coord = st.builds(
        complex,
        st.floats(-radius, radius, allow_nan=False),
        st.floats(-radius, radius, allow_nan=False),
    )
    return {s: draw(coord) for s in pool}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
