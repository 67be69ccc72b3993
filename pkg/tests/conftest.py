import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from strokedtw.strokes import StrokeSequence

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance outcomes, printed once at the end of the session
ACCEPTANCE = {}


def record(criterion: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def random_sequence(rng, n_strokes=None, max_points=8, scale=1.0) -> StrokeSequence:
    """Random-walk strokes; every stroke has at least two points."""
    if n_strokes is None:
        n_strokes = int(rng.integers(1, 4))
    strokes = []
    start = np.zeros(2)
    for _ in range(n_strokes):
        k = int(rng.integers(2, max_points + 1))
        pts = start + np.cumsum(rng.normal(0.0, scale, size=(k, 2)), axis=0)
        strokes.append(pts)
        start = pts[-1] + rng.normal(0.0, scale, size=2)
    return StrokeSequence.from_strokes(strokes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


coords = st.floats(-100.0, 100.0, allow_nan=False, allow_infinity=False)


@st.composite
def stroke_sequences(draw, max_strokes=4, max_points=8):
    n = draw(st.integers(1, max_strokes))
    strokes = [draw(hnp.arrays(np.float64, (draw(st.integers(1, max_points)), 2), elements=coords))
               for _ in range(n)]
    return StrokeSequence.from_strokes(strokes)


@st.composite
def point_arrays(draw, min_size=1, max_size=12):
    k = draw(st.integers(min_size, max_size))
    return draw(hnp.arrays(np.float64, (k, 2), elements=st.floats(-10.0, 10.0, allow_nan=False)))
