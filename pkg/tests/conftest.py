import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from viewgraph_refine import synth
from viewgraph_refine.se3 import AbsolutePose, random_quat

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


@st.composite
def unit_quats(draw):
    q = draw(arrays(float, 4, elements=st.floats(-1.0, 1.0, allow_nan=False)))
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    return q / np.linalg.norm(q)


@st.composite
def poses(draw):
    return AbsolutePose(draw(unit_quats()), draw(arrays(float, 3, elements=finite)))


def random_pose(rng) -> AbsolutePose:
    return AbsolutePose(random_quat(rng), rng.normal(size=3))


@pytest.fixture(scope="session")
def small_graph():
    """8-node synthetic graph with ground-truth edges."""
    g = synth.generate_graph(synth.SceneConfig(rng_seed=11))
    return synth.ground_truth_edges(g)


@pytest.fixture(scope="session")
def probe_graph():
    """3-node graph used by the gradient checks."""
    cfg = synth.SceneConfig(num_cameras=3, num_objects=12, object_view_cone_deg=90.0, rng_seed=5)
    g = synth.generate_graph(cfg)
    return synth.corrupt_edges(g, synth.NoiseModel(20.0, 20.0), 1)


# one PASS/FAIL line per acceptance criterion in the terminal summary
_acceptance: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _acceptance.append((marker.args[0], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in sorted(_acceptance):
        terminalreporter.write_line(f"{name} {status}  {detail}")
