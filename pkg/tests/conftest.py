import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CUBE_OBJ = """v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 4 7 3
f 4 8 7
f 1 5 8
f 1 8 4
f 2 3 7
f 2 7 6
"""


def cube_obj(offset=(0.0, 0.0, 0.0)):
    lines = []
    for line in CUBE_OBJ.splitlines():
        if line.startswith("v "):
            p = np.array([float(x) for x in line.split()[1:]]) + offset
            lines.append("v " + " ".join(repr(float(x)) for x in p))
        else:
            lines.append(line)
    return "\n".join(lines) + "\n"


@pytest.fixture
def cube_path(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    return p


@pytest.fixture(scope="session")
def atlased_sphere():
    from invrender.primitives import uv_sphere
    from invrender.uv_atlas import bake_atlas

    mesh, _ = bake_atlas(uv_sphere(1.0, 24, 12), 64, 2)
    return mesh


@pytest.fixture(scope="session")
def sphere_scene(atlased_sphere):
    from invrender.renderer import Scene

    return Scene.from_mesh(atlased_sphere)


def front_view(width=16, height=16, fov=40.0, distance=3.6, view_id=0, direction=(0.3, 0.4, 1.0)):
    from invrender.renderer import CameraView

    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return CameraView.look_at(distance * d, (0, 0, 0), (0, 1, 0), width, height, fov, view_id=view_id)


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """A small mixed-material fixture shared by harness tests."""
    from invrender.fixtures import make_fixture

    out = tmp_path_factory.mktemp("fixture_mixed")
    desc = make_fixture("mixed-material", str(out), n_views=3, image_size=12, map_resolution=32, spp=16)
    return out, desc


def pytest_report_header(config):
    return f"INVRENDER_THREADS={os.environ.get('INVRENDER_THREADS', '<unset>')}"


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion at the end of the run

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    n = mark.args[0]
    state = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    prev = _CRITERIA.get(n)
    if prev is None or prev[0] == "PASS":
        _CRITERIA[n] = (state, mark.kwargs.get("title", ""), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        state, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} {state}: {title}" + (f" ({detail})" if detail else ""))
