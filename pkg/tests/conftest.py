import ctypes
import gc
import os
import sys
import time

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("lab", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("lab")

try:
    _malloc_trim = ctypes.CDLL("libc.so.6").malloc_trim
except (OSError, AttributeError):
    _malloc_trim = None


def pytest_runtest_teardown(item):
    # sparse factorizations fragment the C heap; hand freed pages back between tests
    gc.collect()
    if _malloc_trim is not None:
        _malloc_trim(0)


@pytest.fixture(scope="session")
def disk_spec():
    from gelfand_lab.geometry import build_domain
    return build_domain("disk")


@pytest.fixture(scope="session")
def disk_mesh(disk_spec):
    from gelfand_lab.geometry import triangulate
    return triangulate(disk_spec, h=0.05)


@pytest.fixture(scope="session")
def fine_disk_mesh(disk_spec):
    from gelfand_lab.geometry import triangulate
    return triangulate(disk_spec, h=0.03)


@pytest.fixture(scope="session")
def annulus_spec():
    from gelfand_lab.geometry import build_domain
    return build_domain("annulus", {"inner_radius": 0.3})


@pytest.fixture(scope="session")
def annulus_mesh(annulus_spec):
    from gelfand_lab.geometry import triangulate
    return triangulate(annulus_spec, h=0.02)


@pytest.fixture(scope="session")
def disk_green_evaluator(fine_disk_mesh):
    from gelfand_lab.greens import GreensEvaluator
    return GreensEvaluator(fine_disk_mesh)


@pytest.fixture(scope="session")
def dumbbell2_evaluator():
    from gelfand_lab.geometry import build_domain, triangulate
    from gelfand_lab.greens import GreensEvaluator
    return GreensEvaluator(triangulate(build_domain("dumbbell", {"m": 2, "eps": 0.15}), h=0.06))


@pytest.fixture(scope="session")
def hub_evaluator():
    from gelfand_lab.geometry import build_domain, triangulate
    from gelfand_lab.greens import GreensEvaluator
    return GreensEvaluator(triangulate(build_domain("hub", {"m": 3, "eps": 0.1, "radius": 0.2}), h=0.025))


@pytest.fixture(scope="session")
def disk_branch(disk_mesh):
    from gelfand_lab.gelfand import continuation
    return continuation(disk_mesh)


@pytest.fixture(scope="session")
def peaked_disk_mesh(disk_spec):
    from gelfand_lab.geometry import triangulate
    return triangulate(disk_spec, h=0.05, refine=[(0.0, 0.0, 0.008, 0.25)])


@pytest.fixture(scope="session")
def dumbbell2_solution():
    """Two-peak dumbbell solution at λ=0.05 on a mesh refined at the Kirchhoff-Routh points."""
    from gelfand_lab.gelfand import solve_multipeak
    from gelfand_lab.geometry import build_domain, triangulate
    from gelfand_lab.greens import GreensEvaluator, kr_critical_search
    spec = build_domain("dumbbell", {"m": 2, "eps": 0.15})
    P = kr_critical_search(GreensEvaluator(triangulate(spec, h=0.06)), [(-1.3, 0.0), (1.3, 0.0)],
                           symmetry=spec.symmetry)
    mesh = triangulate(spec, h=0.06, refine=[(x, y, 0.006, 0.3) for x, y in P])
    return solve_multipeak(GreensEvaluator(mesh), P, 0.05, symmetry=True), P


@pytest.fixture(scope="session")
def peaked_fine_disk_mesh(disk_spec):
    from gelfand_lab.geometry import triangulate
    return triangulate(disk_spec, h=0.03, refine=[(0.0, 0.0, 0.003, 0.2)])


@pytest.fixture(scope="session")
def scenario_runs():
    """Memoized ``name -> [ScenarioResult, ...]`` for the default configurations."""
    from gelfand_lab.scenarios import default_configs, run_scenario
    cache = {}

    def run(name):
        if name not in cache:
            out = []
            for c in default_configs(name):
                t0 = time.perf_counter()
                res = run_scenario(c)
                res.timing["wall_seconds"] = time.perf_counter() - t0
                out.append(res)
            cache[name] = out
        return cache[name]
    return run


ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        if report.outcome == "failed" and not detail:
            detail = report.longreprtext.strip().splitlines()[-1][:200] if report.longreprtext else ""
        ACCEPTANCE[report.nodeid] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(ACCEPTANCE, key=lambda n: int(n.split("criterion_")[1].split("_")[0])):
        outcome, detail = ACCEPTANCE[nodeid]
        name = nodeid.split("::")[-1].replace("test_", "")
        terminalreporter.write_line(f"{name:<48} {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}")
