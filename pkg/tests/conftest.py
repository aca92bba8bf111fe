import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sdndti.gradient_design import SubsetPlan, condition_number
from sdndti.phantom import hcp_like_sigma, make_phantom, simulate_acquisition
from sdndti.volume_io import GradientScheme

PHI = (1 + 5**0.5) / 2


def icosa_plan_scheme(n_b0=3):
    """Three disjoint six-sets of rotated icosahedron axes.

    A quick stand-in for the optimized design. The icosahedral six-set has
    the same condition number (1.5811) in every orientation.
    """
    base = np.array([[0, 1, PHI], [0, 1, -PHI], [1, PHI, 0], [1, -PHI, 0], [PHI, 0, 1], [-PHI, 0, 1]])
    base = base / np.linalg.norm(base, axis=1, keepdims=True)
    rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]])
    rg = Rotation.from_rotvec([0.3, 0.5, -0.2]).as_matrix()
    dirs = np.vstack([base, base @ rz.T, base @ rg.T])
    conds = [condition_number(dirs[6 * k : 6 * k + 6]) for k in range(3)]
    plan = SubsetPlan([list(range(6 * k, 6 * k + 6)) for k in range(3)], conds)
    scheme = GradientScheme(np.r_[np.zeros(n_b0), np.ones(18)], np.vstack([np.zeros((n_b0, 3)), dirs]))
    return scheme, plan


@pytest.fixture(scope="session")
def icosa():
    return icosa_plan_scheme()


@pytest.fixture(scope="session")
def small_scene():
    return make_phantom((20, 20, 20), seed=0)


@pytest.fixture(scope="session")
def small_acq(small_scene, icosa):
    scheme, plan = icosa
    sigma = hcp_like_sigma(small_scene, 30.0)
    noisy = simulate_acquisition(small_scene, scheme, sigma, seed=0)
    clean = simulate_acquisition(small_scene, scheme, 0.0)
    return noisy, clean, scheme, plan, small_scene.mask


VERDICTS = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number, name, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
