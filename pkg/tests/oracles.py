"""Independent reference values.

Closed forms are evaluated here without going through the package, and
the numbers the tests compare against are frozen below together with the
recipe that produced them (root bracketing and quadrature from scipy).
"""

import math

import numpy as np

TWO_PI = 2.0 * math.pi
EIGHT_PI = 8.0 * math.pi

# Radial family on the unit disk: u = log(8t / (λ (t + r²)²)) with 8t = λ(1 + t)².
# Frozen from scipy.optimize.brentq on 8t - λ(1+t)² and scipy.integrate.quad of λe^u.
RADIAL_SMALL_ROOT = {0.2: 0.02633403898971184, 0.1: 0.012822620764144355, 0.05: 0.006329367474003929}
RADIAL_LARGE_ROOT_02 = 37.973665961010276
RADIAL_SUP_02 = 7.32577237257897
RADIAL_SUP_LARGE_02 = 0.05198653564980259
RADIAL_MASS = {0.2: 24.48787653331479, 0.1: 24.814553618240122, 0.05: 24.974667381320945}
DISK_FOLD = 2.0


def radial_small_root(lam: float) -> float:
    from scipy.optimize import brentq
    return brentq(lambda t: 8 * t - lam * (1 + t) ** 2, 1e-14, 1.0, xtol=1e-16)


def radial_solution(lam: float, r, t=None):
    t = radial_small_root(lam) if t is None else t
    r = np.asarray(r, dtype=float)
    return np.log(8 * t / (lam * (t + r * r) ** 2))


def radial_solution_xy(lam: float, t=None):
    t = radial_small_root(lam) if t is None else t
    return lambda p: radial_solution(lam, np.hypot(p[:, 0], p[:, 1]), t)


def disk_green(x, y) -> float:
    """Method of images on the unit disk."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    # |y|·|x - y/|y|²| written without dividing by |y|
    image = math.sqrt(float(np.dot(x, x) * np.dot(y, y) - 2.0 * np.dot(x, y) + 1.0))
    return math.log(image / np.hypot(*(x - y))) / TWO_PI


def disk_robin(x) -> float:
    return math.log(1.0 - float(np.dot(x, x))) / TWO_PI


def annulus_harmonic(p, inner: float):
    """Harmonic function equal to 0 on r = 1 and 1 on r = inner."""
    return np.log(np.hypot(p[:, 0], p[:, 1])) / math.log(inner)


def torsion_disk(p):
    """Solution of -Δw = 1 on the unit disk with w = 0 on the boundary."""
    return (1.0 - p[:, 0] ** 2 - p[:, 1] ** 2) / 4.0
