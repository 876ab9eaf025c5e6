import math

import numpy as np
import pytest

from groupfields import NEGOTIATION, golden_fixture, golden_scene


@pytest.fixture(scope="session")
def cal():
    return NEGOTIATION


@pytest.fixture(scope="session")
def scene():
    return golden_scene()


@pytest.fixture(scope="session")
def golden():
    return golden_fixture()


def brute_force_weights(vframe, cal):
    """Independent interaction-matrix oracle: plain loops, scalar math."""
    agents = vframe.agents
    n = len(agents)
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            xi, yi = agents[i].position
            xj, yj = agents[j].position
            r = math.hypot(xj - xi, yj - yi)
            bearing = math.atan2(yj - yi, xj - xi)
            gap = abs(math.remainder(agents[i].orientation - bearing, 2 * math.pi))
            kr = math.exp(-r * r / (2 * cal.h_r ** 2))
            kt = math.exp(-gap * gap / (2 * cal.h_theta ** 2))
            w[i, j] = (cal.alpha_w * kr * kt
                       * (1 + cal.beta_e * agents[j].gesture)
                       * agents[j].confidence)
    return w


@pytest.fixture(scope="session")
def oracle_w(golden, cal):
    return brute_force_weights(golden, cal)


@pytest.fixture(scope="session")
def oracle_lambda(oracle_w):
    """Dense eigensolver oracle on the brute-force matrix."""
    vals = np.linalg.eigvals(oracle_w)
    return float(np.max(vals.real))
