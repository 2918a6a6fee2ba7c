"""Shared fixtures: the expensive objects are session-scoped and reused.

The workhorse problem is the one-dimensional cosine potential
H(q, y) = q^2 + 0.5 cos(2 pi y) with unit diffusion, paired with either
affine data or a smooth monotone ramp.  A small two-dimensional problem
covers the planar code paths.
"""

import numpy as np
import pytest

from hjh.cell import TorusGrid, effective_table
from hjh.correctors import build_hierarchy
from hjh.problem import (Diffusion, InitialData, ProblemSpec,
                         SeparableQuadratic, TrigSeries, default_bounds)


def make_cos_spec():
    V = TrigSeries(1, 0.0, (((1,), 0.5, 0.0),))
    ham = SeparableQuadratic(1, 1.0, (TrigSeries.constant(1, 0.0),), V)
    diff = Diffusion.identity(1)
    return ProblemSpec(dim=1, diffusion=diff, hamiltonian=ham,
                       bounds=default_bounds(diff, ham))


@pytest.fixture(scope="session")
def spec_cos():
    return make_cos_spec()


@pytest.fixture(scope="session")
def ramp_g():
    return InitialData.ramp(0.4, 1.6, 0.35)


@pytest.fixture(scope="session")
def affine_g():
    return InitialData.affine(1.0)


@pytest.fixture(scope="session")
def cos_table(spec_cos):
    return effective_table(spec_cos, TorusGrid(1, 64), [(0.2, 1.8)], 0.02)


@pytest.fixture(scope="session")
def ramp_hier(spec_cos, cos_table, ramp_g):
    return build_hierarchy(spec_cos, cos_table, ramp_g, [(-1.0, 1.0)], 0.25, 3)


@pytest.fixture(scope="session")
def spec2d():
    V2 = TrigSeries(2, 0.0, (((1, 0), 0.22, 0.0), ((0, 1), 0.0, 0.18),
                             ((1, 1), 0.1, 0.0)))
    b2 = (TrigSeries.constant(2, 0.0), TrigSeries.constant(2, 0.0))
    ham2 = SeparableQuadratic(2, 1.0, b2, V2)
    diff2 = Diffusion.identity(2)
    return ProblemSpec(dim=2, diffusion=diff2, hamiltonian=ham2,
                       bounds=default_bounds(diff2, ham2))


@pytest.fixture(scope="session")
def table2d(spec2d):
    return effective_table(spec2d, TorusGrid(2, 16), [(0.5, 1.5), (0.3, 1.3)],
                           0.125)


def fit_slope(eps_list, errs):
    return float(np.polyfit(np.log(eps_list), np.log(errs), 1)[0])
