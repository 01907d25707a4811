import logging

import pytest

from mfbdsde.model.schemas import LipschitzMeta, SolverConfig
from mfbdsde.model.types import CoefficientSet, ControlProblem, TimeGrid
from mfbdsde.services.dsl import parse
from mfbdsde.services.presets import parse_terminal
from mfbdsde.services.scenario import sample_ensemble


logging.getLogger("mfbdsde").setLevel(logging.DEBUG)


def build_coeffs(xi: str = "0", meta: LipschitzMeta = None, **slots) -> CoefficientSet:
    return CoefficientSet(
        xi_mode=parse_terminal(xi),
        lipschitz=meta or LipschitzMeta(),
        **{slot: parse(source) for slot, source in slots.items()},
    )


@pytest.fixture
def coeffs_from():
    """Factory: coeffs_from(xi="1", theta_f="0.5*y", ...)"""
    return build_coeffs


@pytest.fixture
def small_grid():
    return TimeGrid(0.0, 1.0, 8)


@pytest.fixture
def small_ens(small_grid):
    return sample_ensemble(small_grid, m_outer=4, k_inner=64, seed=1)


@pytest.fixture
def pooled():
    return SolverConfig(estimator="pooled")


@pytest.fixture
def control_linear():
    coeffs = build_coeffs(
        xi="1",
        theta_f="0.5*yp + v",
        l="0.5*y^2 + 0.5*v^2",
        h="0.5*y^2",
        meta=LipschitzMeta(L_yp=0.5, L_v=1.0, alpha2=1.0),
    )
    return ControlProblem(coeffs=coeffs, u_lo=-5.0, u_hi=5.0)
