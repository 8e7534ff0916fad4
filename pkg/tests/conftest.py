import numpy as np
import pytest

from qtsm_turnpike import QtsmModel

from oracles import GaussianModel


def scalar_model(**kw) -> QtsmModel:
    base = dict(r0=0.06, r1=[0.02], R2=[[0.05]], a=[0.3], A=[[0.2]], b=[0.0], B=[[-2.0]], Lambda=[[0.5]], Sigma=[[0.2]])
    base.update(kw)
    return QtsmModel(**base)


@pytest.fixture
def qmodel() -> QtsmModel:
    return scalar_model()


@pytest.fixture
def gauss() -> GaussianModel:
    return GaussianModel(r0=0.03, r1=1.0, a=0.2, b=0.01, kappa=0.5, lam=0.02)


@pytest.fixture
def gmodel(gauss) -> QtsmModel:
    return QtsmModel.from_mapping(gauss.mapping())


def two_factor_model() -> QtsmModel:
    return QtsmModel(
        r0=0.02,
        r1=[0.01, 0.005],
        R2=[[0.04, 0.01], [0.01, 0.03]],
        a=[0.2, 0.1],
        A=[[0.1, 0.0], [0.05, 0.1]],
        b=[0.0, 0.01],
        B=[[-1.0, 0.2], [0.0, -0.5]],
        Lambda=[[0.3, 0.0], [0.1, 0.2]],
        Sigma=[[0.2, 0.0], [0.05, 0.25]],
    )



def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
