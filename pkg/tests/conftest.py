import math

import numpy as np
import pytest

from momentprop.model import (
    CoefficientModel,
    Finite,
    InitialStateModel,
    Point,
    PolynomialSystemSpec,
    build_logistic_model,
    demo_logistic_model,
    demo_vehicle_model,
)


@pytest.fixture(scope="session")
def logistic():
    return demo_logistic_model()


@pytest.fixture(scope="session")
def two_point():
    return build_logistic_model(Finite((0.4, 0.6), (0.5, 0.5)), Point(0.5))


@pytest.fixture(scope="session")
def deterministic_logistic():
    return build_logistic_model(Point(0.5), Point(0.5))


@pytest.fixture(scope="session")
def vehicle():
    return demo_vehicle_model()


def identity_model(n, x0):
    coeffs = CoefficientModel(n, 1, (), [np.zeros((n, 1)), np.eye(n)])
    return PolynomialSystemSpec(coeffs, InitialStateModel.independent([Point(v) for v in x0]))


def close(a, b, rel=1e-9, abs_=0.0):
    return math.isclose(a, b, rel_tol=rel, abs_tol=abs_)
