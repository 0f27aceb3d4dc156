"""Shared problem builders for the test suite."""

import copy

import numpy as np
import pytest

from stackelberg_heat.config import build_problem, parse_config

DESK = {
    "geometry": {"kind": "interval", "n": 32, "length": 1.0},
    "time": {"T": 0.1, "M": 64, "theta": 1.0},
    "regions": {
        "omega": [0.2, 0.8],
        "omega1": [0.1, 0.4],
        "omega2": [0.6, 0.9],
        "omega_d": [0.3, 0.7],
        "omega_prime": [0.4, 0.6],
    },
    "leader": {"y0": "x"},
}

DISK = {
    "geometry": {"kind": "disk", "n_r": 4, "n_t": 8, "radius": 1.0},
    "time": {"T": 0.1, "M": 16},
    "regions": {
        "omega": {"r": [0.0, 0.8]},
        "omega1": {"r": [0.2, 0.7]},
        "omega2": {"r": [0.3, 0.9]},
        "omega_d": {"r": [0.0, 0.6]},
        "omega_prime": {"r": [0.0, 0.4]},
    },
    "leader": {"y0": "r*r"},
}


def make_config(base=DESK, **sections):
    data = copy.deepcopy(base)
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return parse_config(data)


def make_setup(base=DESK, **sections):
    return build_problem(make_config(base, **sections))


def small(n=8, M=8, base=DESK, **sections):
    geom = {"n": n} if base is DESK else {}
    return make_setup(base, geometry={**sections.pop("geometry", {}), **geom},
                      time={"M": M, **sections.pop("time", {})}, **sections)


def random_control(problem, rng, region=None):
    shape = problem.control_shape()
    v = rng.standard_normal(shape)
    if region is not None:
        v = region.apply(v)
    return v


@pytest.fixture(scope="session")
def desk():
    return make_setup()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
