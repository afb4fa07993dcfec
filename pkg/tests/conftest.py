import math

import jax.numpy as jnp
import numpy as np
import pytest

from core.gauge.fields import build_gauge
from core.gauge.frame import build_caloric_frame
from core.heatflow.heat import HarmonicMapHeatFlow
from core.spectral.grid import Grid2
from core.targets.sphere import Sphere2, SphereProduct
from core.targets.torus import FlatTorus2
from core.types import MapField


def _smooth_map(grid: Grid2, target, amplitude: float) -> MapField:
    """exp_Q of a low-mode trigonometric tangent field; analytic, so spectrally resolved on small grids"""
    x1, x2 = grid.mesh
    frame = np.asarray(target.reference_frame)
    X = amplitude * (np.sin(x1) + 0.5 * np.cos(x2) + 0.3 * np.sin(x1 + x2))[..., None] * frame[0]
    X = X + amplitude * 0.4 * np.cos(x1 - x2)[..., None] * frame[1]
    if frame.shape[0] > 2:
        X = X + amplitude * 0.6 * np.sin(x2)[..., None] * frame[2]
    Q = jnp.asarray(target.base_point)
    return MapField(grid=grid, target=target, values=target.exp_map(Q, jnp.asarray(X)))


@pytest.fixture(scope='session')
def smooth_map():
    return _smooth_map


@pytest.fixture(scope='session')
def grid16():
    return Grid2(16, 2 * math.pi)


@pytest.fixture(scope='session')
def grid32():
    return Grid2(32, 2 * math.pi)


@pytest.fixture(scope='session')
def sphere():
    return Sphere2()


@pytest.fixture(scope='session')
def product():
    return SphereProduct()


@pytest.fixture(scope='session')
def torus():
    return FlatTorus2()


def _gauge_bundle(grid, target, amplitude):
    flow = HarmonicMapHeatFlow(grid, target)
    u = _smooth_map(grid, target, amplitude)
    traj = flow.heat_solve(u)
    frame = build_caloric_frame(traj)
    return {'flow': flow, 'u': u, 'traj': traj, 'frame': frame, 'gauge': build_gauge(traj, frame)}


@pytest.fixture(scope='session')
def sphere_bundle(grid32, sphere):
    return _gauge_bundle(grid32, sphere, 0.05)


@pytest.fixture(scope='session')
def product_bundle(grid16, product):
    return _gauge_bundle(grid16, product, 0.05)


@pytest.fixture(scope='session')
def torus_bundle(grid16, torus):
    return _gauge_bundle(grid16, torus, 0.05)


@pytest.fixture(scope='session')
def constant_bundle(grid16, sphere):
    return _gauge_bundle(grid16, sphere, 0.0)
