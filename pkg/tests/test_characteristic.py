from __future__ import annotations

import numpy as np
import pytest

from bclab.characteristic import (
    CharacteristicGeometry,
    interior_q,
    plane_derivative_s,
    restrict_to_plane,
)
from bclab.errors import DimensionError, ValidationError
from bclab.generators import flat, normal_bump, time_bump
from bclab.models import BoundaryPatch, BoundarySignal, GridSpec
from bclab.solver import solve_forward


def _half_line() -> tuple[GridSpec, BoundaryPatch]:
    grid = GridSpec(extents=(1.0,), spacing=(1 / 64,), time_step=1 / 128, horizon=0.5)
    return grid, BoundaryPatch(start=0, stop=1, window=0.5, horizon=0.5)


def test_plane_nodes_lie_on_characteristic() -> None:
    grid, patch = _half_line()
    geometry = CharacteristicGeometry.build(grid, patch, 0.5, 1.0)
    for tau in (0.0, 0.125):
        layers, times, s = geometry.plane(tau)
        assert np.all(np.diff(s) > 0)
        assert geometry.identity_residual(tau) < 1e-12
        assert np.allclose(times * grid.time_step - layers * grid.normal_spacing, s)
    with pytest.raises(ValidationError):
        geometry.plane(1 / 1000)


def test_geometry_needs_integer_ratio_and_collar() -> None:
    grid = GridSpec(extents=(1.0,), spacing=(0.1,), time_step=0.03, horizon=0.99)
    patch = BoundaryPatch(start=0, stop=1, window=0.99, horizon=0.99)
    with pytest.raises(ValidationError):
        CharacteristicGeometry.build(grid, patch, 0.99, 1.0)
    grid, patch = _half_line()
    geometry = CharacteristicGeometry.build(grid, patch, 0.5, 2.0)
    assert geometry.collar_bound() == pytest.approx(1.0)
    assert geometry.within_collar()
    slow = CharacteristicGeometry.build(grid, patch, 0.5, 8.0)
    assert not slow.within_collar()


def test_gamma_one_widens_by_reach() -> None:
    grid = GridSpec(
        extents=(1.0, 0.5), spacing=(1 / 16, 1 / 16), time_step=1 / 32, horizon=0.5
    )
    patch = BoundaryPatch(start=6, stop=11, window=0.25, horizon=0.5)
    geometry = CharacteristicGeometry.build(grid, patch, 0.25, 1.0)
    assert geometry.gamma == (6, 11)
    assert geometry.gamma1 == (2, 15)


def test_free_field_on_plane_is_the_source() -> None:
    grid, patch = _half_line()
    times = grid.times()
    samples = time_bump(times, 0.2, 0.12)
    f = BoundarySignal(patch, times, samples[None, :])
    u = solve_forward(flat(grid), f)
    geometry = CharacteristicGeometry.build(grid, patch, 0.5, 1.0)
    s, values = restrict_to_plane(u, geometry)
    expected = time_bump(s, 0.2, 0.12)
    assert np.abs(values[:, 0] - expected).max() <= 3e-2
    _, u_s = plane_derivative_s(u, geometry)
    fine = np.linspace(0.0, 0.5, 4001)
    slope = np.interp(s, fine, np.gradient(time_bump(fine, 0.2, 0.12), fine))
    assert np.abs(u_s[:, 0] - slope).max() <= 1e-1 * np.abs(slope).max()


def test_interior_q_needs_stored_layers() -> None:
    grid, patch = _half_line()
    times = grid.times()
    f = BoundarySignal(patch, times, time_bump(times, 0.2, 0.12)[None, :])
    coeffs = normal_bump(grid)
    collar = solve_forward(coeffs, f, storage="collar", collar_depth=0.05)
    geometry = CharacteristicGeometry.build(grid, patch, 0.5, 1.0)
    with pytest.raises(DimensionError):
        interior_q(collar, collar, coeffs, geometry)
    full = solve_forward(coeffs, f)
    assert interior_q(full, full, coeffs, geometry).real > 0
