from __future__ import annotations

import numpy as np
import pytest

from bclab.errors import CFLViolationError, DimensionError, ValidationError
from bclab.generators import flat, time_bump
from bclab.models import BoundaryPatch, BoundarySignal, CoefficientField, GridSpec
from bclab.solver import (
    apply_operator,
    arrival_times,
    collar_layers,
    energy,
    neumann_trace,
    solve_adjoint,
    solve_forward,
)


def _half_line() -> tuple[CoefficientField, BoundarySignal]:
    h = 1.0 / 128
    grid = GridSpec(extents=(1.0,), spacing=(h,), time_step=h / 2, horizon=1.0)
    patch = BoundaryPatch(start=0, stop=1, window=1.0, horizon=1.0)
    times = grid.times()
    f = BoundarySignal(patch, times, time_bump(times, 0.3, 0.2)[None, :])
    return flat(grid), f


def test_free_trace_is_time_derivative() -> None:
    coeffs, f = _half_line()
    u = solve_forward(coeffs, f)
    trace = neumann_trace(u, coeffs, f.patch)
    expected = f.time_derivative()
    error = np.abs(trace.samples - expected).max() / np.abs(expected).max()
    assert error <= 1e-2


def test_field_stays_inside_numerical_cone() -> None:
    coeffs, f = _half_line()
    u = solve_forward(coeffs, f)
    for m in (10, 50, 120):
        assert not np.any(u.values[m, m + 1 :])
    arrival = arrival_times(coeffs, f)
    assert arrival[0] == pytest.approx(f.times[f.support()[0]] - f.time_step)
    assert np.all(np.diff(arrival) > 0)


def test_energy_is_conserved_after_source_stops() -> None:
    coeffs, f = _half_line()
    u = solve_forward(coeffs, f)
    early = energy(u, coeffs, int(0.6 / u.time_step))
    late = energy(u, coeffs, int(0.9 / u.time_step))
    assert early > 0
    assert late == pytest.approx(early, rel=2e-2)


def test_collar_storage_keeps_front_layers() -> None:
    coeffs, f = _half_line()
    full = solve_forward(coeffs, f)
    collar = solve_forward(coeffs, f, storage="collar", collar_depth=0.1)
    assert collar.layers == collar_layers(coeffs.grid, 0.1)
    assert np.array_equal(collar.values, full.values[..., : collar.layers])
    with pytest.raises(ValidationError):
        solve_forward(coeffs, f, storage="disk")


def test_bad_signals_are_rejected() -> None:
    coeffs, f = _half_line()
    with pytest.raises(ValidationError):
        solve_forward(coeffs, f.with_samples(f.samples + 1.0))
    coarse = BoundarySignal(f.patch, f.times[::2], f.samples[:, ::2])
    with pytest.raises(DimensionError):
        solve_forward(coeffs, coarse)


def test_cfl_violation_is_reported() -> None:
    grid = GridSpec(extents=(1.0,), spacing=(1 / 64,), time_step=1 / 64, horizon=1.0)
    patch = BoundaryPatch(start=0, stop=1, window=1.0, horizon=1.0)
    f = BoundarySignal.zeros(patch, grid.times())
    with pytest.raises(CFLViolationError):
        solve_forward(flat(grid), f)


def test_operator_on_quadratic_profile() -> None:
    grid = GridSpec(
        extents=(1.0, 1.0), spacing=(0.125, 0.125), time_step=0.0625, horizon=1.0
    )
    x, _ = grid.mesh()
    coeffs = flat(grid, potential=2.0)
    lu = apply_operator(coeffs, x**2)
    inner = (slice(1, -1), slice(1, -1))
    assert np.allclose(lu[inner], -2.0 + 2.0 * x[inner] ** 2)
    assert np.all(lu[0] == 0)


def test_adjoint_uses_conjugated_potential() -> None:
    coeffs, f = _half_line()
    lossy = coeffs.with_potentials(potential_v=np.full(coeffs.grid.shape, 0.5j))
    direct = solve_adjoint(lossy, f, storage="collar", collar_depth=0.1)
    mirrored = solve_forward(lossy.conjugated(), f, storage="collar", collar_depth=0.1)
    assert np.array_equal(direct.values, mirrored.values)
