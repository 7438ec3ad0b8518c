from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from bclab.boundary_control import (
    DelayedSystem,
    a_form,
    delayed_ids,
    eigen_floor,
    form_grams,
    galerkin_project,
    lambda0_form,
    recover_a1,
    richardson,
    write_report,
)
from bclab.characteristic import CharacteristicGeometry, interior_a
from bclab.dtn import assemble_dtn, bump_basis, impulse_basis
from bclab.errors import CoercivityError, ValidationError
from bclab.generators import flat, time_bump
from bclab.models import BoundaryPatch, BoundarySignal, GridSpec
from bclab.solver import solve_adjoint, solve_forward

WINDOW = 0.5


def _half_line() -> tuple[GridSpec, BoundaryPatch]:
    grid = GridSpec(
        extents=(1.0,), spacing=(1 / 64,), time_step=1 / 128, horizon=WINDOW
    )
    return grid, BoundaryPatch(start=0, stop=1, window=WINDOW, horizon=WINDOW)


def _bump(patch: BoundaryPatch, times: np.ndarray, center: float) -> BoundarySignal:
    return BoundarySignal(patch, times, time_bump(times, center, 0.12)[None, :])


def test_free_forms_match_closed_form() -> None:
    grid, patch = _half_line()
    times = grid.times()
    f, g = _bump(patch, times, 0.2), _bump(patch, times, 0.3)
    lf = f.with_samples(f.time_derivative())
    lg = g.with_samples(g.time_derivative())
    df, dg = f.time_derivative()[0], g.time_derivative()[0]
    weights = np.full(times.size, grid.time_step)
    weights[[0, -1]] *= 0.5
    by_parts = 2.0 * np.sum(df * g.samples[0] * weights)
    assert a_form(f, g, lf, lg) == pytest.approx(by_parts, rel=1e-3, abs=1e-6)
    assert lambda0_form(f, g, lf, lg) == pytest.approx(2.0 * np.sum(df * dg * weights))


def test_a_form_matches_interior_quadrature() -> None:
    grid, patch = _half_line()
    coeffs = flat(grid)
    times = grid.times()
    f, g = _bump(patch, times, 0.2), _bump(patch, times, 0.25)
    dataset = assemble_dtn(coeffs, [f, g])
    u, v = solve_forward(coeffs, f), solve_adjoint(coeffs, g)
    geometry = CharacteristicGeometry.build(grid, patch, WINDOW, 1.0)
    boundary = a_form(f, g, dataset.trace(0), dataset.trace(1))
    interior = interior_a(u, v, geometry)
    assert abs(boundary - interior) <= 2e-2 * abs(interior)


def test_galerkin_reproduces_basis_element() -> None:
    grid, patch = _half_line()
    dataset = assemble_dtn(flat(grid), bump_basis(grid, patch, shifts=5))
    gram_q, gram_a = form_grams(dataset)
    assert eigen_floor(gram_q) > 0
    k = 2
    record = galerkin_project(
        gram_q, gram_a, lambda e: (e * gram_q + gram_a)[k], range(len(dataset)), 1e-2
    )
    expected = np.zeros(len(dataset))
    expected[k] = 1.0
    assert np.allclose(record.coefficients, expected, atol=1e-8)
    assert record.residual < 1e-10


def test_galerkin_rejects_bad_input() -> None:
    gram = -np.eye(3)
    with pytest.raises(CoercivityError) as info:
        galerkin_project(gram, np.eye(3), lambda e: np.ones(3), [0, 1, 2], 1e-2)
    assert info.value.eigen_floor == pytest.approx(-1.0)
    with pytest.raises(ValidationError):
        galerkin_project(np.eye(3), np.eye(3), lambda e: np.ones(3), [0, 1, 2], 0.0)


def test_richardson_removes_linear_error() -> None:
    values = [1.0 + 2.0 * e for e in (1e-1, 1e-2, 1e-3)]
    assert richardson(values, [10.0, 10.0]) == pytest.approx([1.0, 1.0])


def test_delayed_basis_starts_after_s0() -> None:
    grid, patch = _half_line()
    dataset = assemble_dtn(flat(grid), impulse_basis(grid, patch))
    pairs = delayed_ids(dataset, 0.25)
    starts = [int(np.flatnonzero(dataset.basis[i, 0])[0]) + d for i, d in pairs]
    assert min(starts) * grid.time_step > 0.25
    with pytest.raises(ValidationError):
        delayed_ids(dataset, WINDOW)


def test_a1_matches_cut_interior_form() -> None:
    grid, patch = _half_line()
    coeffs = flat(grid)
    dataset = assemble_dtn(coeffs, impulse_basis(grid, patch))
    times = dataset.times
    f, g = _bump(patch, times, 0.2), _bump(patch, times, 0.25)
    s0 = 0.25
    result = recover_a1(f, g, dataset, s0)
    u, v = solve_forward(coeffs, f), solve_adjoint(coeffs, g)
    geometry = CharacteristicGeometry.build(grid, patch, WINDOW, 1.0)
    interior = interior_a(u, v, geometry, s_max=s0)
    assert abs(result.value - interior) <= 5e-2 * abs(interior)
    assert result.eigen_floor > 0
    assert result.basis_size == len(delayed_ids(dataset, s0))


def test_a1_vanishes_for_late_sources() -> None:
    grid, patch = _half_line()
    dataset = assemble_dtn(flat(grid), impulse_basis(grid, patch))
    times = dataset.times
    f, g = _bump(patch, times, 0.3), _bump(patch, times, 0.25)
    system = DelayedSystem(dataset, grid.time_step)
    early = recover_a1(f, g, dataset, grid.time_step, system=system)
    assert abs(early.value) <= 1e-4 * max(1.0, abs(early.a_full))
    late = recover_a1(f, g, dataset, 0.15)
    assert abs(late.value) <= 1e-4 * max(1.0, abs(late.a_full))


def test_a1_rejects_bad_schedule_and_s0(tmp_path: Path) -> None:
    grid, patch = _half_line()
    dataset = assemble_dtn(flat(grid), impulse_basis(grid, patch))
    f = _bump(patch, dataset.times, 0.3)
    with pytest.raises(ValidationError, match="strictly decreasing"):
        recover_a1(f, f, dataset, 0.2, [1e-2, 1e-1])
    with pytest.raises(ValidationError):
        recover_a1(f, f, dataset, 0.0)

    result = recover_a1(f, f, dataset, 0.25, [1e-1, 1e-2, 1e-3])
    write_report(tmp_path / "a1.json", result, {"s0": 0.25})
    payload = json.loads((tmp_path / "a1.json").read_text())
    assert payload["inputs"] == {"s0": 0.25}
    assert payload["result"]["epsilons"] == [1e-1, 1e-2, 1e-3]
    assert len(payload["result"]["conditions"]) == 3
