from __future__ import annotations

import numpy as np
import pytest

from bclab.boundary_control import A1Result
from bclab.characteristic import CharacteristicGeometry, interior_a
from bclab.dtn import DtNDataset, assemble_dtn, bump_basis
from bclab.errors import (
    BudgetExceededError,
    CoverageError,
    ProbeSupportError,
    ValidationError,
)
from bclab.generators import flat, normal_bump, smooth_bump, time_bump
from bclab.models import BoundaryPatch, BoundarySignal, CoefficientField, GridSpec
from bclab.optics import (
    AdjointFieldExtractor,
    ExtractionPlan,
    ForwardMeasurement,
    ProbeBudget,
    ProbeExtractor,
    ProbeSpec,
    SliceRegion,
    build_probe,
    characteristic_slice,
    extract_point,
    mollifier,
    plateau_cutoff,
    probe_residual,
    residual_slope,
    slice_field,
)
from bclab.semigeodesic import normal_form
from bclab.solver import solve_adjoint, solve_forward


def _strip() -> tuple[GridSpec, BoundaryPatch]:
    grid = GridSpec(
        extents=(1.0, 0.5), spacing=(1 / 32, 1 / 32), time_step=1 / 64, horizon=1.0
    )
    return grid, BoundaryPatch(start=0, stop=grid.face_size, window=1.0, horizon=1.0)


def _half_line(h: float) -> tuple[GridSpec, BoundaryPatch]:
    grid = GridSpec(extents=(0.5,), spacing=(h,), time_step=h / 2, horizon=0.5)
    return grid, BoundaryPatch(start=0, stop=1, window=0.5, horizon=0.5)


def test_cutoffs() -> None:
    s = np.linspace(0.0, 1.0, 201)
    chi = plateau_cutoff(s, 0.5, 0.1)
    assert np.all(chi[np.abs(s - 0.5) < 0.1 - 1e-9] == 1.0)
    assert np.all(chi[np.abs(s - 0.5) > 0.2 + 1e-9] == 0.0)
    y = np.linspace(-1.0, 1.0, 4001)
    assert np.trapezoid(mollifier(y, 0.1, 0.25), y) == pytest.approx(1.0, rel=1e-5)


def test_probe_amplitudes_vanish_on_the_face() -> None:
    grid, patch = _strip()
    nf = normal_form(normal_bump(grid))
    probe = build_probe(nf, ProbeSpec(40.0, 0.5, y0=0.5), patch, grid.times())
    assert probe.amplitudes.shape[0] == 3
    assert np.all(probe.amplitudes[1:, ..., 0] == 0)
    assert probe.trace.is_compatible()
    assert probe.mass == pytest.approx(1.0, rel=5e-2)


def test_probe_residual_decays_with_order() -> None:
    grid, patch = _strip()
    nf = normal_form(normal_bump(grid))
    wavenumbers = [20.0, 40.0, 80.0, 160.0]
    for order in (1, 2):
        spec = ProbeSpec(40.0, 0.5, y0=0.5, order=order)
        probe = build_probe(nf, spec, patch, grid.times())
        residuals = [probe_residual(probe, k) for k in wavenumbers]
        assert residual_slope(wavenumbers, residuals) == pytest.approx(-order, abs=0.3)


def test_probe_support_is_checked() -> None:
    grid, patch = _strip()
    nf = normal_form(normal_bump(grid))
    with pytest.raises(ProbeSupportError) as info:
        build_probe(nf, ProbeSpec(40.0, 0.05, y0=0.5), patch, grid.times())
    assert info.value.overflow > 0
    with pytest.raises(ProbeSupportError):
        build_probe(nf, ProbeSpec(40.0, 0.5, y0=0.05), patch, grid.times())
    late = ProbeSpec(40.0, 0.97, y0=0.5, plateau=0.01)
    with pytest.raises(CoverageError):
        build_probe(nf, late, patch, grid.times())


def test_probe_budget() -> None:
    budget = ProbeBudget(limit=2)
    budget.spend()
    budget.spend()
    with pytest.raises(BudgetExceededError):
        budget.spend()
    unlimited = ProbeBudget()
    unlimited.spend(100)
    assert unlimited.used == 100


def test_extraction_plan_validation() -> None:
    with pytest.raises(ValidationError):
        ExtractionPlan(wavenumbers=(80.0, 40.0))
    with pytest.raises(ValidationError):
        ExtractionPlan(mollifiers=(0.1, 0.2))
    with pytest.raises(ValidationError):
        ProbeSpec(-1.0, 0.5)


def test_extract_point_recovers_adjoint_trace() -> None:
    grid, patch = _half_line(1 / 2048)
    coeffs = flat(grid)
    dataset = assemble_dtn(coeffs, bump_basis(grid, patch, shifts=3))
    times = dataset.times
    g = BoundarySignal(patch, times, time_bump(times, 0.22, 0.22)[None, :])
    geometry = CharacteristicGeometry.build(grid, patch, 0.5, 1.0)
    v = solve_adjoint(coeffs, g)

    def oracle(f: BoundarySignal, _g, _data, s0: float, *_, **__) -> A1Result:
        value = interior_a(solve_forward(coeffs, f), v, geometry, s_max=s0)
        return A1Result(value, value, 0j, s0, [], [], [], [], 1.0, 0)

    budget = ProbeBudget(limit=3)
    result = extract_point(
        dataset,
        g,
        normal_form(coeffs),
        s0=0.25,
        plan=ExtractionPlan(plateau=0.1, k_tolerance=1.0),
        measure=ForwardMeasurement(coeffs),
        a1_evaluator=oracle,
        budget=budget,
    )
    expected = time_bump(np.array([0.25]), 0.22, 0.22)[0]
    assert abs(result.value - expected) <= 5e-2 * abs(expected)
    assert [k for _, k, _ in result.k_table] == [40.0, 80.0, 160.0]
    assert result.solves == budget.used == 3


def test_adjoint_field_slices() -> None:
    grid, patch = _half_line(1 / 64)
    times = grid.times()
    g = BoundarySignal(patch, times, time_bump(times, 0.2, 0.15)[None, :])
    extractor = AdjointFieldExtractor(flat(grid))
    geometry = CharacteristicGeometry.build(grid, patch, 0.5, 1.0)
    plane = characteristic_slice(extractor, 0, g, geometry)
    assert plane.extractor == "adjoint-field"
    expected = time_bump(plane.s, 0.2, 0.15)
    assert np.abs(plane.values[:, 0] - expected).max() <= 3e-2

    region = SliceRegion(0, 1, layers=5)
    bundle = slice_field(
        extractor,
        [g, 2.0 * g],
        region,
        spacing=grid.spacing,
        window=0.5,
        time_step=grid.time_step,
    )
    assert bundle.time == pytest.approx(0.25)
    assert bundle.values.shape == (2, 1, 5)
    assert np.allclose(bundle.values[1], 2.0 * bundle.values[0])
    assert bundle.subset([1]).sources == 1
    with pytest.raises(CoverageError):
        slice_field(
            extractor,
            [g],
            SliceRegion(0, 1, layers=20),
            spacing=grid.spacing,
            window=0.5,
            time_step=grid.time_step,
        )


def test_probe_extractor_rejects_points_off_the_planes() -> None:
    grid, patch = _half_line(1 / 64)
    coeffs = flat(grid)
    dataset = assemble_dtn(coeffs, bump_basis(grid, patch, shifts=3))
    extractor = ProbeExtractor(dataset, normal_form(coeffs), ForwardMeasurement(coeffs))
    with pytest.raises(CoverageError):
        extractor.value(0, dataset.signal(0), 0, 4, 0)
    with pytest.raises(ValidationError):
        SliceRegion(3, 3, layers=5)


def _extract_from_data(
    coeffs: CoefficientField,
    g: BoundarySignal,
    dataset: DtNDataset,
    plan: ExtractionPlan,
    *,
    s0: float,
    y0: float = 0.0,
) -> tuple[complex, complex, int]:
    result = extract_point(
        dataset,
        g,
        normal_form(coeffs),
        s0=s0,
        y0=y0,
        plan=plan,
        measure=ForwardMeasurement(coeffs),
    )
    grid, window = coeffs.grid, float(dataset.times[-1])
    layer = round((window - s0) / (2 * grid.normal_spacing))
    step = round((window + s0) / (2 * grid.time_step))
    plane = solve_adjoint(coeffs, g).values[step, ..., layer]
    if grid.dim == 1:
        return result.value, complex(plane), result.solves
    weights = dataset.patch.weights(grid)
    expected = complex(np.sum(weights * plane) / np.sum(weights))
    return result.value, expected, result.solves


def test_extract_point_from_boundary_data_on_the_half_line() -> None:
    grid, patch = _half_line(1 / 2048)
    times = grid.times()
    g = BoundarySignal(patch, times, time_bump(times, 0.22, 0.22)[None, :])
    basis = bump_basis(grid, patch, shifts=3)
    scattering = normal_bump(grid, scalar_amplitude=10.0, center=(0.1,), radius=0.1)
    for coeffs in (flat(grid), scattering):
        value, expected, solves = _extract_from_data(
            coeffs, g, assemble_dtn(coeffs, basis), ExtractionPlan(plateau=0.1), s0=0.25
        )
        assert abs(value - expected) <= 5e-2 * abs(expected)
        # one solve per wavenumber plus the test source, which is outside the span
        assert solves == 4


def test_extract_point_from_boundary_data_on_a_strip() -> None:
    h = 1 / 256
    grid = GridSpec(extents=(1.0, 0.5), spacing=(h, h), time_step=h / 2, horizon=0.5)
    patch = BoundaryPatch(start=0, stop=grid.face_size, window=0.5, horizon=0.5)
    coeffs = flat(grid)
    times = grid.times()
    profile = smooth_bump((patch.coordinates(grid) - 0.5) / 0.2)
    g = BoundarySignal(patch, times, np.outer(profile, time_bump(times, 0.22, 0.22)))
    dataset = assemble_dtn(coeffs, bump_basis(grid, patch, centers=1, shifts=3))
    plan = ExtractionPlan(plateau=0.1, order=0, flat_profile=True)
    value, expected, solves = _extract_from_data(
        coeffs, g, dataset, plan, s0=0.25, y0=0.5
    )
    assert abs(value - expected) <= 5e-2 * abs(expected)
    assert solves == 4


def test_oscillating_trace_is_held_after_s0() -> None:
    grid, patch = _half_line(1 / 256)
    nf = normal_form(flat(grid))
    probe = build_probe(nf, ProbeSpec(40.0, 0.25, plateau=0.1), patch, grid.times())
    times = probe.trace.times
    after = probe.trace.samples[0, times >= 0.25]
    assert np.allclose(after, 1.0)
    before = probe.trace.samples[0, (times > 0.15) & (times < 0.25)]
    assert np.allclose(np.abs(before), 1.0)
    assert not np.allclose(before, 1.0)
