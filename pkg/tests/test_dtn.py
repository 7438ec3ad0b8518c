from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from bclab.dtn import (
    DtNDataset,
    add_noise,
    assemble_dtn,
    bump_basis,
    impulse_basis,
    lambda_prime,
    load_dataset,
    parallel_map,
    propagate_dtn,
    save_dataset,
    time_reversed_adjoint,
)
from bclab.errors import MissingArtifactError, ValidationError
from bclab.generators import flat, layered, time_bump, warped
from bclab.models import BoundaryPatch, BoundarySignal, CoefficientField, GridSpec
from bclab.solver import neumann_trace, solve_forward


def _half_line(h: float = 1 / 64) -> tuple[GridSpec, BoundaryPatch]:
    grid = GridSpec(extents=(1.0,), spacing=(h,), time_step=h / 2, horizon=1.0)
    return grid, BoundaryPatch(start=0, stop=1, window=1.0, horizon=1.0)


def _strip() -> tuple[GridSpec, BoundaryPatch]:
    grid = GridSpec(
        extents=(1.0, 0.5), spacing=(0.0625, 0.0625), time_step=0.03125, horizon=0.5
    )
    return grid, BoundaryPatch(start=4, stop=13, window=0.5, horizon=0.5)


def test_parallel_map_keeps_order() -> None:
    assert parallel_map(lambda x: x * x, range(6), threads=3) == [0, 1, 4, 9, 16, 25]


def test_bump_basis_is_compatible() -> None:
    grid, patch = _strip()
    basis = bump_basis(grid, patch, centers=3, shifts=4)
    assert len(basis) == 12
    assert all(f.is_compatible() for f in basis)
    assert all(f.samples.shape == (patch.size, grid.steps + 1) for f in basis)
    with pytest.raises(ValidationError):
        bump_basis(grid, patch, t_window=(0.3, 0.9))


def test_impulse_basis_counts() -> None:
    grid, patch = _half_line()
    assert len(impulse_basis(grid, patch)) == grid.steps - 1
    assert len(impulse_basis(grid, patch, include_last=True)) == grid.steps


def test_free_half_line_traces() -> None:
    grid, patch = _half_line()
    basis = bump_basis(grid, patch, shifts=4)
    dataset = assemble_dtn(flat(grid), basis, threads=2)
    assert len(dataset) == 4
    assert dataset.provenance["adjoint"] == "false"
    for index, f in enumerate(basis):
        expected = f.time_derivative()
        error = np.abs(dataset.traces[index] - expected).max()
        assert error <= 2e-2 * np.abs(expected).max()


def test_response_is_linear() -> None:
    grid, patch = _strip()
    coeffs = warped(grid)
    basis = bump_basis(grid, patch, centers=2, shifts=3)
    dataset = assemble_dtn(coeffs, basis)
    combo = 2.0 * basis[0] - 1j * basis[4]
    direct = neumann_trace(solve_forward(coeffs, combo), coeffs, patch)
    assert np.allclose(dataset.response(combo).samples, direct.samples, atol=1e-10)
    stray = BoundarySignal(patch, combo.times, np.ones_like(combo.samples))
    with pytest.raises(ValidationError, match="outside the basis span"):
        dataset.response(stray)


def test_dataset_files(tmp_path: Path) -> None:
    grid, patch = _half_line(1 / 32)
    dataset = assemble_dtn(flat(grid), bump_basis(grid, patch, shifts=3), seed=7)
    hashes = save_dataset(tmp_path / "data", dataset)
    assert set(hashes) == {"basis.bin", "traces.bin"}
    loaded = load_dataset(tmp_path / "data")
    assert loaded.grid == grid
    assert loaded.patch == patch
    assert np.array_equal(loaded.traces, dataset.traces)
    assert loaded.provenance["seed"] == "7"

    traces = tmp_path / "data" / "traces.bin"
    traces.write_bytes(traces.read_bytes()[:-8] + b"\x00" * 8)
    with pytest.raises(ValidationError, match="manifest hash"):
        load_dataset(tmp_path / "data")
    with pytest.raises(MissingArtifactError):
        load_dataset(tmp_path / "absent")


def test_lambda_prime_scaling() -> None:
    grid, patch = _half_line(1 / 32)
    dataset = assemble_dtn(flat(grid), bump_basis(grid, patch, shifts=3))
    same = lambda_prime(dataset, 1.0, 0.0)
    assert np.allclose(same.traces, dataset.traces)
    scaled = lambda_prime(dataset, 16.0, 8.0)
    assert np.allclose(scaled.basis, 2.0 * dataset.basis)
    assert np.allclose(scaled.traces, 2.0 * dataset.traces - 0.125 * scaled.basis)
    assert scaled.provenance["transform"] == "lambda-prime"
    with pytest.raises(ValidationError):
        lambda_prime(dataset, -1.0, 0.0)


def test_time_reversed_adjoint_layout() -> None:
    grid, patch = _half_line(1 / 32)
    dataset = assemble_dtn(flat(grid), impulse_basis(grid, patch))
    adjoint = time_reversed_adjoint(dataset)
    assert np.array_equal(adjoint.basis, dataset.basis[..., ::-1])
    assert int(adjoint.provenance["adjoint_rank"]) == len(dataset)
    assert adjoint.provenance["adjoint"] == "time-reversed"


def test_time_reversed_adjoint_is_an_involution() -> None:
    grid, patch = _half_line(1 / 32)
    coeffs = warped(grid)
    dataset = assemble_dtn(coeffs, impulse_basis(grid, patch, include_last=True))
    adjoint = time_reversed_adjoint(dataset)
    weights = dataset.weights()
    # <Lambda f_i, f_j> = <f_i, Lambda_* f_j> on the stored pairs
    forward = np.einsum("ipt,jpt->ij", np.conj(dataset.traces) * weights, dataset.basis)
    backward = np.einsum(
        "ipt,jpt->ij", np.conj(dataset.basis) * weights, adjoint.traces[..., ::-1]
    )
    scale = np.abs(forward).max()
    assert np.allclose(forward, backward, atol=1e-8 * scale)
    twice = time_reversed_adjoint(adjoint)
    assert np.array_equal(twice.basis, dataset.basis)
    tol = 1e-8 * np.abs(dataset.traces).max()
    assert np.allclose(twice.traces, dataset.traces, atol=tol)


def test_noise_is_seeded() -> None:
    grid, patch = _half_line(1 / 32)
    dataset = assemble_dtn(flat(grid), impulse_basis(grid, patch))
    assert add_noise(dataset, 0.0, 1) is dataset
    first = add_noise(dataset, 0.1, 3)
    again = add_noise(dataset, 0.1, 3)
    assert np.array_equal(first.traces, again.traces)
    rms = np.sqrt(np.mean(np.abs(dataset.traces) ** 2))
    added = np.sqrt(np.mean(np.abs(first.traces - dataset.traces) ** 2))
    assert added == pytest.approx(0.1 * rms, rel=0.2)
    assert first.provenance["noise_seed"] == "3"


def test_propagation_across_known_strip() -> None:
    grid, patch = _half_line(1 / 128)
    known = flat(grid)
    dataset = assemble_dtn(known, impulse_basis(grid, patch), threads=4)
    times = dataset.times
    inner = [
        BoundarySignal(patch, times, time_bump(times, c, 0.15)[None, :])
        for c in (0.4, 0.5, 0.6)
    ]
    moved = propagate_dtn(dataset, known, 16, inner_basis=inner, threads=4)
    assert moved.patch.t_min == pytest.approx(0.125, abs=1e-3)
    assert moved.grid.extents == pytest.approx((0.875,))
    for index, g in enumerate(inner):
        expected = g.time_derivative()[0]
        error = np.abs(moved.traces[index, 0] - expected).max()
        assert error <= 3e-2 * np.abs(expected).max()
    assert propagate_dtn(dataset, known, 0) is dataset


def _below(coeffs: CoefficientField, layer: int) -> CoefficientField:
    grid = coeffs.grid
    depth = grid.extents[-1] - layer * grid.normal_spacing
    inner = replace(grid, extents=grid.extents[:-1] + (depth,))
    density = None if coeffs.density is None else coeffs.density[layer:]
    return CoefficientField.build(
        inner,
        coeffs.metric_inv[layer:],
        coeffs.potential_a[layer:],
        coeffs.potential_v[layer:],
        density,
    )


def test_propagation_across_layered_strip_matches_inner_data() -> None:
    grid, patch = _half_line(1 / 128)
    known = layered(grid)
    dataset = assemble_dtn(known, impulse_basis(grid, patch), threads=4)
    times = dataset.times
    inner = [
        BoundarySignal(patch, times, time_bump(times, c, 0.15)[None, :])
        for c in (0.4, 0.5, 0.6)
    ]
    moved = propagate_dtn(dataset, known, 16, inner_basis=inner, threads=4)
    delta = float(moved.provenance["delta"])
    assert delta == pytest.approx(0.125, rel=2e-2)
    assert moved.patch.t_min == pytest.approx(delta)
    assert patch.window - moved.patch.window == pytest.approx(delta)

    below = _below(known, 16)
    active = (times > delta) & (times < patch.window - delta)
    for index, g in enumerate(inner):
        direct = neumann_trace(solve_forward(below, g), below, patch).samples[0]
        error = np.linalg.norm(moved.traces[index, 0, active] - direct[active])
        assert error <= 3e-2 * np.linalg.norm(direct[active])


def test_empty_dataset_needs_patch() -> None:
    grid, _ = _half_line(1 / 32)
    with pytest.raises(ValidationError):
        assemble_dtn(flat(grid), [])
    patch = BoundaryPatch(0, 1, 1.0, 1.0)
    empty = DtNDataset.from_signals(grid, patch, grid.times(), [], [])
    assert len(empty) == 0
