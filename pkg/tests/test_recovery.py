from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from bclab.container import read_container
from bclab.errors import AssemblyError, DimensionError, RankDeficiencyError
from bclab.generators import normal_bump, smooth_bump, time_bump
from bclab.models import BoundaryPatch, BoundarySignal, GridSpec
from bclab.optics import AdjointFieldExtractor, SliceBundle, SliceRegion, slice_field
from bclab.recovery import (
    StencilSet,
    assemble_system,
    reconstruct,
    region_grid,
    region_values,
    relative_errors,
    save_reconstruction,
    second_difference,
    select_sources,
    solve_point,
    unpack_potentials,
)
from bclab.semigeodesic import conformal_potential, normal_form

H = 0.1


def _mesh(nodes: int = 6, layers: int = 5) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(nodes) * H, np.arange(layers) * H, indexing="ij")


def _quadratics(count: int, seed: int = 1) -> list[np.ndarray]:
    x, y = _mesh()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        c = rng.normal(size=6) + 1j * rng.normal(size=6)
        out.append(c[0] + c[1] * x + c[2] * y + c[3] * x**2 + c[4] * x * y + c[5] * y**2)
    return out


def _manufactured(count: int = 8) -> tuple[SliceBundle, dict[str, np.ndarray]]:
    """Slices whose stencils are exact, with v_tt chosen to satisfy the point equation."""
    x, y = _mesh()
    truth = {
        "metric": 1.0 + 0.2 * x * y,
        "b": 0.3 * x + 0.1j,
        "c": 0.5 + y**2 + 0.2j * x,
    }
    values = np.stack(_quadratics(count))
    v_x = np.gradient(values, H, axis=1, edge_order=2)
    v_xx = second_difference(values, H, axis=1)
    v_nn = second_difference(values, H, axis=2)
    second = truth["metric"] * v_xx + truth["b"] * v_x - truth["c"] * values + v_nn
    bundle = SliceBundle(
        spacing=(H, H),
        region=SliceRegion(0, x.shape[0], layers=x.shape[1]),
        time=0.25,
        step=0.01,
        values=values,
        first=np.zeros_like(values),
        second=second,
        extractor="adjoint-field",
    )
    return bundle, truth


def test_second_difference_is_exact_on_cubics() -> None:
    y = np.arange(6) * H
    values = 1.0 - y + 3.0 * y**2 - 2.0 * y**3
    assert np.allclose(second_difference(values, H, axis=0), 6.0 - 12.0 * y)
    with pytest.raises(DimensionError):
        second_difference(values[:3], H, axis=0)


def test_manufactured_point_systems_are_exact() -> None:
    bundle, truth = _manufactured()
    stencils = StencilSet.from_bundle(bundle)
    for node in [(0, 0), (2, 3), (5, 4)]:
        solution = solve_point(assemble_system(stencils, node))
        expected = [truth["metric"][node], truth["b"][node], truth["c"][node]]
        assert np.allclose(solution.unknowns, expected, atol=1e-10)
        assert solution.residual < 1e-10


def test_reconstruct_manufactured_slices(tmp_path: Path) -> None:
    bundle, truth = _manufactured()
    result = reconstruct(bundle, adjoint=False, threads=2)
    solved = np.isfinite(result.residual)
    assert solved.sum() == 12
    assert not solved[[0, -1], :].any() and not solved[:, [0, -1]].any()
    assert np.allclose(result.fields["metric"][solved], truth["metric"][solved])
    assert len(result.flags) == 18
    assert all(flag.startswith("one-sided") for flag in result.flags)
    assert np.nanmax(result.residual) < 1e-10

    hashes = save_reconstruction(tmp_path / "out", result)
    container = read_container(tmp_path / "out" / "reconstruction.clrc")
    assert container.attrs["extractor"] == "adjoint-field"
    assert np.allclose(container["metric"], result.fields["metric"])
    summary = (tmp_path / "out" / "summary.txt").read_text()
    assert f"sha256.reconstruction = {hashes['reconstruction.clrc']}" in summary
    assert "solved = 12" in summary


def test_half_line_recovers_potential() -> None:
    y = np.arange(8) * H
    potential = 1.0 + np.sin(y)
    values = np.stack([(1.0 + 0.5 * k * y - y**2)[None, :] for k in range(3)])
    v_nn = second_difference(values, H, axis=2)
    bundle = SliceBundle(
        spacing=(H,),
        region=SliceRegion(0, 1, layers=8),
        time=0.25,
        step=0.01,
        values=values.astype(complex),
        first=np.zeros(values.shape, dtype=complex),
        second=(v_nn - potential * values).astype(complex),
        extractor="probe",
    )
    direct = reconstruct(bundle, adjoint=False)
    recovered = direct.fields["potential_v1"][0]
    assert np.isnan(recovered[[0, -1]]).all()
    assert np.allclose(recovered[1:-1], potential[1:-1], atol=1e-10)
    lossy = replace(bundle, second=(v_nn - (potential + 0.5j) * values).astype(complex))
    mirrored = reconstruct(lossy, adjoint=True)
    assert np.allclose(mirrored.fields["potential_v1"][0, 1:-1], potential[1:-1] - 0.5j)


def test_short_and_degenerate_systems() -> None:
    bundle, _ = _manufactured(count=3)
    with pytest.raises(AssemblyError) as info:
        assemble_system(StencilSet.from_bundle(bundle), (2, 2))
    assert info.value.deficit == 3
    short = reconstruct(bundle, adjoint=False)
    assert len(short.flags) == 30
    assert sum(flag.startswith("short") for flag in short.flags) == 12

    bundle, _ = _manufactured(count=8)
    copies = bundle.subset([0] * 8)
    system = assemble_system(StencilSet.from_bundle(copies), (2, 2))
    with pytest.raises(RankDeficiencyError) as info:
        solve_point(system)
    assert info.value.null_direction.shape == (3,)
    result = reconstruct(copies, adjoint=False)
    assert len(result.flags) == 30
    assert np.all(np.isnan(result.residual))


def test_unpack_constant_potentials() -> None:
    shape = (6, 5)
    a0, c = 0.4, np.full(shape, 2.0 + 1j)
    fields = unpack_potentials(
        np.ones(shape), np.full(shape, 2j * a0), c, (H, H), adjoint=False
    )
    assert np.allclose(fields["potential_a"], a0)
    assert np.allclose(fields["potential_v1"], c - a0**2)
    conjugated = unpack_potentials(
        np.ones(shape), np.full(shape, 2j * a0), c, (H, H), adjoint=True
    )
    assert np.allclose(conjugated["potential_v1"], np.conj(c - a0**2))


def test_relative_errors_skip_unsolved_nodes() -> None:
    linf, l2 = relative_errors(np.array([1.0, 2.0, np.nan]), np.array([1.0, 2.5, 3.0]))
    assert linf == pytest.approx(0.2)
    assert l2 == pytest.approx(0.5 / np.hypot(1.0, 2.5))
    nothing = relative_errors(np.full(2, np.nan), np.ones(2))
    assert all(np.isnan(nothing))


def test_select_sources_is_seeded() -> None:
    bundle, _ = _manufactured(count=10)
    chosen = select_sources(bundle, 6, seed=4)
    assert len(set(chosen)) == 6
    assert chosen == select_sources(bundle, 6, seed=4)
    assert sorted(select_sources(bundle, 20)) == list(range(10))


def _weighted_rows(
    metric: np.ndarray, a: np.ndarray, v1: np.ndarray, spacing: tuple[float, float]
) -> tuple[np.ndarray, np.ndarray]:
    h_t = spacing[0]
    b = np.gradient(metric, h_t, axis=0, edge_order=2) + 2j * metric * a
    c = v1 + metric * a * a - 1j * np.gradient(metric * a, h_t, axis=0, edge_order=2)
    return b, c


def test_unpack_riemannian_weight_follows_the_metric() -> None:
    x, y = _mesh()
    metric = 1.0 + 0.3 * np.sin(x + 2 * y)
    a = 0.2 + 0.1 * x * y
    v_hat = 0.5 + y**2
    grid = region_grid((H, H), metric.shape, 1.0)
    v1 = v_hat + conformal_potential(metric[..., None, None], 1.0 / metric, grid)
    b, c = _weighted_rows(metric, a, v1, (H, H))
    fields = unpack_potentials(metric, b, c, (H, H), adjoint=False)
    assert np.allclose(fields["potential_a"], a)
    assert np.allclose(fields["potential_v1"], v1)
    assert np.allclose(fields["potential_v_hat"], v_hat)
    assert not np.allclose(v1, v_hat, atol=1e-3)


def test_unpack_unit_density_keeps_v1() -> None:
    grid = GridSpec(
        extents=(1.0, 0.5), spacing=(1 / 16, 1 / 16), time_step=1 / 32, horizon=0.5
    )
    nf = normal_form(normal_bump(grid, center=(0.5, 0.1), radius=0.3))
    assert np.allclose(nf.g_hat, 1.0)
    metric = nf.tangential_metric[..., 0, 0]
    b, c = _weighted_rows(metric, nf.potential_a[..., 0], nf.potential_v1, grid.spacing)
    weighted = unpack_potentials(
        metric, b, c, grid.spacing, step=grid.time_step, adjoint=False, g_hat=nf.g_hat
    )
    assert np.allclose(weighted["potential_v_hat"], nf.potential_v_hat)
    riemannian = unpack_potentials(
        metric, b, c, grid.spacing, step=grid.time_step, adjoint=False
    )
    error = np.abs(riemannian["potential_v_hat"] - nf.potential_v_hat).max()
    assert error > 1e-2


def _bump_sources(grid: GridSpec, patch: BoundaryPatch) -> list[BoundarySignal]:
    times = grid.times(patch.window)
    coords = patch.coordinates(grid)
    sources = []
    for center in np.linspace(0.2, 0.8, 7):
        profile = smooth_bump((coords - center) / 0.25)
        for start in (0.1, 0.14):
            samples = profile[:, None] * time_bump(times, start, 0.1)[None, :]
            sources.append(BoundarySignal(patch, times, samples))
    return sources


def _collar_errors(h: float) -> dict[str, tuple[float, float]]:
    grid = GridSpec(extents=(1.0, 0.5), spacing=(h, h), time_step=h / 2, horizon=0.5)
    patch = BoundaryPatch(0, grid.face_size, 0.5, 0.5)
    nf = normal_form(normal_bump(grid, center=(0.5, 0.1), radius=0.3))
    region = SliceRegion(round(0.3 / h), round(0.7 / h) + 1, round(0.1875 / h) + 1)
    bundle = slice_field(
        AdjointFieldExtractor(nf.to_field()),
        _bump_sources(grid, patch),
        region,
        spacing=grid.spacing,
        window=0.5,
        time_step=grid.time_step,
    )
    result = reconstruct(bundle, truth=nf, g_hat=region_values(nf.g_hat, bundle))
    interior = np.isfinite(result.residual)
    assert interior[1:-1, 1:-1].all()
    return result.errors


def test_collar_recovery_converges_under_refinement() -> None:
    coarse, fine = _collar_errors(1 / 32), _collar_errors(1 / 64)
    for name in ("metric", "potential_a", "potential_v1", "potential_v_hat"):
        assert fine[name][0] <= 0.1
        assert coarse[name][0] / fine[name][0] >= 1.7
