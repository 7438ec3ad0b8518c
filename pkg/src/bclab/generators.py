"""Analytic coefficient families, gauges and maps for manufactured cases."""

from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np

from .errors import ValidationError
from .models import BoundaryPatch, CoefficientField, DiffeoMap, GaugeFunction, GridSpec


def smooth_bump(r: np.ndarray) -> np.ndarray:
    """C-infinity bump exp(1 - 1/(1 - r^2)) on |r| < 1, peak 1 at r = 0."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


def time_bump(times: np.ndarray, center: float, halfwidth: float) -> np.ndarray:
    return smooth_bump((np.asarray(times) - center) / halfwidth)


def _center(grid: GridSpec, center: Sequence[float] | None) -> np.ndarray:
    if center is None:
        return np.array([0.5 * e for e in grid.extents])
    if len(center) != grid.dim:
        raise ValidationError(f"bump center {center} does not match grid dimension")
    return np.asarray(center, dtype=float)


def bump_field(
    grid: GridSpec,
    center: Sequence[float] | None = None,
    radius: float | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Radial bump on the grid and its analytic gradient."""
    c = _center(grid, center)
    radius = radius or 0.35 * min(grid.extents)
    mesh = grid.mesh()
    r2 = sum((x - cj) ** 2 for x, cj in zip(mesh, c)) / radius**2
    values = smooth_bump(np.sqrt(r2))
    factor = np.zeros_like(r2)
    inside = r2 < 1.0
    factor[inside] = -2.0 / (1.0 - r2[inside]) ** 2 / radius**2
    grads = [values * factor * (x - cj) for x, cj in zip(mesh, c)]
    return values, grads


def flat(grid: GridSpec, potential: float = 0.0) -> CoefficientField:
    base = CoefficientField.euclidean(grid)
    return base.with_potentials(potential_v=np.full(grid.shape, float(potential)))


def normal_bump(
    grid: GridSpec,
    metric_amplitude: float = 0.2,
    potential_amplitude: float = 0.3,
    scalar_amplitude: float = 1.0,
    center: Sequence[float] | None = None,
    radius: float | None = None,
) -> CoefficientField:
    """Coefficients already in normal form: g^{nn} = 1, A_n = 0, unit density."""
    bump, _ = bump_field(grid, center, radius)
    n = grid.dim
    metric = np.zeros(grid.shape + (n, n))
    metric[..., -1, -1] = 1.0
    potential_a = np.zeros(grid.shape + (n,))
    if n == 2:
        metric[..., 0, 0] = 1.0 + metric_amplitude * bump
        potential_a[..., 0] = potential_amplitude * bump
    return CoefficientField.build(
        grid,
        metric,
        potential_a,
        scalar_amplitude * bump,
        density=np.ones(grid.shape),
    )


def layer_profile(x_n: np.ndarray, amplitude: float, extent: float) -> np.ndarray:
    """a(x_n) = 1 + amplitude * sin^2(pi x_n / extent)."""
    return 1.0 + amplitude * np.sin(np.pi * np.asarray(x_n) / extent) ** 2


def layered(grid: GridSpec, amplitude: float = 0.3) -> CoefficientField:
    """Diagonal metric with depth-dependent g^{nn} = a(x_n)."""
    n = grid.dim
    x_n = grid.mesh()[-1]
    metric = np.zeros(grid.shape + (n, n))
    for j in range(n - 1):
        metric[..., j, j] = 1.0
    metric[..., -1, -1] = layer_profile(x_n, amplitude, grid.extents[-1])
    return CoefficientField.build(grid, metric)


def warped(
    grid: GridSpec,
    amplitude: float = 0.15,
    potential_amplitude: float = 0.3,
    scalar_amplitude: float = 1.0,
    center: Sequence[float] | None = None,
    radius: float | None = None,
) -> CoefficientField:
    """Full metric with cross terms plus bump potentials."""
    bump, _ = bump_field(grid, center, radius)
    n = grid.dim
    shape = np.array([[0.8, 0.3], [0.3, 0.5]])[:n, :n] if n == 2 else np.array([[0.6]])
    metric = np.eye(n) + amplitude * bump[..., None, None] * shape
    potential_a = np.zeros(grid.shape + (n,))
    potential_a[..., 0] = potential_amplitude * bump
    if n == 2:
        potential_a[..., 1] = -0.5 * potential_amplitude * bump
    return CoefficientField.build(grid, metric, potential_a, scalar_amplitude * bump)


def gauge_profile(
    grid: GridSpec,
    amplitude: float = 0.5,
    center: Sequence[float] | None = None,
    radius: float | None = None,
) -> GaugeFunction:
    """psi = amplitude * x_n * bump(x); vanishes on the whole face x_n = 0."""
    bump, _ = bump_field(grid, center, radius)
    return GaugeFunction(grid, amplitude * grid.mesh()[-1] * bump)


def boundary_phase(
    grid: GridSpec,
    amplitude: float = 0.5,
    center: Sequence[float] | None = None,
    radius: float | None = None,
) -> GaugeFunction:
    """A phase that does not vanish on the face; only valid as a negative control."""
    c = _center(grid, center)
    c[-1] = 0.0
    bump, _ = bump_field(grid, c, radius)
    return GaugeFunction(grid, amplitude * bump)


def shear_map(
    grid: GridSpec,
    amplitude: float = 0.2,
    center: Sequence[float] | None = None,
    radius: float | None = None,
    patch: BoundaryPatch | None = None,
) -> DiffeoMap:
    """Boundary-fixing map y = x + amplitude * x_n * bump(x) * e_1 (n = 1: x_n^2)."""
    bump, grads = bump_field(grid, center, radius)
    mesh = grid.mesh()
    x_n = mesh[-1]
    n = grid.dim
    forward = np.stack(mesh, axis=-1).astype(float)
    jacobian = np.broadcast_to(np.eye(n), grid.shape + (n, n)).copy()
    if n == 1:
        forward[..., 0] += amplitude * x_n**2 * bump
        jacobian[..., 0, 0] += amplitude * (2 * x_n * bump + x_n**2 * grads[0])
    else:
        forward[..., 0] += amplitude * x_n * bump
        jacobian[..., 0, 0] += amplitude * x_n * grads[0]
        jacobian[..., 0, 1] += amplitude * (bump + x_n * grads[1])
    return DiffeoMap(grid, forward, jacobian, patch)


FAMILIES: dict[str, Callable[..., CoefficientField]] = {
    "flat": flat,
    "normal-bump": normal_bump,
    "layered": layered,
    "warped": warped,
}


def build_family(name: str, grid: GridSpec, params: dict[str, Any]) -> CoefficientField:
    try:
        factory = FAMILIES[name]
    except KeyError as err:
        known = ", ".join(sorted(FAMILIES))
        raise ValidationError(
            f"unknown coefficient family '{name}' (known: {known})"
        ) from err
    try:
        return factory(grid, **params)
    except TypeError as err:
        raise ValidationError(f"bad parameters for family '{name}': {err}") from err
