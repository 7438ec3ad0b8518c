"""Boundary normal coordinates and the reduction to the normal-form operator."""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import LinearNDInterpolator, RegularGridInterpolator
from scipy.spatial import Delaunay, QhullError, cKDTree

from .container import write_container
from .errors import CausticError, DegeneracyError, ValidationError
from .models import BoundaryPatch, CoefficientField, DiffeoMap, GridSpec
from .transforms import apply_diffeomorphism, gradient

LOGGER = logging.getLogger(__name__)

CHART_TOLERANCE = 1e-2
CAUSTIC_RATIO = 0.05


@dataclass(frozen=True, slots=True)
class RayBundle:
    """Unit-speed normal geodesics: positions[s, r] at arclength[s] from label[r]."""

    positions: np.ndarray
    arclength: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True, slots=True)
class EikonalSolution:
    phi_n: np.ndarray
    residual: float
    depth: float
    rays: RayBundle


@dataclass(frozen=True, slots=True)
class TransversalSolution:
    phi_p: np.ndarray
    residual: float


@dataclass(frozen=True, slots=True)
class SemiGeodesicChart:
    depth: float
    phi: np.ndarray
    jacobian: np.ndarray
    coeffs_hat: CoefficientField
    eikonal_residual: float
    orthogonality_residual: float
    block_residual: float


@dataclass(frozen=True, slots=True)
class NormalFormCoefficients:
    """Data of L1: tangential metric, A with A_n = 0, V1, plus boundary g-hat data."""

    grid: GridSpec
    tangential_metric: np.ndarray
    potential_a: np.ndarray
    potential_v1: np.ndarray
    potential_v_hat: np.ndarray
    g_hat: np.ndarray
    g_boundary: np.ndarray
    g_normal: np.ndarray
    gauge: np.ndarray
    conformal: np.ndarray
    gauge_residual: float

    def to_field(self) -> CoefficientField:
        n = self.grid.dim
        metric = np.zeros(self.grid.shape + (n, n))
        metric[..., :-1, :-1] = self.tangential_metric
        metric[..., -1, -1] = 1.0
        return CoefficientField.build(
            self.grid,
            metric,
            self.potential_a,
            self.potential_v1,
            density=np.ones(self.grid.shape),
        )

    def boundary_data(self, patch: BoundaryPatch) -> tuple[np.ndarray, np.ndarray]:
        window = slice(patch.start, patch.stop)
        return self.g_boundary[window], self.g_normal[window]


def _ray_interpolator(coeffs: CoefficientField) -> RegularGridInterpolator:
    grid = coeffs.grid
    n = grid.dim
    metric = coeffs.metric_inv
    parts = [metric.reshape(grid.shape + (n * n,))]
    for axis in range(n):
        d = np.gradient(metric, grid.spacing[axis], axis=axis, edge_order=2)
        parts.append(d.reshape(grid.shape + (n * n,)))
    table = np.concatenate(parts, axis=-1)
    return RegularGridInterpolator(
        tuple(grid.axes()), table, method="linear", bounds_error=False, fill_value=None
    )


def trace_normal_rays(
    coeffs: CoefficientField,
    length: float,
    step: float | None = None,
) -> tuple[RayBundle, float]:
    """RK4 on x' = g xi, xi' = -1/2 dg(xi, xi) from every face node.

    Returns the bundle and the arclength reached before a caustic (inf if none).
    """
    grid = coeffs.grid
    n = grid.dim
    step = step or min(grid.spacing) / 4
    count = math.ceil(length / step - 1e-9)
    interp = _ray_interpolator(coeffs)
    labels = grid.face_coordinates()
    x = np.zeros((labels.size, n))
    if n == 2:
        x[:, 0] = labels
    g0 = interp(x)[:, : n * n].reshape(-1, n, n)
    xi = np.zeros_like(x)
    xi[:, -1] = 1.0 / np.sqrt(g0[:, -1, -1])

    def rhs(pos: np.ndarray, cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        table = interp(pos)
        g = table[:, : n * n].reshape(-1, n, n)
        dg = table[:, n * n :].reshape(-1, n, n, n)
        return (
            np.einsum("rjk,rk->rj", g, cov),
            -0.5 * np.einsum("rajk,rj,rk->ra", dg, cov, cov),
        )

    positions = [x.copy()]
    reference = None
    caustic_at = math.inf
    for s in range(count):
        k1x, k1p = rhs(x, xi)
        k2x, k2p = rhs(x + 0.5 * step * k1x, xi + 0.5 * step * k1p)
        k3x, k3p = rhs(x + 0.5 * step * k2x, xi + 0.5 * step * k2p)
        k4x, k4p = rhs(x + step * k3x, xi + step * k3p)
        if n == 2:
            det = _bundle_determinant(labels, x, k1x)
            if reference is None:
                reference = det
            if np.any(det <= CAUSTIC_RATIO * reference):
                caustic_at = s * step
                break
        x = x + step / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        xi = xi + step / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        positions.append(x.copy())
    stacked = np.stack(positions)
    arclength = np.arange(stacked.shape[0]) * step
    return RayBundle(stacked, arclength, labels), caustic_at


def _bundle_determinant(
    labels: np.ndarray, x: np.ndarray, velocity: np.ndarray
) -> np.ndarray:
    spread = np.gradient(x, labels, axis=0, edge_order=2)
    return spread[:, 0] * velocity[:, 1] - spread[:, 1] * velocity[:, 0]


def _resample_bundle(
    grid: GridSpec,
    rays: RayBundle,
    values: np.ndarray,
    limit: float,
) -> np.ndarray:
    """Scatter ray samples onto grid nodes with x_n <= ``limit`` (NaN elsewhere)."""
    nodes = np.stack(grid.mesh(), axis=-1)
    flat_nodes = nodes.reshape(-1, grid.dim)
    out = np.full(flat_nodes.shape[0], np.nan)
    if grid.dim == 1:
        track = rays.positions[:, 0, 0]
        inside = flat_nodes[:, 0] <= min(limit, track[-1])
        out[inside] = np.interp(flat_nodes[inside, 0], track, values.reshape(-1))
        return out.reshape(grid.shape)
    points = rays.positions.reshape(-1, grid.dim)
    column = values.reshape(-1)
    inside = flat_nodes[:, -1] <= limit
    try:
        triangulation = Delaunay(points)
    except QhullError as err:
        raise DegeneracyError("ray bundle cannot be triangulated") from err
    out[inside] = LinearNDInterpolator(triangulation, column)(flat_nodes[inside])
    distance, nearest = cKDTree(points).query(flat_nodes)
    hull_edge = np.isnan(out) & inside & (distance <= 0.25 * min(grid.spacing))
    out[hull_edge] = column[nearest[hull_edge]]
    covered = inside & ~np.isnan(out)
    fill = float(distance[covered].max(initial=0.0))
    if fill > 2.0 * max(grid.spacing):
        raise DegeneracyError(f"ray bundle fill distance {fill:.3e} exceeds two cells")
    return out.reshape(grid.shape)


def _quadratic_form(coeffs: CoefficientField, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    grad_a = np.stack(gradient(a, coeffs.grid), axis=-1)
    grad_b = np.stack(gradient(b, coeffs.grid), axis=-1)
    return np.einsum("...jk,...j,...k->...", coeffs.metric_inv, grad_a, grad_b)


def solve_eikonal(
    coeffs: CoefficientField,
    patch: BoundaryPatch,
    depth: float,
) -> EikonalSolution:
    """phi_n = distance to the face along unit normal geodesics."""
    grid = coeffs.grid
    patch.validate(grid)
    margin = 4.0 * max(grid.spacing)
    rays, caustic_at = trace_normal_rays(coeffs, depth + margin)
    if caustic_at < depth:
        raise CausticError(
            f"normal geodesics focus at depth {caustic_at:.4f} < requested {depth:.4f}",
            achieved_depth=caustic_at,
        )
    limit = min(float(rays.arclength[-1]), depth + margin)
    arclength = np.broadcast_to(rays.arclength[:, None], rays.positions.shape[:2])
    phi_n = _resample_bundle(grid, rays, arclength, limit)
    phi_n[..., 0] = 0.0
    with np.errstate(invalid="ignore"):
        residual_field = np.abs(_quadratic_form(coeffs, phi_n, phi_n) - 1.0)
    residual = float(np.nanmax(residual_field, initial=0.0))
    LOGGER.info("Eikonal chart to depth %.4f, residual %.3e", depth, residual)
    return EikonalSolution(phi_n, residual, depth, rays)


def solve_transversal(
    coeffs: CoefficientField,
    eikonal: EikonalSolution,
) -> TransversalSolution:
    """phi_p constant along each normal geodesic, equal to x_p on the face."""
    grid = coeffs.grid
    if grid.dim == 1:
        return TransversalSolution(np.zeros(grid.shape + (0,)), 0.0)
    rays = eikonal.rays
    labels = np.broadcast_to(rays.labels[None, :], rays.positions.shape[:2])
    phi_p = _resample_bundle(grid, rays, labels, float(rays.positions[..., -1].max()))
    phi_p[np.isnan(eikonal.phi_n)] = np.nan
    phi_p[:, 0] = grid.face_coordinates()
    with np.errstate(invalid="ignore"):
        residual = float(
            np.nanmax(np.abs(_quadratic_form(coeffs, eikonal.phi_n, phi_p)), initial=0.0)
        )
    return TransversalSolution(phi_p[..., None], residual)


def transform_to_chart(
    coeffs: CoefficientField,
    mapping: DiffeoMap,
    target: GridSpec | None = None,
) -> CoefficientField:
    """Hat coefficients on a regular (y', y_n) grid: J g J^T, J^{-T} A, V o phi^{-1}."""
    return apply_diffeomorphism(coeffs, mapping, target)


def build_chart(
    coeffs: CoefficientField,
    patch: BoundaryPatch,
    depth: float | None = None,
) -> SemiGeodesicChart:
    grid = coeffs.grid
    depth = depth or 0.5 * patch.window + 2 * grid.normal_spacing
    eikonal = solve_eikonal(coeffs, patch, depth)
    transversal = solve_transversal(coeffs, eikonal)
    phi = np.concatenate([transversal.phi_p, eikonal.phi_n[..., None]], axis=-1)
    mapping = DiffeoMap.from_forward(grid, phi)
    coeffs_hat = transform_to_chart(coeffs, mapping, grid.collar(depth))
    block = _block_residual(coeffs_hat)
    if block > CHART_TOLERANCE:
        LOGGER.warning(
            "Chart block structure residual %.3e above %.1e", block, CHART_TOLERANCE
        )
    return SemiGeodesicChart(
        depth=depth,
        phi=phi,
        jacobian=mapping.jacobian,
        coeffs_hat=coeffs_hat,
        eikonal_residual=eikonal.residual,
        orthogonality_residual=transversal.residual,
        block_residual=block,
    )


def _block_residual(coeffs_hat: CoefficientField) -> float:
    metric = coeffs_hat.metric_inv
    residual = np.abs(metric[..., -1, -1] - 1.0).max()
    if coeffs_hat.grid.dim > 1:
        residual = max(residual, np.abs(metric[..., -1, :-1]).max())
    return float(residual)


def conformal_potential(
    tangential_metric: np.ndarray,
    g_hat: np.ndarray,
    grid: GridSpec,
) -> np.ndarray:
    """V1 - V-hat produced by removing the g-hat^{1/4} weight."""
    grads = gradient(g_hat, grid)
    prime = [-0.25j * d / g_hat for d in grads]
    n = grid.dim
    result = prime[-1] ** 2 + 1j * gradient(prime[-1], grid)[-1]
    for j in range(n - 1):
        flux = sum(tangential_metric[..., j, k] * prime[k] for k in range(n - 1))
        result = result + 1j * gradient(flux, grid)[j]
        for k in range(n - 1):
            result = result + tangential_metric[..., j, k] * prime[j] * prime[k]
    return result


def normal_form(
    coeffs_hat: CoefficientField,
    *,
    tau_chart: float = CHART_TOLERANCE,
) -> NormalFormCoefficients:
    """Conformal step, V1 and the gauge psi = -int_0^{y_n} A_n, giving A_n = 0."""
    grid = coeffs_hat.grid
    block = _block_residual(coeffs_hat)
    if block > tau_chart:
        raise ValidationError(
            f"coefficients are not in boundary normal form ({block:.3e})"
        )
    g_hat = coeffs_hat.weight**2
    if not np.all(np.isfinite(g_hat)) or np.any(g_hat <= 0):
        raise ValidationError("g-hat must be positive everywhere in the collar")
    tangential = coeffs_hat.metric_inv[..., :-1, :-1]
    h_n = grid.normal_spacing

    v1 = coeffs_hat.potential_v + conformal_potential(tangential, g_hat, grid)
    if not np.iscomplexobj(coeffs_hat.potential_v):
        scale = max(1.0, float(np.abs(v1).max()))
        if float(np.abs(v1.imag).max()) <= 1e-10 * scale:
            v1 = v1.real

    a_hat = coeffs_hat.potential_a
    gauge = -cumulative_trapezoid(a_hat[..., -1], dx=h_n, axis=-1, initial=0)
    prime_n = -0.25j * gradient(g_hat, grid)[-1] / g_hat
    conformal_phase = -cumulative_trapezoid(prime_n, dx=h_n, axis=-1, initial=0)
    shift = np.stack(gradient(gauge, grid), axis=-1)
    a1 = a_hat + shift
    gauge_residual = float(np.abs(a1[..., -1]).max())
    a1[..., -1] = 0.0

    if grid.dim == 1:
        g_boundary = g_hat[:1]
        g_normal = gradient(g_hat, grid)[-1][:1]
    else:
        g_boundary = g_hat[:, 0]
        g_normal = gradient(g_hat, grid)[-1][:, 0]
    LOGGER.debug(
        "Normal form: gauge residual %.3e before enforcing A_n = 0", gauge_residual
    )
    return NormalFormCoefficients(
        grid=grid,
        tangential_metric=tangential,
        potential_a=a1,
        potential_v1=v1,
        potential_v_hat=coeffs_hat.potential_v,
        g_hat=g_hat,
        g_boundary=g_boundary,
        g_normal=g_normal,
        gauge=gauge,
        conformal=np.exp(-np.imag(conformal_phase)),
        gauge_residual=gauge_residual,
    )


def save_chart(path: Path, chart: SemiGeodesicChart) -> str:
    hat = chart.coeffs_hat
    return write_container(
        path,
        {
            "phi": np.nan_to_num(chart.phi, nan=-1.0),
            "jacobian": np.nan_to_num(chart.jacobian, nan=0.0),
            "metric_inv": hat.metric_inv,
            "potential_a": hat.potential_a,
            "potential_v": hat.potential_v,
        },
        dims=hat.grid.shape,
        spacing=hat.grid.spacing,
        attrs={
            "depth": chart.depth,
            "eikonal_residual": chart.eikonal_residual,
            "orthogonality_residual": chart.orthogonality_residual,
            "block_residual": chart.block_residual,
        },
    )
