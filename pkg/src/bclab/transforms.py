"""Gauge and diffeomorphism actions on coefficient fields, plus invariant checks."""

from __future__ import annotations

import logging

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
from scipy.spatial import Delaunay, QhullError

from .errors import DegeneracyError, DimensionError, ValidationError
from .models import (
    BoundaryPatch,
    CoefficientField,
    DiffeoMap,
    GaugeFunction,
    GridSpec,
    ValidationReport,
    Violation,
)

LOGGER = logging.getLogger(__name__)

PATCH_PHASE_TOL = 1e-12


def gradient(values: np.ndarray, grid: GridSpec) -> list[np.ndarray]:
    """Second-order central differences, one-sided second order at the faces."""
    result = np.gradient(values, *grid.spacing, edge_order=2)
    return [result] if grid.dim == 1 else list(result)


def apply_gauge(
    coeffs: CoefficientField,
    gauge: GaugeFunction,
    patch: BoundaryPatch | None = None,
    *,
    allow_patch_phase: bool = False,
) -> CoefficientField:
    """Replace A by A + grad(psi); metric and V are untouched."""
    if gauge.grid != coeffs.grid:
        raise DimensionError("gauge and coefficients are sampled on different grids")
    if patch is not None and not allow_patch_phase:
        phase = gauge.boundary_phase(patch)
        if phase > PATCH_PHASE_TOL:
            raise ValidationError(f"gauge phase {phase:.3e} does not vanish on the patch")
    shift = np.stack(gradient(gauge.psi, coeffs.grid), axis=-1)
    return coeffs.with_potentials(potential_a=coeffs.potential_a + shift)


class Resampler:
    """Piecewise-linear scattered interpolation with nearest fill outside the hull."""

    def __init__(self, points: np.ndarray, targets: np.ndarray) -> None:
        self.points = np.asarray(points, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        self._triangulation: Delaunay | None = None
        if self.points.shape[1] > 1:
            try:
                self._triangulation = Delaunay(self.points)
            except QhullError as err:
                raise DegeneracyError("cannot triangulate mapped nodes") from err
        else:
            self._order = np.argsort(self.points[:, 0])

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        columns = values.reshape(values.shape[0], -1)
        if self._triangulation is None:
            xp = self.points[self._order, 0]
            out = np.column_stack(
                [np.interp(self.targets[:, 0], xp, col[self._order]) for col in columns.T]
            )
        else:
            out = LinearNDInterpolator(self._triangulation, columns)(self.targets)
            missing = np.isnan(out).any(axis=1)
            if missing.any():
                LOGGER.debug("Nearest fill for %d nodes outside the hull", missing.sum())
                nearest = NearestNDInterpolator(self.points, columns)
                out[missing] = nearest(self.targets[missing])
        return out.reshape((self.targets.shape[0],) + values.shape[1:])


def apply_diffeomorphism(
    coeffs: CoefficientField,
    mapping: DiffeoMap,
    target: GridSpec | None = None,
) -> CoefficientField:
    """Push coefficients forward through y(x) and resample on ``target``.

    g0 = J g J^T, A0 = J^{-T} A, V0(y(x)) = V(x); an explicit density
    transforms as rho / |det J|.
    """
    grid = coeffs.grid
    if mapping.grid != grid:
        raise DimensionError("map and coefficients are sampled on different grids")
    target = target or grid
    if target.dim != grid.dim:
        raise DimensionError("target grid dimension differs from the source")
    valid = mapping.valid
    det = mapping.determinant()
    if not valid.any():
        raise DegeneracyError("map has no finite nodes")
    scale = float(np.abs(det[valid]).max())
    singular = valid & (np.abs(det) <= 1e-12 * max(scale, 1e-300))
    if singular.any():
        node = tuple(int(i) for i in np.argwhere(singular)[0])
        raise DegeneracyError(f"singular Jacobian at node {node}", node=node)

    jac = mapping.jacobian[valid]
    metric = np.einsum("kab,kbc,kdc->kad", jac, coeffs.metric_inv[valid], jac)
    metric = 0.5 * (metric + np.swapaxes(metric, -1, -2))
    jac_t = np.swapaxes(jac, -1, -2)
    potential_a = np.linalg.solve(
        jac_t.astype(complex), coeffs.potential_a[valid][..., None].astype(complex)
    )[..., 0]
    potential_v = coeffs.potential_v[valid]

    n = grid.dim
    columns = [
        metric.reshape(-1, n * n),
        potential_a.real,
        potential_a.imag,
        np.real(potential_v)[:, None],
        np.imag(potential_v)[:, None],
    ]
    if coeffs.density is not None:
        columns.append((coeffs.density[valid] / np.abs(det[valid]))[:, None])
    stacked = np.concatenate(columns, axis=1)

    targets = np.stack(target.mesh(), axis=-1).reshape(-1, n)
    resampled = Resampler(mapping.forward[valid], targets)(stacked)
    shape = target.shape
    offset = 0

    def take(width: int) -> np.ndarray:
        nonlocal offset
        chunk = resampled[:, offset : offset + width]
        offset += width
        return chunk

    metric_out = take(n * n).reshape(shape + (n, n))
    metric_out = 0.5 * (metric_out + np.swapaxes(metric_out, -1, -2))
    a_out = (take(n) + 1j * take(n)).reshape(shape + (n,))
    v_out = (take(1) + 1j * take(1)).reshape(shape)
    density = take(1).reshape(shape) if coeffs.density is not None else None
    if not np.iscomplexobj(coeffs.potential_a):
        a_out = a_out.real
    if not np.iscomplexobj(coeffs.potential_v):
        v_out = v_out.real
    return CoefficientField.build(target, metric_out, a_out, v_out, density)


def validate_coefficients(
    coeffs: CoefficientField,
    *,
    symmetry_tol: float = 0.0,
    det_tol: float = 1e-10,
) -> ValidationReport:
    """List every violated coefficient invariant with its node index."""
    report = ValidationReport()
    metric = coeffs.metric_inv

    def flag(invariant: str, mask: np.ndarray, detail: str) -> None:
        for node in np.argwhere(mask):
            index = tuple(int(i) for i in node)
            report.violations.append(Violation(invariant, index, detail))

    finite = np.isfinite(metric).all(axis=(-2, -1)) & np.isfinite(coeffs.g_det)
    finite &= np.isfinite(coeffs.potential_a).all(axis=-1)
    finite &= np.isfinite(coeffs.potential_v)
    flag("finite", ~finite, "non-finite coefficient value")
    safe = np.where(finite[..., None, None], metric, np.eye(coeffs.grid.dim))

    asym = np.abs(safe - np.swapaxes(safe, -1, -2)).max(axis=(-2, -1))
    flag("symmetric", asym > symmetry_tol, "g^{jk} != g^{kj}")

    eigen_min = np.linalg.eigvalsh(0.5 * (safe + np.swapaxes(safe, -1, -2)))[..., 0]
    flag("positive_definite", finite & (eigen_min <= 0), "smallest eigenvalue <= 0")

    with np.errstate(invalid="ignore"):
        mismatch = np.abs(coeffs.g_det * np.linalg.det(safe) - 1.0)
    flag("g_det", finite & ~(mismatch <= det_tol), "g_det != 1/det(g^{jk})")

    for name in ("potential_a", "potential_v"):
        value = getattr(coeffs, name)
        if np.iscomplexobj(value):
            imag = np.abs(value.imag)
            if name == "potential_a":
                imag = imag.max(axis=-1)
            flag("real_valued", imag > 0, f"{name} has an imaginary part")

    if coeffs.density is not None:
        flag("density", ~(coeffs.density > 0), "density must be positive")
    if report.violations:
        LOGGER.info("Coefficient validation found %d violations", len(report))
    return report
