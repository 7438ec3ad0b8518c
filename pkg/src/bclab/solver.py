"""Leapfrog solver for the magnetic wave operator driven through the data patch."""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial import cKDTree

from .errors import DimensionError, InstabilityError, ValidationError
from .models import BoundaryPatch, BoundarySignal, CoefficientField, GridSpec

LOGGER = logging.getLogger(__name__)

STORAGE_POLICIES = ("full", "collar")


@dataclass(frozen=True, slots=True)
class WaveField:
    """u(x, t_m) with shape (M + 1,) + tangential shape + (stored normal layers,)."""

    grid: GridSpec
    times: np.ndarray
    values: np.ndarray
    storage: str = "full"

    @property
    def layers(self) -> int:
        return self.values.shape[-1]

    @property
    def time_step(self) -> float:
        return float(self.times[1] - self.times[0])

    def time_derivative(self) -> np.ndarray:
        return np.gradient(self.values, self.time_step, axis=0, edge_order=2)


def _take(array: np.ndarray, index: slice, axis: int) -> np.ndarray:
    selector = [slice(None)] * array.ndim
    selector[axis] = index
    return array[tuple(selector)]


class SpatialOperator:
    """Discrete (1/rho) sum (-i d_j + A_j) rho g^{jk} (-i d_k + A_k) + V.

    Diagonal second-order terms use a compact face-averaged stencil, cross terms
    and magnetic terms central differences. Boundary rows are left at zero.
    """

    def __init__(self, coeffs: CoefficientField) -> None:
        grid = coeffs.grid
        self.n = grid.dim
        self.spacing = grid.spacing
        weight = coeffs.weight
        metric = coeffs.metric_inv
        self.inv_weight = (1.0 / weight)[self._interior()]
        self.faces = []
        for j in range(self.n):
            c = weight * metric[..., j, j]
            upper, lower = _take(c, slice(1, None), j), _take(c, slice(None, -1), j)
            self.faces.append(0.5 * (upper + lower))
        self.cross = [
            (j, k, weight * metric[..., j, k])
            for j in range(self.n)
            for k in range(self.n)
            if j != k and np.any(metric[..., j, k])
        ]
        ga = np.einsum("...jk,...k->...j", metric, coeffs.potential_a)
        self.magnetic = bool(np.any(coeffs.potential_a))
        self.ga = [ga[..., j] for j in range(self.n)]
        self.wga = [weight * ga[..., j] for j in range(self.n)]
        self.potential = (
            np.einsum("...j,...j->...", coeffs.potential_a, ga) + coeffs.potential_v
        )[self._interior()]

    def _interior(self, skip: int | None = None) -> tuple[slice, ...]:
        return tuple(
            slice(None) if axis == skip else slice(1, -1) for axis in range(self.n)
        )

    def _d(self, values: np.ndarray, axis: int) -> np.ndarray:
        return np.gradient(values, self.spacing[axis], axis=axis)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        inner = self._interior()
        acc = np.zeros(tuple(s - 2 for s in u.shape), dtype=complex)
        for j in range(self.n):
            h = self.spacing[j]
            flux = self.faces[j] * np.diff(u, axis=j) / h
            acc += (np.diff(flux, axis=j) / h)[self._interior(skip=j)]
        for j, k, coeff in self.cross:
            acc += self._d(coeff * self._d(u, k), j)[inner]
        if self.magnetic:
            for j in range(self.n):
                acc += 1j * self._d(self.wga[j] * u, j)[inner]
        out = np.zeros(u.shape, dtype=complex)
        out[inner] = -self.inv_weight * acc + self.potential * u[inner]
        if self.magnetic:
            for k in range(self.n):
                out[inner] -= 1j * (self.ga[k] * self._d(u, k))[inner]
        return out


def apply_operator(coeffs: CoefficientField, u: np.ndarray) -> np.ndarray:
    return SpatialOperator(coeffs)(np.asarray(u, dtype=complex))


def collar_layers(grid: GridSpec, depth: float) -> int:
    return min(grid.shape[-1], math.ceil(depth / grid.normal_spacing - 1e-9) + 3)


def _inject(u: np.ndarray, f: BoundarySignal, m: int, dim: int) -> None:
    if dim == 1:
        u[0] = f.samples[0, m]
        u[-1] = 0.0
        return
    u[0, :] = 0.0
    u[-1, :] = 0.0
    u[:, -1] = 0.0
    u[:, 0] = 0.0
    u[f.patch.start : f.patch.stop, 0] = f.samples[:, m]


def _check_signal(coeffs: CoefficientField, f: BoundarySignal) -> None:
    grid = coeffs.grid
    f.patch.validate(grid)
    if f.times.size < 2 or not math.isclose(f.time_step, grid.time_step, rel_tol=1e-9):
        raise DimensionError(
            f"signal time step {f.time_step if f.times.size > 1 else 'n/a'}"
            f" does not match grid time step {grid.time_step}"
        )
    if f.times[-1] > grid.horizon * (1 + 1e-12):
        raise DimensionError(f"signal runs past the horizon {grid.horizon}")
    if not f.is_compatible():
        raise ValidationError("boundary signal must vanish at t = 0 (zero Cauchy data)")


def solve_forward(
    coeffs: CoefficientField,
    f: BoundarySignal,
    *,
    storage: str = "full",
    collar_depth: float | None = None,
) -> WaveField:
    """Leapfrog from zero Cauchy data; Dirichlet f on the patch, zero elsewhere."""
    if storage not in STORAGE_POLICIES:
        raise ValidationError(f"unknown storage policy '{storage}'")
    grid = coeffs.grid
    grid.check_cfl(coeffs.metric_inv)
    _check_signal(coeffs, f)
    if storage == "full":
        layers = grid.shape[-1]
    else:
        depth = 0.5 * float(f.times[-1]) if collar_depth is None else collar_depth
        layers = collar_layers(grid, depth)
    operator = SpatialOperator(coeffs)
    dt2 = grid.time_step**2
    steps = f.times.size - 1
    values = np.zeros((steps + 1,) + grid.shape[:-1] + (layers,), dtype=complex)
    prev = np.zeros(grid.shape, dtype=complex)
    curr = np.zeros(grid.shape, dtype=complex)
    _inject(curr, f, 0, grid.dim)
    values[0] = curr[..., :layers]
    for m in range(1, steps + 1):
        lu = operator(curr)
        if m == 1:
            nxt = curr - 0.5 * dt2 * lu
        else:
            nxt = 2.0 * curr - prev - dt2 * lu
        _inject(nxt, f, m, grid.dim)
        if not np.isfinite(nxt).all():
            raise InstabilityError(f"non-finite values at step {m}", step=m)
        values[m] = nxt[..., :layers]
        prev, curr = curr, nxt
    LOGGER.debug("Solved %d steps on grid %s (%s storage)", steps, grid.shape, storage)
    return WaveField(grid, f.times.copy(), values, storage)


def solve_adjoint(
    coeffs: CoefficientField,
    g: BoundarySignal,
    *,
    storage: str = "full",
    collar_depth: float | None = None,
) -> WaveField:
    """Same scheme with conjugated potentials (the formal adjoint)."""
    return solve_forward(
        coeffs.conjugated(), g, storage=storage, collar_depth=collar_depth
    )


def neumann_trace(
    u: WaveField,
    coeffs: CoefficientField,
    patch: BoundaryPatch,
) -> BoundarySignal:
    """Conormal trace with exterior normal -e_n, normalized by (g^{nn})^{-1/2}."""
    grid = coeffs.grid
    patch.validate(grid)
    if u.layers < 3:
        raise DimensionError("trace stencil needs three stored normal layers")
    h_n = grid.normal_spacing
    values = u.values
    face = values[..., 0]
    d_normal = (-3.0 * values[..., 0] + 4.0 * values[..., 1] - values[..., 2]) / (2 * h_n)
    if grid.dim == 1:
        metric = coeffs.metric_inv[0][None]
        potential = coeffs.potential_a[0][None]
        derivs = [d_normal[:, None]]
        face = face[:, None]
    else:
        metric = coeffs.metric_inv[:, 0]
        potential = coeffs.potential_a[:, 0]
        d_tangential = np.gradient(face, grid.spacing[0], axis=1, edge_order=2)
        derivs = [d_tangential, d_normal]
    n = grid.dim
    conormal = np.zeros(face.shape, dtype=complex)
    for j in range(n):
        conormal += metric[:, j, -1] * (derivs[j] + 1j * potential[:, j] * face)
    trace = -conormal / np.sqrt(metric[:, -1, -1])
    samples = trace[:, patch.start : patch.stop].T if n == 2 else trace.T
    return BoundarySignal(patch, u.times, samples)


def energy(u: WaveField, coeffs: CoefficientField, m: int) -> float:
    """Weighted trapezoid of |u_t|^2 + g^{jk} D_j u conj(D_k u) + V |u|^2 at step m."""
    grid = coeffs.grid
    steps = u.values.shape[0]
    if not 0 <= m < steps:
        raise DimensionError(f"step {m} not stored (0..{steps - 1})")
    dt = u.time_step
    if m == 0:
        u_t = (-3 * u.values[0] + 4 * u.values[1] - u.values[2]) / (2 * dt)
    elif m == steps - 1:
        u_t = (3 * u.values[m] - 4 * u.values[m - 1] + u.values[m - 2]) / (2 * dt)
    else:
        u_t = (u.values[m + 1] - u.values[m - 1]) / (2 * dt)
    layers = u.layers
    stored = (slice(None),) * (grid.dim - 1) + (slice(0, layers),)
    field = u.values[m]
    metric = coeffs.metric_inv[stored]
    potential = coeffs.potential_a[stored]
    grads = np.gradient(field, *grid.spacing, edge_order=2)
    if grid.dim == 1:
        grads = [grads]
    covariant = np.stack(
        [-1j * grads[j] + potential[..., j] * field for j in range(grid.dim)], axis=-1
    )
    kinetic = np.einsum("...jk,...j,...k->...", metric, covariant, np.conj(covariant))
    density = (
        np.abs(u_t) ** 2 + kinetic + coeffs.potential_v[stored] * np.abs(field) ** 2
    ).real * coeffs.weight[stored]
    for axis in reversed(range(grid.dim)):
        density = trapezoid(density, dx=grid.spacing[axis], axis=axis)
    return float(density)


def arrival_times(coeffs: CoefficientField, f: BoundarySignal) -> np.ndarray:
    """Earliest time the data f can reach each node at the maximal wave speed."""
    grid = coeffs.grid
    window = f.support()
    if window is None:
        return np.full(grid.shape, np.inf)
    active = np.abs(f.samples).max(axis=1) > 0
    coords = f.patch.coordinates(grid)[active]
    sources = np.zeros((coords.size, grid.dim))
    if grid.dim == 2:
        sources[:, 0] = coords
    nodes = np.stack(grid.mesh(), axis=-1).reshape(-1, grid.dim)
    distance, _ = cKDTree(sources).query(nodes)
    start = float(f.times[window[0]]) - f.time_step
    return (start + distance / coeffs.max_wave_speed()).reshape(grid.shape)
