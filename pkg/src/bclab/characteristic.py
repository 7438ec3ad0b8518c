"""Characteristic-plane geometry and interior quadratures of stored wave fields.

The interior forms here are oracles for the boundary-only forms in
``bclab.boundary_control``; the reconstruction path never calls them.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .errors import DimensionError, ValidationError
from .models import BoundaryPatch, CoefficientField, GridSpec
from .solver import WaveField


@dataclass(frozen=True, slots=True)
class CharacteristicGeometry:
    """s = t - y_n and tau = T - t - y_n on the (y', y_n, t) lattice.

    Plane nodes sit at y_n = j h_n and t = T - tau - j h_n, which requires
    h_n / dt to be an integer.
    """

    grid: GridSpec
    patch: BoundaryPatch
    window: float
    gamma: tuple[int, int]
    gamma1: tuple[int, int]
    speed: float

    @classmethod
    def build(
        cls,
        grid: GridSpec,
        patch: BoundaryPatch,
        window: float,
        speed: float,
        gamma: tuple[int, int] | None = None,
    ) -> CharacteristicGeometry:
        if grid.time_ratio is None:
            raise ValidationError("h_n / dt must be an integer for characteristic planes")
        if not 0 < window <= grid.horizon * (1 + 1e-12):
            raise ValidationError(f"window {window} outside (0, {grid.horizon}]")
        gamma = gamma or (patch.start, patch.stop)
        if grid.dim == 1:
            return cls(grid, patch, window, (0, 1), (0, 1), speed)
        reach = math.ceil(speed * window / grid.spacing[0] - 1e-9)
        gamma1 = (max(0, gamma[0] - reach), min(grid.face_size, gamma[1] + reach))
        return cls(grid, patch, window, gamma, gamma1, speed)

    @property
    def ratio(self) -> int:
        return int(self.grid.time_ratio)

    @property
    def time_steps(self) -> int:
        return round(self.window / self.grid.time_step)

    def plane(self, tau: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Layers j, time indices m and s values of the plane tau = const, s ascending."""
        steps = (self.window - tau) / self.grid.time_step
        top = round(steps)
        if tau < 0 or abs(steps - top) > 1e-6:
            raise ValidationError(f"tau = {tau} is not on the time lattice")
        layers = np.arange(min(top // (2 * self.ratio), self.grid.shape[-1] - 1) + 1)
        times = top - layers * self.ratio
        s = (times - layers * self.ratio) * self.grid.time_step
        order = np.argsort(s)
        return layers[order], times[order], s[order]

    def identity_residual(self, tau: float = 0.0) -> float:
        """max |s + tau + 2 y_n - T| over the plane nodes."""
        layers, _, s = self.plane(tau)
        y_n = layers * self.grid.normal_spacing
        return float(np.abs(s + tau + 2 * y_n - self.window).max())

    def region(self, s0: float) -> tuple[tuple[int, int], float]:
        """R_{s0} = Gamma^(1) x [s0, T] as a tangential index range and an s bound."""
        if not 0 <= s0 < self.window:
            raise ValidationError(f"s0 = {s0} outside [0, {self.window})")
        return self.gamma1, s0

    def collar_bound(self) -> float:
        """Largest window whose region s, tau >= 0 stays off the far face x_n = L_n."""
        return 2.0 * self.grid.extents[-1] / self.speed

    def within_collar(self) -> bool:
        return self.window <= self.collar_bound() * (1 + 1e-12)


def _check_field(u: WaveField, geometry: CharacteristicGeometry) -> None:
    if u.grid != geometry.grid:
        raise DimensionError("field and geometry use different grids")
    if u.values.shape[0] <= geometry.time_steps:
        raise DimensionError(
            f"field stops at step {u.values.shape[0] - 1}"
            f" < window step {geometry.time_steps}"
        )


def _plane_nodes(
    u: WaveField, geometry: CharacteristicGeometry, tau: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_field(u, geometry)
    layers, times, s = geometry.plane(tau)
    if u.layers <= layers.max():
        raise DimensionError(
            f"field stores {u.layers} layers, plane needs {layers.max() + 1}"
        )
    return layers, times, s


def _tangential(values: np.ndarray, geometry: CharacteristicGeometry) -> np.ndarray:
    if geometry.grid.dim == 1:
        return values[..., None]
    lo, hi = geometry.gamma1
    return values[..., lo:hi]


def restrict_to_plane(
    u: WaveField,
    geometry: CharacteristicGeometry,
    tau: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Values on the plane: s ascending, shape (S, tangential nodes of Gamma^(1))."""
    layers, times, s = _plane_nodes(u, geometry, tau)
    values = u.values[times, ..., layers]
    if geometry.grid.dim == 2:
        values = values.reshape(len(layers), -1)
    return s, _tangential(values, geometry)


def plane_derivative_s(
    u: WaveField,
    geometry: CharacteristicGeometry,
    tau: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """u_s = (u_t - u_{y_n}) / 2 on the plane nodes."""
    layers, times, s = _plane_nodes(u, geometry, tau)
    grid = geometry.grid
    u_t = u.time_derivative()[times]
    u_n = np.gradient(u.values[times], grid.normal_spacing, axis=-1, edge_order=2)
    pick = np.arange(len(layers))
    if grid.dim == 1:
        derivative = 0.5 * (u_t[pick, layers] - u_n[pick, layers])
    else:
        derivative = 0.5 * (u_t[pick, :, layers] - u_n[pick, :, layers])
    return s, _tangential(derivative, geometry)


def _integrate(
    values: np.ndarray,
    s: np.ndarray,
    weights: np.ndarray,
    lower: float | None = None,
    upper: float | None = None,
) -> complex:
    """Trapezoid in s (with a linear partial cell at the bounds), weights in y'."""
    keep = np.ones(s.size, dtype=bool)
    if lower is not None:
        keep &= s >= lower
    if upper is not None:
        keep &= s <= upper
    nodes = list(np.flatnonzero(keep))
    pieces_s = [s[i] for i in nodes]
    pieces_v = [values[i] for i in nodes]
    for bound, side in ((lower, 0), (upper, -1)):
        if bound is None or not s[0] < bound < s[-1]:
            continue
        k = int(np.searchsorted(s, bound))
        theta = (bound - s[k - 1]) / (s[k] - s[k - 1])
        point = (1 - theta) * values[k - 1] + theta * values[k]
        if side == 0:
            pieces_s.insert(0, bound)
            pieces_v.insert(0, point)
        else:
            pieces_s.append(bound)
            pieces_v.append(point)
    if len(pieces_s) < 2:
        return 0.0j
    line = np.trapezoid(np.asarray(pieces_v), x=np.asarray(pieces_s), axis=0)
    return complex(np.sum(line * weights))


def _tangential_weights(geometry: CharacteristicGeometry) -> np.ndarray:
    grid = geometry.grid
    if grid.dim == 1:
        return np.ones(1)
    lo, hi = geometry.gamma1
    weights = np.full(hi - lo, grid.spacing[0])
    weights[[0, -1]] *= 0.5
    return weights


def interior_a(
    u: WaveField,
    v: WaveField,
    geometry: CharacteristicGeometry,
    *,
    s_max: float | None = None,
    tau: float = 0.0,
) -> complex:
    """2 * int_Y u_s conj(v) ds dy', optionally cut at s <= s_max."""
    s, u_s = plane_derivative_s(u, geometry, tau)
    _, v_plane = restrict_to_plane(v, geometry, tau)
    return 2.0 * _integrate(
        u_s * np.conj(v_plane), s, _tangential_weights(geometry), upper=s_max
    )


def interior_q(
    u: WaveField,
    v: WaveField,
    coeffs: CoefficientField,
    geometry: CharacteristicGeometry,
    *,
    tau: float = 0.0,
) -> complex:
    """Q(u, v) on the plane for a normal-form field (g^{nn} = 1, A_n = 0)."""
    s, u_s = plane_derivative_s(u, geometry, tau)
    _, v_s = plane_derivative_s(v, geometry, tau)
    _, u_p = restrict_to_plane(u, geometry, tau)
    _, v_p = restrict_to_plane(v, geometry, tau)
    layers, _, _ = geometry.plane(tau)
    grid = geometry.grid
    potential = _tangential(np.moveaxis(coeffs.potential_v, -1, 0)[layers], geometry)
    integrand = 4.0 * u_s * np.conj(v_s) + potential * u_p * np.conj(v_p)
    if grid.dim == 2:
        h = grid.spacing[0]
        inverse = np.moveaxis(coeffs.metric_inv[..., 0, 0], -1, 0)
        metric = _tangential(inverse[layers], geometry)
        a = _tangential(np.moveaxis(coeffs.potential_a[..., 0], -1, 0)[layers], geometry)
        du = -1j * np.gradient(u_p, h, axis=1, edge_order=2) + a * u_p
        dv = -1j * np.gradient(v_p, h, axis=1, edge_order=2) + np.conj(a) * v_p
        integrand = integrand + metric * du * np.conj(dv)
    return 0.5 * _integrate(integrand, s, _tangential_weights(geometry))
