"""Domain models for grids, coefficients, gauges, maps and boundary signals."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import hashlib
import math

import numpy as np

from .errors import CFLViolationError, DimensionError, ValidationError


def _frozen(value: object, dtype: object = None) -> np.ndarray:
    array = np.array(value, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def digest_arrays(*arrays: np.ndarray, extra: str = "") -> str:
    """SHA-256 over array shapes, dtypes and bytes (C order)."""
    sha = hashlib.sha256(extra.encode("utf-8"))
    for array in arrays:
        contiguous = np.ascontiguousarray(array)
        sha.update(f"{contiguous.dtype.str}{contiguous.shape}".encode("ascii"))
        sha.update(contiguous.tobytes())
    return sha.hexdigest()


def _is_multiple(value: float, step: float) -> bool:
    ratio = value / step
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio)


@dataclass(frozen=True, slots=True)
class GridSpec:
    """Uniform node grid on [0, L_1] x ... x [0, L_n] times [0, T0].

    The last axis is the normal direction; the data face is x_n = 0 (index 0).
    """

    extents: tuple[float, ...]
    spacing: tuple[float, ...]
    time_step: float
    horizon: float
    cfl_factor: float = 0.7

    def __post_init__(self) -> None:
        extents = tuple(float(v) for v in self.extents)
        spacing = tuple(float(v) for v in self.spacing)
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "spacing", spacing)
        if len(extents) not in (1, 2) or len(spacing) != len(extents):
            raise DimensionError(
                f"grid needs 1 or 2 axes with matching spacing, got {extents} / {spacing}"
            )
        if min(extents) <= 0 or min(spacing) <= 0:
            raise ValidationError("grid extents and spacings must be strictly positive")
        if self.time_step <= 0 or self.horizon <= 0:
            raise ValidationError("time step and horizon must be strictly positive")
        if not 0 < self.cfl_factor <= 1:
            raise ValidationError(f"cfl_factor {self.cfl_factor} outside (0, 1]")
        for extent, step in zip(extents, spacing):
            if not _is_multiple(extent, step):
                raise ValidationError(f"extent {extent} is not a multiple of {step}")
        if not _is_multiple(self.horizon, self.time_step):
            raise ValidationError(
                f"horizon {self.horizon} is not a multiple of time step {self.time_step}"
            )

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(round(e / h) + 1 for e, h in zip(self.extents, self.spacing))

    @property
    def normal_spacing(self) -> float:
        return self.spacing[-1]

    @property
    def steps(self) -> int:
        return round(self.horizon / self.time_step)

    @property
    def face_size(self) -> int:
        return self.shape[0] if self.dim == 2 else 1

    @property
    def time_ratio(self) -> int | None:
        """h_n / dt when it is an integer, else None."""
        ratio = self.normal_spacing / self.time_step
        if abs(ratio - round(ratio)) <= 1e-9 * ratio:
            return round(ratio)
        return None

    def axes(self) -> list[np.ndarray]:
        return [np.arange(count) * step for count, step in zip(self.shape, self.spacing)]

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.axes(), indexing="ij"))

    def times(self, horizon: float | None = None) -> np.ndarray:
        steps = self.steps if horizon is None else round(horizon / self.time_step)
        return np.arange(steps + 1) * self.time_step

    def face_coordinates(self) -> np.ndarray:
        if self.dim == 1:
            return np.zeros(1)
        return self.axes()[0]

    def face_weights(self) -> np.ndarray:
        """Trapezoid weights along the data face (1 for n = 1)."""
        if self.dim == 1:
            return np.ones(1)
        weights = np.full(self.shape[0], self.spacing[0])
        weights[[0, -1]] *= 0.5
        return weights

    def refined(self, factor: int = 2) -> GridSpec:
        return replace(
            self,
            spacing=tuple(h / factor for h in self.spacing),
            time_step=self.time_step / factor,
        )

    def with_horizon(self, horizon: float) -> GridSpec:
        return replace(self, horizon=horizon)

    def collar(self, depth: float) -> GridSpec:
        """Same tangential axis, normal extent cut to the first node past ``depth``."""
        layers = min(self.shape[-1] - 1, math.ceil(depth / self.normal_spacing - 1e-9))
        extents = self.extents[:-1] + (layers * self.normal_spacing,)
        return replace(self, extents=extents)

    def check_cfl(self, metric_inv: np.ndarray) -> float:
        """Return the admissible dt bound, raising when the grid's dt exceeds it."""
        lam_max = float(np.linalg.eigvalsh(metric_inv).max())
        limit = self.cfl_factor * min(self.spacing) / math.sqrt(lam_max)
        if self.time_step > limit * (1 + 1e-12):
            raise CFLViolationError(
                f"time step {self.time_step:.3e} exceeds CFL bound {limit:.3e}"
                f" (max wave speed {math.sqrt(lam_max):.3f})"
            )
        return limit

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True, slots=True)
class BoundaryPatch:
    """Contiguous node range [start, stop) on the face x_n = 0 and its time window."""

    start: int
    stop: int
    window: float
    horizon: float
    t_min: float = 0.0

    def __post_init__(self) -> None:
        if self.start < 0 or self.stop <= self.start:
            raise ValidationError(f"patch [{self.start}, {self.stop}) is empty")
        if not 0 < self.window <= self.horizon * (1 + 1e-12):
            raise ValidationError(
                f"window {self.window} must satisfy 0 < T <= T0 = {self.horizon}"
            )
        if not 0 <= self.t_min < self.window:
            raise ValidationError(f"window start {self.t_min} outside [0, {self.window})")

    @property
    def size(self) -> int:
        return self.stop - self.start

    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.stop)

    def validate(self, grid: GridSpec) -> None:
        if self.stop > grid.face_size:
            raise DimensionError(
                f"patch [{self.start}, {self.stop})"
                f" outside face of {grid.face_size} nodes"
            )
        if self.window > grid.horizon * (1 + 1e-12):
            raise DimensionError(
                f"window {self.window} exceeds grid horizon {grid.horizon}"
            )

    def coordinates(self, grid: GridSpec) -> np.ndarray:
        return grid.face_coordinates()[self.start : self.stop]

    def weights(self, grid: GridSpec) -> np.ndarray:
        if grid.dim == 1:
            return np.ones(1)
        weights = np.full(self.size, grid.spacing[0])
        if self.size > 1:
            weights[[0, -1]] *= 0.5
        return weights

    def with_window(self, window: float, t_min: float | None = None) -> BoundaryPatch:
        return replace(self, window=window, t_min=self.t_min if t_min is None else t_min)


@dataclass(frozen=True, slots=True)
class BoundarySignal:
    """Samples f(y', t_m), shape (patch nodes, time samples), on t_m = m * dt."""

    patch: BoundaryPatch
    times: np.ndarray
    samples: np.ndarray

    def __post_init__(self) -> None:
        times = _frozen(self.times, float)
        samples = _frozen(self.samples, complex)
        if samples.ndim != 2 or samples.shape != (self.patch.size, times.size):
            raise DimensionError(
                f"signal shape {samples.shape} does not match patch of {self.patch.size}"
                f" nodes and {times.size} samples"
            )
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "samples", samples)

    @classmethod
    def zeros(cls, patch: BoundaryPatch, times: np.ndarray) -> BoundarySignal:
        return cls(patch, times, np.zeros((patch.size, len(times)), dtype=complex))

    @property
    def time_step(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def scale(self) -> float:
        return float(np.abs(self.samples).max(initial=0.0))

    def is_compatible(self, tol: float = 1e-12) -> bool:
        """f(., 0) = 0 relative to the signal's own scale."""
        return float(np.abs(self.samples[:, 0]).max()) <= tol * max(1.0, self.scale)

    def time_derivative(self) -> np.ndarray:
        return np.gradient(self.samples, self.time_step, axis=1, edge_order=2)

    def with_samples(self, samples: np.ndarray) -> BoundarySignal:
        return BoundarySignal(self.patch, self.times, samples)

    def reflected(self) -> BoundarySignal:
        return self.with_samples(self.samples[:, ::-1])

    def shifted(self, steps: int) -> BoundarySignal:
        """Delay by ``steps`` samples, zero filled, keeping the time grid."""
        if steps < 0:
            raise ValidationError(f"cannot advance a signal by {-steps} samples")
        if steps == 0:
            return self
        out = np.zeros_like(self.samples)
        out[:, steps:] = self.samples[:, :-steps]
        return self.with_samples(out)

    def truncated(self, count: int) -> BoundarySignal:
        return BoundarySignal(self.patch, self.times[:count], self.samples[:, :count])

    def support(self, tol: float = 1e-14) -> tuple[int, int] | None:
        """First and last time index where the signal is nonzero."""
        threshold = tol * max(self.scale, 1e-300)
        active = np.flatnonzero(np.abs(self.samples).max(axis=0) > threshold)
        if active.size == 0:
            return None
        return int(active[0]), int(active[-1])

    def __add__(self, other: BoundarySignal) -> BoundarySignal:
        return self.with_samples(self.samples + other.samples)

    def __sub__(self, other: BoundarySignal) -> BoundarySignal:
        return self.with_samples(self.samples - other.samples)

    def __mul__(self, factor: complex) -> BoundarySignal:
        return self.with_samples(self.samples * factor)

    __rmul__ = __mul__


@dataclass(frozen=True, slots=True)
class CoefficientField:
    """Node-sampled g^{jk}, A_j, V and cached g = det(g^{jk})^{-1}.

    ``density`` is the weight rho of the divergence form; None means sqrt(g).
    A unit density describes the normal-form operator.
    """

    grid: GridSpec
    metric_inv: np.ndarray
    potential_a: np.ndarray
    potential_v: np.ndarray
    g_det: np.ndarray
    density: np.ndarray | None = None

    def __post_init__(self) -> None:
        shape, n = self.grid.shape, self.grid.dim
        expected = {
            "metric_inv": shape + (n, n),
            "potential_a": shape + (n,),
            "potential_v": shape,
            "g_det": shape,
        }
        if self.density is not None:
            expected["density"] = shape
        for name, wanted in expected.items():
            value = np.asarray(getattr(self, name))
            if value.shape != wanted:
                raise DimensionError(f"{name} has shape {value.shape}, expected {wanted}")
        object.__setattr__(self, "metric_inv", _frozen(self.metric_inv, float))
        object.__setattr__(self, "g_det", _frozen(self.g_det, float))
        for name in ("potential_a", "potential_v"):
            value = np.asarray(getattr(self, name))
            kind = complex if np.iscomplexobj(value) else float
            object.__setattr__(self, name, _frozen(value, kind))
        if self.density is not None:
            object.__setattr__(self, "density", _frozen(self.density, float))

    @classmethod
    def build(
        cls,
        grid: GridSpec,
        metric_inv: np.ndarray,
        potential_a: np.ndarray | None = None,
        potential_v: np.ndarray | None = None,
        density: np.ndarray | None = None,
    ) -> CoefficientField:
        metric = np.asarray(metric_inv, dtype=float)
        with np.errstate(divide="ignore"):
            g_det = 1.0 / np.linalg.det(metric)
        if potential_a is None:
            potential_a = np.zeros(grid.shape + (grid.dim,))
        if potential_v is None:
            potential_v = np.zeros(grid.shape)
        return cls(grid, metric, potential_a, potential_v, g_det, density)

    @classmethod
    def euclidean(cls, grid: GridSpec) -> CoefficientField:
        metric = np.broadcast_to(np.eye(grid.dim), grid.shape + (grid.dim, grid.dim))
        return cls.build(grid, metric)

    @property
    def weight(self) -> np.ndarray:
        if self.density is not None:
            return self.density
        return np.sqrt(self.g_det)

    @property
    def is_self_adjoint(self) -> bool:
        return not (
            np.iscomplexobj(self.potential_a) and np.any(self.potential_a.imag)
        ) and not (np.iscomplexobj(self.potential_v) and np.any(self.potential_v.imag))

    def max_wave_speed(self) -> float:
        return math.sqrt(float(np.linalg.eigvalsh(self.metric_inv).max()))

    def conjugated(self) -> CoefficientField:
        return replace(
            self,
            potential_a=np.conj(self.potential_a),
            potential_v=np.conj(self.potential_v),
        )

    def with_potentials(
        self,
        potential_a: np.ndarray | None = None,
        potential_v: np.ndarray | None = None,
    ) -> CoefficientField:
        return replace(
            self,
            potential_a=self.potential_a if potential_a is None else potential_a,
            potential_v=self.potential_v if potential_v is None else potential_v,
        )

    def digest(self) -> str:
        arrays = [self.metric_inv, self.potential_a, self.potential_v]
        if self.density is not None:
            arrays.append(self.density)
        return digest_arrays(*arrays, extra=repr(self.grid))


@dataclass(frozen=True, slots=True)
class GaugeFunction:
    """Real phase psi; the multiplier c = exp(i psi) must equal 1 on the patch."""

    grid: GridSpec
    psi: np.ndarray

    def __post_init__(self) -> None:
        psi = np.asarray(self.psi)
        if np.iscomplexobj(psi):
            raise ValidationError("gauge phase must be real-valued")
        if psi.shape != self.grid.shape:
            raise DimensionError(
                f"gauge shape {psi.shape} != grid shape {self.grid.shape}"
            )
        object.__setattr__(self, "psi", _frozen(psi, float))

    @property
    def multiplier(self) -> np.ndarray:
        return np.exp(1j * self.psi)

    def boundary_phase(self, patch: BoundaryPatch) -> float:
        face = self.psi[..., 0] if self.grid.dim == 2 else self.psi[:1]
        return float(np.abs(face[patch.start : patch.stop]).max())

    def __add__(self, other: GaugeFunction) -> GaugeFunction:
        if other.grid != self.grid:
            raise DimensionError("gauge functions live on different grids")
        return GaugeFunction(self.grid, self.psi + other.psi)


@dataclass(frozen=True, slots=True)
class DiffeoMap:
    """Sampled y(x) with Jacobian[..., a, b] = dy_a / dx_b.

    Nodes where ``forward`` is not finite lie outside the map's domain.
    """

    grid: GridSpec
    forward: np.ndarray
    jacobian: np.ndarray
    patch: BoundaryPatch | None = None
    boundary_tol: float = 1e-10

    def __post_init__(self) -> None:
        shape, n = self.grid.shape, self.grid.dim
        forward = np.asarray(self.forward, dtype=float)
        jacobian = np.asarray(self.jacobian, dtype=float)
        if forward.shape != shape + (n,) or jacobian.shape != shape + (n, n):
            raise DimensionError(
                f"map arrays {forward.shape} / {jacobian.shape} do not match grid {shape}"
            )
        object.__setattr__(self, "forward", _frozen(forward))
        object.__setattr__(self, "jacobian", _frozen(jacobian))
        if self.patch is not None:
            drift = self.boundary_drift(self.patch)
            scale = max(max(self.grid.extents), 1.0)
            if drift > self.boundary_tol * scale:
                raise ValidationError(
                    f"map moves the data patch by {drift:.3e}; y = x is required on it"
                )

    @classmethod
    def from_forward(
        cls,
        grid: GridSpec,
        forward: np.ndarray,
        patch: BoundaryPatch | None = None,
    ) -> DiffeoMap:
        forward = np.asarray(forward, dtype=float)
        jacobian = np.empty(grid.shape + (grid.dim, grid.dim))
        for a in range(grid.dim):
            gradient = np.gradient(forward[..., a], *grid.spacing, edge_order=2)
            if grid.dim == 1:
                gradient = [gradient]
            for b in range(grid.dim):
                jacobian[..., a, b] = gradient[b]
        return cls(grid, forward, jacobian, patch)

    @classmethod
    def identity(cls, grid: GridSpec) -> DiffeoMap:
        forward = np.stack(grid.mesh(), axis=-1)
        jacobian = np.broadcast_to(np.eye(grid.dim), grid.shape + (grid.dim, grid.dim))
        return cls(grid, forward, jacobian)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.forward).all(axis=-1) & np.isfinite(self.jacobian).all(
            axis=(-2, -1)
        )

    def determinant(self) -> np.ndarray:
        return np.linalg.det(np.nan_to_num(self.jacobian))

    def boundary_drift(self, patch: BoundaryPatch) -> float:
        nodes = np.stack(self.grid.mesh(), axis=-1)
        if self.grid.dim == 1:
            face = slice(0, 1)
            return float(np.abs(self.forward[face] - nodes[face]).max())
        face = (slice(patch.start, patch.stop), 0)
        return float(np.abs(self.forward[face] - nodes[face]).max())


@dataclass(frozen=True, slots=True)
class Violation:
    invariant: str
    node: tuple[int, ...]
    detail: str


@dataclass(slots=True)
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def nodes(self, invariant: str) -> list[tuple[int, ...]]:
        return [v.node for v in self.violations if v.invariant == invariant]

    def raise_if_failed(self) -> None:
        if self.ok:
            return
        preview = "; ".join(
            f"{v.invariant} at {v.node}: {v.detail}" for v in self.violations[:5]
        )
        more = len(self.violations) - 5
        suffix = f" (+{more} more)" if more > 0 else ""
        raise ValidationError(f"invalid coefficients: {preview}{suffix}")
