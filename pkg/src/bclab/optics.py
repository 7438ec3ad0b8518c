"""Geometric-optics probes and point extraction of adjoint fields from boundary data."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .boundary_control import (
    DEFAULT_EPSILONS,
    A1Result,
    DelayedSystem,
    recover_a1,
    richardson,
)
from .characteristic import CharacteristicGeometry
from .dtn import DtNDataset, parallel_map
from .errors import (
    BudgetExceededError,
    CoverageError,
    DimensionError,
    ExtractionError,
    ProbeSupportError,
    ValidationError,
)
from .models import BoundaryPatch, BoundarySignal, CoefficientField
from .semigeodesic import NormalFormCoefficients
from .solver import WaveField, neumann_trace, solve_adjoint, solve_forward

LOGGER = logging.getLogger(__name__)

MOLLIFIER_CELLS = 4


def smoothstep(x: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for x <= 0, 1 for x >= 1."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    out = (x >= 1.0).astype(float)
    inner = (x > 0) & (x < 1)
    left = np.exp(-1.0 / x[inner])
    right = np.exp(-1.0 / (1.0 - x[inner]))
    out[inner] = left / (left + right)
    return out


def plateau_cutoff(s: np.ndarray, center: float, plateau: float) -> np.ndarray:
    """1 on |s - center| < plateau, 0 beyond twice the plateau."""
    return smoothstep((2.0 * plateau - np.abs(np.asarray(s) - center)) / plateau)


def mollifier(y: np.ndarray, center: float, width: float) -> np.ndarray:
    """(1/width) chi0((y - center)/width) with chi0 = (35/32)(1 - z^2)^3 on |z| < 1."""
    z = (np.asarray(y, dtype=float) - center) / width
    return np.where(np.abs(z) < 1.0, 35.0 / 32.0 * (1.0 - z**2) ** 3, 0.0) / width


@dataclass(frozen=True, slots=True)
class ProbeSpec:
    wavenumber: float
    s0: float
    y0: float = 0.0
    plateau: float = 0.05
    mollifier: float = 0.0
    order: int = 2
    flat_profile: bool = False

    def __post_init__(self) -> None:
        if self.wavenumber <= 0 or self.plateau <= 0 or self.mollifier < 0:
            raise ValidationError("probe wavenumber and plateau must be positive")
        if self.order < 0:
            raise ValidationError(f"probe order {self.order} must be >= 0")

    def width(self, spacing: float) -> float:
        return max(MOLLIFIER_CELLS * spacing, self.mollifier)


@dataclass(frozen=True, slots=True)
class Probe:
    """Amplitudes a_p on an (s, y', y_n) grid; a_p vanishes on y_n = 0 for p >= 1."""

    spec: ProbeSpec
    s: np.ndarray
    spacing: tuple[float, float]
    window: float
    amplitudes: np.ndarray
    applied: np.ndarray
    trace: BoundarySignal
    mass: float

    def region(self) -> np.ndarray:
        """tau >= 0 on the half-layer nodes used by the residual."""
        h_n = self.spacing[1]
        layers = self.amplitudes.shape[-1]
        mid = (np.arange(layers - 1) + 0.5) * h_n
        return mid[None, None, :] <= 0.5 * (self.window - self.s)[:, None, None] + 1e-12


class _NormalFormOperator:
    """L1 on amplitudes b(s, y', y_n): 2 b_sy - b_yy + tangential part + V1."""

    def __init__(self, nf: NormalFormCoefficients, nodes: slice, layers: int) -> None:
        grid = nf.grid
        self.dim = grid.dim
        self.h_n = grid.normal_spacing
        self.h_t = grid.spacing[0] if grid.dim == 2 else 1.0
        if grid.dim == 1:
            self.v1 = nf.potential_v1[:layers][None, None, :]
        else:
            self.v1 = nf.potential_v1[nodes, :layers][None]
            self.metric = nf.tangential_metric[nodes, :layers, 0, 0][None]
            self.a = nf.potential_a[nodes, :layers, 0][None]

    def __call__(self, b: np.ndarray, ds: float) -> np.ndarray:
        b_s = np.gradient(b, ds, axis=0, edge_order=2)
        b_sy = np.gradient(b_s, self.h_n, axis=2, edge_order=2)
        b_y = np.gradient(b, self.h_n, axis=2, edge_order=2)
        b_yy = np.gradient(b_y, self.h_n, axis=2, edge_order=2)
        out = 2.0 * b_sy - b_yy + self.v1 * b
        if self.dim == 2:
            covariant = -1j * np.gradient(b, self.h_t, axis=1, edge_order=2) + self.a * b
            flux = self.metric * covariant
            out = out - 1j * np.gradient(flux, self.h_t, axis=1, edge_order=2)
            out = out + self.a * flux
        return out


def _support_overflow(
    spec: ProbeSpec,
    patch: BoundaryPatch,
    coords: np.ndarray,
    width: float,
    window: float,
    dt: float,
) -> float:
    early = 2 * spec.plateau + dt - spec.s0
    late = spec.s0 + 2 * spec.plateau - window
    overflow = max(0.0, early, late)
    if coords.size > 1:
        left, right = coords[0] - (spec.y0 - width), spec.y0 + width - coords[-1]
        overflow = max(overflow, left, right)
    return overflow


def build_probe(
    nf: NormalFormCoefficients,
    spec: ProbeSpec,
    patch: BoundaryPatch,
    times: np.ndarray,
) -> Probe:
    """Transport hierarchy a_0 = chi1 chi2, a_p = -(1/2) int_0^{y_n} L1 a_{p-1}."""
    grid = nf.grid
    patch.validate(grid)
    dt = float(times[1] - times[0])
    window = float(times[-1])
    coords = patch.coordinates(grid)
    width = spec.width(grid.spacing[0]) if grid.dim == 2 else 0.0
    overflow = _support_overflow(spec, patch, coords, width, window, dt)
    if overflow > 0:
        raise ProbeSupportError(
            f"probe at s0={spec.s0}, y0={spec.y0}"
            f" leaves the data patch by {overflow:.4f}",
            overflow=overflow,
        )
    if grid.dim == 2 and patch.size < 3:
        raise DimensionError("probes need at least three patch nodes")

    reach = 2 * spec.plateau + 2 * dt
    s = times[(times >= spec.s0 - reach) & (times <= spec.s0 + reach)]
    layers = min(grid.shape[-1], int((window - s[0]) / (2 * grid.normal_spacing)) + 2)
    if layers < 4:
        raise CoverageError(f"probe at s0={spec.s0} reaches only {layers} layers")
    chi1 = plateau_cutoff(s, spec.s0, spec.plateau)
    if grid.dim == 1 or spec.flat_profile:
        chi2 = np.ones(coords.size)
    else:
        chi2 = mollifier(coords, spec.y0, width)
    mass = float(np.sum(chi2 * patch.weights(grid)))

    operator = _NormalFormOperator(nf, slice(patch.start, patch.stop), layers)
    b = np.broadcast_to(
        (chi1[:, None] * chi2[None, :])[..., None], (s.size, coords.size, layers)
    ).astype(complex)
    amplitudes, applied = [b], [operator(b, dt)]
    for _ in range(spec.order):
        b = -0.5 * cumulative_trapezoid(
            applied[-1], dx=grid.normal_spacing, axis=-1, initial=0
        )
        amplitudes.append(b)
        applied.append(operator(b, dt))

    # A1 on {s <= s0} sees only t < s0; afterwards the trace holds its s0 value.
    phase = np.exp(1j * spec.wavenumber * (times - spec.s0))
    temporal = np.where(
        times < spec.s0, phase * plateau_cutoff(times, spec.s0, spec.plateau), 1.0
    )
    samples = np.outer(chi2, temporal)
    trace = BoundarySignal(patch, times, samples)
    return Probe(
        spec=spec,
        s=s,
        spacing=(dt, grid.normal_spacing),
        window=window,
        amplitudes=np.stack(amplitudes),
        applied=np.stack(applied),
        trace=trace,
        mass=mass,
    )


def probe_residual(probe: Probe, wavenumber: float | None = None) -> float:
    """||L1 u_N|| / ||u_N|| over the collar part with tau >= 0.

    The tau-derivative is the difference quotient that matches the trapezoid
    transport integration, so the residual reduces to the k^{-N} remainder.
    """
    k = probe.spec.wavenumber if wavenumber is None else wavenumber
    ik = 1j * k
    h_n = probe.spacing[1]
    phase = np.exp(ik * (probe.s - probe.spec.s0))[:, None, None]
    shape = probe.amplitudes.shape
    residual = np.zeros(shape[1:-1] + (shape[-1] - 1,), dtype=complex)
    field_ = np.zeros_like(residual)
    for p, (b, lb) in enumerate(zip(probe.amplitudes, probe.applied)):
        weight = ik ** (-p)
        d_y = np.diff(b, axis=-1) / h_n
        mean_lb = 0.5 * (lb[..., 1:] + lb[..., :-1])
        residual += weight * (2.0 * ik * d_y + mean_lb)
        field_ += weight * 0.5 * (b[..., 1:] + b[..., :-1])
    mask = np.broadcast_to(probe.region(), residual.shape)
    denominator = np.linalg.norm((phase * field_)[mask])
    if denominator == 0:
        return 0.0
    return float(np.linalg.norm((phase * residual)[mask]) / denominator)


def residual_slope(wavenumbers: Sequence[float], residuals: Sequence[float]) -> float:
    """Least-squares slope of log residual against log k."""
    return float(np.polyfit(np.log(wavenumbers), np.log(residuals), 1)[0])


@dataclass(slots=True)
class ProbeBudget:
    """Caps the extra forward solves spent on probe measurements."""

    limit: int | None = None
    used: int = 0

    def spend(self, count: int = 1) -> None:
        if self.limit is not None and self.used + count > self.limit:
            raise BudgetExceededError(
                f"probe budget of {self.limit} forward solves exhausted"
                f" ({self.used} used)"
            )
        self.used += count


class ForwardMeasurement:
    """Acquire Lambda f for a probe trace; with g-hat data the result is Lambda' f'."""

    def __init__(
        self,
        coeffs: CoefficientField,
        *,
        g_boundary: np.ndarray | None = None,
        g_normal: np.ndarray | None = None,
    ) -> None:
        self.coeffs = coeffs
        self.g_boundary = g_boundary
        self.g_normal = g_normal

    def __call__(self, f: BoundarySignal) -> BoundarySignal:
        if self.g_boundary is None:
            field_ = solve_forward(self.coeffs, f, storage="collar", collar_depth=0.0)
            return neumann_trace(field_, self.coeffs, f.patch)
        quarter = (np.asarray(self.g_boundary) ** 0.25)[:, None]
        physical = f.with_samples(f.samples / quarter)
        field_ = solve_forward(self.coeffs, physical, storage="collar", collar_depth=0.0)
        trace = neumann_trace(field_, self.coeffs, f.patch)
        ratio = np.asarray(self.g_normal) / (4.0 * np.asarray(self.g_boundary))
        correction = ratio[:, None]
        return trace.with_samples(quarter * trace.samples - correction * f.samples)


@dataclass(frozen=True, slots=True)
class ExtractionPlan:
    wavenumbers: tuple[float, ...] = (40.0, 80.0, 160.0)
    mollifiers: tuple[float, ...] = (0.0,)
    plateau: float = 0.05
    order: int = 2
    k_tolerance: float = 0.25
    eps_schedule: tuple[float, ...] = DEFAULT_EPSILONS
    flat_profile: bool = False

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.wavenumbers, self.wavenumbers[1:])):
            raise ValidationError(
                f"wavenumbers {self.wavenumbers} must increase strictly"
            )
        if any(b >= a for a, b in zip(self.mollifiers, self.mollifiers[1:])):
            raise ValidationError(
                f"mollifier widths {self.mollifiers} must decrease strictly"
            )


@dataclass(slots=True)
class ExtractionResult:
    value: complex
    k_table: list[tuple[float, float, complex]] = field(default_factory=list)
    eps_table: list[tuple[float, complex]] = field(default_factory=list)
    solves: int = 0


A1Evaluator = Callable[..., A1Result]


def _restrict_window(
    dataset: DtNDataset, signals: Sequence[BoundarySignal | None], tau: float
) -> tuple[DtNDataset, list[BoundarySignal | None]]:
    if tau <= 0:
        return dataset, list(signals)
    data = dataset.truncated(float(dataset.times[-1]) - tau)
    count = data.times.size
    return data, [
        None
        if s is None
        else BoundarySignal(data.patch, data.times, s.samples[:, :count])
        for s in signals
    ]


def _test_response(
    data: DtNDataset,
    g: BoundarySignal,
    adjoint: DtNDataset | None,
    measure: Callable[[BoundarySignal], BoundarySignal],
    budget: ProbeBudget,
) -> tuple[BoundarySignal, int]:
    """Lambda_* g from the data span, or one extra solve when g lies outside it."""
    try:
        return (adjoint or data).response(g), 0
    except ValidationError:
        if adjoint is not None:
            raise
    LOGGER.info("Test source is outside the data span; measuring it")
    budget.spend()
    return measure(g), 1


def extract_point(
    dataset: DtNDataset,
    g: BoundarySignal,
    nf: NormalFormCoefficients,
    *,
    s0: float,
    y0: float = 0.0,
    tau: float = 0.0,
    plan: ExtractionPlan | None = None,
    measure: Callable[[BoundarySignal], BoundarySignal],
    a1_evaluator: A1Evaluator | None = None,
    budget: ProbeBudget | None = None,
    adjoint: DtNDataset | None = None,
) -> ExtractionResult:
    """v^g at (y0, s0) on the plane tau.

    Evaluates conj(A1(u_probe, v^g) / 2) and takes k, then eps, to the limit.
    """
    plan = plan or ExtractionPlan()
    budget = budget or ProbeBudget()
    evaluate = a1_evaluator or recover_a1
    data, (g,) = _restrict_window(dataset, [g], tau)
    if adjoint is not None:
        adjoint, _ = _restrict_window(adjoint, [], tau)
    system = DelayedSystem(data, s0, adjoint=adjoint)
    options: dict = {"adjoint": adjoint, "system": system}
    result = ExtractionResult(value=0j)
    if a1_evaluator is None:
        options["lg"], extra = _test_response(data, g, adjoint, measure, budget)
        result.solves += extra
    h_t = nf.grid.spacing[0] if nf.grid.dim == 2 else 0.0
    floor = MOLLIFIER_CELLS * h_t
    widths = sorted({max(floor, e) for e in plan.mollifiers}, reverse=True)
    per_width = []
    for width in widths:
        values = []
        for k in plan.wavenumbers:
            spec = ProbeSpec(
                k, s0, y0, plan.plateau, width, plan.order, plan.flat_profile
            )
            probe = build_probe(nf, spec, data.patch, data.times)
            budget.spend()
            result.solves += 1
            lf = measure(probe.trace)
            augmented = data.with_element(probe.trace, lf)
            a1 = evaluate(
                probe.trace,
                g,
                augmented,
                s0,
                plan.eps_schedule,
                **options,
            )
            value = complex(np.conj(a1.value / 2.0)) / probe.mass
            values.append(value)
            result.k_table.append((width, k, value))
        ratios = [b / a for a, b in zip(plan.wavenumbers, plan.wavenumbers[1:])]
        estimates = richardson(values, ratios) if len(values) > 1 else values
        if len(estimates) > 1:
            scale = max(abs(v) for v in values + estimates)
            if abs(estimates[-1] - estimates[-2]) > plan.k_tolerance * max(scale, 1e-300):
                raise ExtractionError(
                    f"k extrapolation did not settle at s0={s0}, y0={y0}: {values}",
                    sequence=values,
                )
        per_width.append(estimates[-1])
        result.eps_table.append((width, estimates[-1]))
    if len(per_width) > 1:
        ratios = [(a / b) ** 2 for a, b in zip(widths, widths[1:])]
        result.value = richardson(per_width, ratios)[-1]
    else:
        result.value = per_width[0]
    LOGGER.debug("Extracted v at s0=%.4f y0=%.4f tau=%.4f: %s", s0, y0, tau, result.value)
    return result


@dataclass(frozen=True, slots=True)
class CharacteristicSlice:
    """v(s, y') on the plane tau = const for one source."""

    tau: float
    s: np.ndarray
    values: np.ndarray
    source: int
    extractor: str


@dataclass(frozen=True, slots=True)
class SliceRegion:
    """Tangential node range [start, stop) and normal layers 0..layers-1 of the collar."""

    start: int
    stop: int
    layers: int
    stride: int = 1

    def __post_init__(self) -> None:
        if self.stop <= self.start or self.layers < 3 or self.stride < 1:
            raise ValidationError(f"slice region {self} is empty or too thin")


@dataclass(frozen=True, slots=True)
class SliceBundle:
    """v, v_t and v_tt at t = T/2 over the region, shape (sources, nodes, layers)."""

    spacing: tuple[float, ...]
    region: SliceRegion
    time: float
    step: float
    values: np.ndarray
    first: np.ndarray
    second: np.ndarray
    extractor: str

    @property
    def dim(self) -> int:
        return len(self.spacing)

    @property
    def sources(self) -> int:
        return self.values.shape[0]

    def subset(self, ids: Sequence[int]) -> SliceBundle:
        ids = list(ids)
        return replace(
            self, values=self.values[ids], first=self.first[ids], second=self.second[ids]
        )


class AdjointFieldExtractor:
    """Reads v^g from stored adjoint solves of the normal-form operator."""

    name = "adjoint-field"

    def __init__(self, coeffs: CoefficientField) -> None:
        self.coeffs = coeffs
        self._fields: dict[int, WaveField] = {}

    def field(self, index: int, source: BoundarySignal) -> WaveField:
        if index not in self._fields:
            self._fields[index] = solve_adjoint(self.coeffs, source)
        return self._fields[index]

    def value(
        self,
        index: int,
        source: BoundarySignal,
        node: int,
        layer: int,
        time_index: int,
    ) -> complex:
        field_ = self.field(index, source)
        if self.coeffs.grid.dim == 1:
            return complex(field_.values[time_index, layer])
        return complex(field_.values[time_index, node, layer])


class ProbeExtractor:
    """Boundary-data extraction through geometric-optics probes."""

    name = "probe"

    def __init__(
        self,
        dataset: DtNDataset,
        nf: NormalFormCoefficients,
        measure: Callable[[BoundarySignal], BoundarySignal],
        *,
        plan: ExtractionPlan | None = None,
        budget: ProbeBudget | None = None,
        adjoint: DtNDataset | None = None,
    ) -> None:
        self.dataset = dataset
        self.nf = nf
        self.measure = measure
        self.plan = plan or ExtractionPlan()
        self.budget = budget or ProbeBudget()
        self.adjoint = adjoint

    def value(
        self,
        index: int,
        source: BoundarySignal,
        node: int,
        layer: int,
        time_index: int,
    ) -> complex:
        grid = self.nf.grid
        window = float(self.dataset.times[-1])
        t = time_index * self.dataset.time_step
        y_n = layer * grid.normal_spacing
        s0, tau = t - y_n, window - t - y_n
        if s0 <= 0 or tau < -1e-12:
            raise CoverageError(
                f"point y_n={y_n:.4f}, t={t:.4f} is off the characteristic planes"
            )
        y0 = float(grid.face_coordinates()[node])
        return extract_point(
            self.dataset,
            source,
            self.nf,
            s0=s0,
            y0=y0,
            tau=max(tau, 0.0),
            plan=self.plan,
            measure=self.measure,
            budget=self.budget,
            adjoint=self.adjoint,
        ).value


Extractor = AdjointFieldExtractor | ProbeExtractor


def characteristic_slice(
    extractor: Extractor,
    index: int,
    source: BoundarySignal,
    geometry: CharacteristicGeometry,
    tau: float = 0.0,
) -> CharacteristicSlice:
    layers, times, s = geometry.plane(tau)
    nodes = range(*geometry.gamma1) if geometry.grid.dim == 2 else range(1)
    values = np.array(
        [[extractor.value(index, source, node, j, m) for node in nodes]
         for j, m in zip(layers, times)]
    )
    return CharacteristicSlice(tau, s, values, index, extractor.name)


def slice_field(
    extractor: Extractor,
    sources: Sequence[BoundarySignal],
    region: SliceRegion,
    *,
    spacing: tuple[float, ...],
    window: float,
    time_step: float,
    threads: int = 1,
) -> SliceBundle:
    """v^g and its first two time derivatives at t = T/2 over the collar region."""
    half = 0.5 * window / time_step
    if abs(half - round(half)) > 1e-9:
        raise CoverageError(f"T/2 = {0.5 * window} is not on the time lattice")
    centre = round(half)
    step = region.stride
    depth = (region.layers - 1) * spacing[-1]
    if depth > (centre - step) * time_step + 1e-12:
        raise CoverageError(
            f"layers up to y_n={depth:.4f} leave no room for the time stencil at T/2"
        )
    nodes = range(region.start, region.stop)

    def sample(item: tuple[int, BoundarySignal]) -> np.ndarray:
        index, source = item
        return np.array([
            [[extractor.value(index, source, node, j, centre + q * step)
              for j in range(region.layers)] for node in nodes]
            for q in (-1, 0, 1)
        ])

    stacks = parallel_map(sample, list(enumerate(sources)), threads)
    if stacks:
        levels = np.stack(stacks)
    else:
        levels = np.zeros((0, 3, len(nodes), region.layers), dtype=complex)
    delta = step * time_step
    values = levels[:, 1]
    first = (levels[:, 2] - levels[:, 0]) / (2 * delta)
    second = (levels[:, 2] - 2 * levels[:, 1] + levels[:, 0]) / delta**2
    LOGGER.info(
        "Slices at t=%.4f for %d sources over %d x %d nodes (%s)",
        centre * time_step, len(sources), len(nodes), region.layers, extractor.name,
    )
    return SliceBundle(
        spacing=spacing,
        region=region,
        time=centre * time_step,
        step=delta,
        values=values,
        first=first,
        second=second,
        extractor=extractor.name,
    )
