"""D-to-N datasets: assembly, persistence and trace-level transforms."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar
import warnings

import numpy as np

from .container import file_digest, read_container, write_container
from .errors import (
    BclabError,
    DimensionError,
    IllPosednessWarning,
    MissingArtifactError,
    ValidationError,
)
from .generators import smooth_bump
from .models import BoundaryPatch, BoundarySignal, CoefficientField, GridSpec
from .semigeodesic import solve_eikonal
from .solver import neumann_trace, solve_adjoint, solve_forward

LOGGER = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
BASIS_FILE = "basis.bin"
TRACES_FILE = "traces.bin"

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Ordered map; runs on a thread pool when ``threads`` > 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def time_weights(times: np.ndarray) -> np.ndarray:
    dt = float(times[1] - times[0])
    weights = np.full(times.size, dt)
    weights[[0, -1]] *= 0.5
    return weights


@dataclass(frozen=True, slots=True)
class DtNDataset:
    """Lambda sampled on a source basis: basis and traces are (N, P, M + 1)."""

    grid: GridSpec
    patch: BoundaryPatch
    times: np.ndarray
    basis: np.ndarray
    traces: np.ndarray
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        times = np.array(self.times, dtype=float)
        shape = (self.patch.size, times.size)
        basis = np.array(self.basis, dtype=complex).reshape((-1,) + shape)
        traces = np.array(self.traces, dtype=complex).reshape((-1,) + shape)
        if basis.shape != traces.shape:
            raise DimensionError(
                f"{basis.shape[0]} basis signals but {traces.shape[0]} traces"
            )
        for array in (times, basis, traces):
            array.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "traces", traces)
        object.__setattr__(self, "provenance", dict(self.provenance))

    @classmethod
    def from_signals(
        cls,
        grid: GridSpec,
        patch: BoundaryPatch,
        times: np.ndarray,
        basis: Sequence[BoundarySignal],
        traces: Sequence[BoundarySignal],
        provenance: dict[str, str] | None = None,
    ) -> DtNDataset:
        shape = (0, patch.size, len(times))
        return cls(
            grid,
            patch,
            times,
            np.stack([f.samples for f in basis]) if basis else np.zeros(shape),
            np.stack([t.samples for t in traces]) if traces else np.zeros(shape),
            provenance or {},
        )

    def __len__(self) -> int:
        return self.basis.shape[0]

    @property
    def time_step(self) -> float:
        return float(self.times[1] - self.times[0])

    def signal(self, index: int) -> BoundarySignal:
        return BoundarySignal(self.patch, self.times, self.basis[index])

    def trace(self, index: int) -> BoundarySignal:
        return BoundarySignal(self.patch, self.times, self.traces[index])

    def signals(self) -> list[BoundarySignal]:
        return [self.signal(i) for i in range(len(self))]

    def weights(self) -> np.ndarray:
        """Quadrature weights on (patch node, time sample)."""
        return self.patch.weights(self.grid)[:, None] * time_weights(self.times)[None, :]

    def _check(self, f: BoundarySignal) -> None:
        if f.samples.shape != self.basis.shape[1:]:
            raise DimensionError(
                f"signal shape {f.samples.shape}"
                f" differs from dataset {self.basis.shape[1:]}"
            )

    def represent(self, f: BoundarySignal) -> tuple[np.ndarray, float]:
        """Least-squares coefficients of f in the basis and the relative residual."""
        self._check(f)
        matrix = self.basis.reshape(len(self), -1).T
        target = f.samples.reshape(-1)
        coeffs, *_ = np.linalg.lstsq(matrix, target, rcond=None)
        norm = np.linalg.norm(target)
        residual = np.linalg.norm(matrix @ coeffs - target) / norm if norm else 0.0
        return coeffs, float(residual)

    def response(self, f: BoundarySignal, *, tol: float = 1e-8) -> BoundarySignal:
        """Lambda f for f in the span of the stored basis."""
        self._check(f)
        for index in range(len(self)):
            if np.array_equal(self.basis[index], f.samples):
                return self.trace(index)
        coeffs, residual = self.represent(f)
        if residual > tol:
            raise ValidationError(
                f"signal is outside the basis span (residual {residual:.2e})"
            )
        combined = np.tensordot(coeffs, self.traces, 1)
        return BoundarySignal(self.patch, self.times, combined)

    def with_element(self, f: BoundarySignal, trace: BoundarySignal) -> DtNDataset:
        self._check(f)
        self._check(trace)
        return replace(
            self,
            basis=np.concatenate([self.basis, f.samples[None]]),
            traces=np.concatenate([self.traces, trace.samples[None]]),
        )

    def subset(self, ids: Sequence[int]) -> DtNDataset:
        ids = list(ids)
        return replace(self, basis=self.basis[ids], traces=self.traces[ids])

    def truncated(self, window: float) -> DtNDataset:
        """Restrict to [0, window]; by causality the pairs stay valid."""
        count = int(np.searchsorted(self.times, window + 1e-9 * self.time_step, "right"))
        if count < 3:
            raise ValidationError(f"window {window} keeps fewer than three samples")
        return replace(
            self,
            patch=self.patch.with_window(float(self.times[count - 1])),
            times=self.times[:count],
            basis=self.basis[..., :count],
            traces=self.traces[..., :count],
        )

    def shifted(self, steps: int) -> DtNDataset:
        """Delay every pair by ``steps`` samples (time invariance of the scheme)."""
        if steps < 0:
            raise ValidationError("only delays are supported")
        if steps == 0:
            return self
        basis = np.zeros_like(self.basis)
        traces = np.zeros_like(self.traces)
        basis[..., steps:] = self.basis[..., :-steps]
        traces[..., steps:] = self.traces[..., :-steps]
        return replace(self, basis=basis, traces=traces)

    def with_provenance(self, **extra: object) -> DtNDataset:
        merged = dict(self.provenance)
        merged.update({key: str(value) for key, value in extra.items()})
        return replace(self, provenance=merged)

    def pairing_matrix(self) -> np.ndarray:
        """P[i, j] = <Lambda f_i, f_j> in the weighted boundary inner product."""
        weights = self.weights()
        return np.einsum("ipm,jpm,pm->ij", self.traces, np.conj(self.basis), weights)


def bump_basis(
    grid: GridSpec,
    patch: BoundaryPatch,
    *,
    centers: int = 8,
    shifts: int = 16,
    spatial_width: float | None = None,
    temporal_width: float | None = None,
    t_window: tuple[float, float] | None = None,
) -> list[BoundarySignal]:
    """Tensor products of compact bumps; temporal centers symmetric in the window."""
    times = grid.times(patch.window)
    t_lo, t_hi = t_window or (0.0, float(times[-1]))
    if not 0 <= t_lo < t_hi <= times[-1] + 1e-12:
        raise ValidationError(f"time window ({t_lo}, {t_hi}) outside [0, {times[-1]}]")
    radius_t = temporal_width or 2.0 * (t_hi - t_lo) / (shifts + 1)
    if 2 * radius_t > t_hi - t_lo + 1e-12:
        raise ValidationError("temporal bump wider than its window")
    t_centers = _spread(t_lo + radius_t, t_hi - radius_t, shifts)
    if grid.dim == 1:
        profiles = [np.ones(1)]
    else:
        coords = patch.coordinates(grid)
        lo, hi = float(coords[0]), float(coords[-1])
        radius_y = spatial_width or 2.0 * (hi - lo) / (centers + 1)
        profiles = [
            smooth_bump((coords - c) / radius_y)
            for c in _spread(lo + radius_y, hi - radius_y, centers)
        ]
    basis = []
    for profile in profiles:
        for c in t_centers:
            samples = profile[:, None] * smooth_bump((times - c) / radius_t)[None, :]
            basis.append(BoundarySignal(patch, times, samples))
    return basis


def _spread(lo: float, hi: float, count: int) -> np.ndarray:
    if count == 1 or hi <= lo:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, count)


def impulse_basis(
    grid: GridSpec,
    patch: BoundaryPatch,
    *,
    include_last: bool = False,
) -> list[BoundarySignal]:
    """Kronecker sources at every (patch node, time sample 1..M-1).

    With ``include_last`` the sample t = T is added (no longer reflection closed).
    """
    times = grid.times(patch.window)
    last = times.size if include_last else times.size - 1
    basis = []
    for node in range(patch.size):
        for m in range(1, last):
            samples = np.zeros((patch.size, times.size), dtype=complex)
            samples[node, m] = 1.0
            basis.append(BoundarySignal(patch, times, samples))
    return basis


def assemble_dtn(
    coeffs: CoefficientField,
    basis: Sequence[BoundarySignal],
    *,
    patch: BoundaryPatch | None = None,
    adjoint: bool = False,
    threads: int = 1,
    seed: int | None = None,
) -> DtNDataset:
    """One forward solve plus trace per basis element, in basis order."""
    if not basis and patch is None:
        raise ValidationError("an empty basis needs an explicit patch")
    patch = patch or basis[0].patch
    times = basis[0].times if basis else coeffs.grid.times(patch.window)
    for index, f in enumerate(basis):
        if f.patch != patch or f.times.shape != times.shape:
            raise DimensionError(
                f"basis element {index} uses a different patch or time grid"
            )
    solve = solve_adjoint if adjoint else solve_forward

    def run(item: tuple[int, BoundarySignal]) -> BoundarySignal:
        index, f = item
        try:
            field = solve(coeffs, f, storage="collar", collar_depth=0.0)
            return neumann_trace(field, coeffs, patch)
        except BclabError as err:
            note = f"while solving for basis element {index}"
            if hasattr(err, "add_note"):
                err.add_note(note)
            else:  # Python < 3.11
                err.__notes__ = [*getattr(err, "__notes__", []), note]
            LOGGER.error("Basis element %d failed: %s", index, err)
            raise

    traces = parallel_map(run, enumerate(basis), threads)
    LOGGER.info("Assembled D-to-N dataset with %d elements", len(traces))
    return DtNDataset.from_signals(
        coeffs.grid,
        patch,
        times,
        list(basis),
        traces,
        {
            "coefficients": coeffs.digest(),
            "grid": coeffs.grid.digest(),
            "solver_order": "2",
            "adjoint": str(adjoint).lower(),
            "seed": "none" if seed is None else str(seed),
        },
    )


def lambda_prime(
    dataset: DtNDataset,
    g_boundary: np.ndarray | float,
    g_normal: np.ndarray | float,
) -> DtNDataset:
    """Lambda' f' = g^{1/4} Lambda-hat f - (g_n / 4g) f' with f' = g^{1/4} f.

    The minus sign is the exterior-normal orientation of the traces.
    """
    size = dataset.patch.size
    g_b = np.broadcast_to(np.asarray(g_boundary, dtype=float), (size,))
    g_n = np.broadcast_to(np.asarray(g_normal, dtype=float), (size,))
    if np.any(g_b <= 0) or not np.all(np.isfinite(g_b)):
        raise ValidationError("boundary g-hat must be positive on the patch")
    quarter = (g_b**0.25)[None, :, None]
    basis = dataset.basis * quarter
    correction = (g_n / (4.0 * g_b))[None, :, None]
    traces = dataset.traces * quarter - correction * basis
    return replace(dataset, basis=basis, traces=traces).with_provenance(
        transform="lambda-prime"
    )


def time_reversed_adjoint(dataset: DtNDataset, *, rcond: float = 1e-12) -> DtNDataset:
    """Data of Lambda_*: reflected basis R f_i with traces R K^dagger f_i.

    K is the least-squares trace operator on the span of the basis, in the
    weighted boundary inner product; exact when the basis spans the samples.
    """
    if len(dataset) == 0:
        return dataset
    sqrt_w = np.sqrt(dataset.weights()).reshape(-1)
    count = len(dataset)
    f_tilde = (dataset.basis.reshape(count, -1) * sqrt_w).T
    g_tilde = (dataset.traces.reshape(count, -1) * sqrt_w).T
    u, s, vh = np.linalg.svd(f_tilde, full_matrices=False)
    keep = s > rcond * s[0]
    u, s, vh = u[:, keep], s[keep], vh[keep]
    pairing = g_tilde.conj().T @ f_tilde
    adjoint_tilde = u @ ((vh @ pairing) / s[:, None])
    adjoint = (adjoint_tilde.T / sqrt_w).reshape(dataset.traces.shape)
    # trace energy outside the basis span; zero when the basis spans the samples
    outside = g_tilde - u @ (u.conj().T @ g_tilde)
    norm = float(np.linalg.norm(g_tilde))
    relative = float(np.linalg.norm(outside)) / norm if norm else 0.0
    LOGGER.debug("Adjoint projection residual %.3e", relative)
    return replace(
        dataset,
        basis=dataset.basis[..., ::-1],
        traces=adjoint[..., ::-1],
    ).with_provenance(
        adjoint="time-reversed",
        adjoint_rank=int(keep.sum()),
        adjoint_projection_residual=f"{relative:.3e}",
    )


def add_noise(dataset: DtNDataset, level: float, seed: int) -> DtNDataset:
    """Additive complex Gaussian noise scaled to ``level`` times the RMS trace."""
    if level <= 0:
        return dataset
    rng = np.random.default_rng(seed)
    rms = float(np.sqrt(np.mean(np.abs(dataset.traces) ** 2)))
    noise = rng.standard_normal(dataset.traces.shape) + 1j * rng.standard_normal(
        dataset.traces.shape
    )
    noisy = dataset.traces + level * rms / math.sqrt(2) * noise
    noisy_dataset = replace(dataset, traces=noisy)
    return noisy_dataset.with_provenance(noise_level=level, noise_seed=seed)


def save_dataset(directory: Path, dataset: DtNDataset) -> dict[str, str]:
    """Write manifest.txt, basis.bin and traces.bin; return the file hashes."""
    directory.mkdir(parents=True, exist_ok=True)
    grid, patch = dataset.grid, dataset.patch
    attrs = {"time_step": dataset.time_step}
    shape = dataset.basis.shape
    basis_hash = write_container(
        directory / BASIS_FILE, {"basis": dataset.basis}, dims=shape,
        spacing=grid.spacing, attrs=attrs,
    )
    traces_hash = write_container(
        directory / TRACES_FILE, {"traces": dataset.traces}, dims=shape,
        spacing=grid.spacing, attrs=attrs,
    )
    entries = {
        "format": "CLRC1-DTN",
        "count": str(len(dataset)),
        "grid.extents": " ".join(repr(v) for v in grid.extents),
        "grid.spacing": " ".join(repr(v) for v in grid.spacing),
        "grid.time_step": repr(grid.time_step),
        "grid.horizon": repr(grid.horizon),
        "grid.cfl_factor": repr(grid.cfl_factor),
        "patch.start": str(patch.start),
        "patch.stop": str(patch.stop),
        "patch.window": repr(patch.window),
        "patch.horizon": repr(patch.horizon),
        "patch.t_min": repr(patch.t_min),
        "samples": str(dataset.times.size),
        "sha256.basis": basis_hash,
        "sha256.traces": traces_hash,
    }
    entries.update({f"provenance.{k}": v for k, v in dataset.provenance.items()})
    lines = [f"{key} = {entries[key]}" for key in sorted(entries)]
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    LOGGER.info("Saved dataset with %d elements to %s", len(dataset), directory)
    return {BASIS_FILE: basis_hash, TRACES_FILE: traces_hash}


def read_manifest(path: Path) -> dict[str, str]:
    entries = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}: malformed manifest line '{line}'")
        entries[key.strip()] = value.strip()
    return entries


def load_dataset(directory: Path) -> DtNDataset:
    missing = [
        str(directory / name)
        for name in (MANIFEST, BASIS_FILE, TRACES_FILE)
        if not (directory / name).exists()
    ]
    if missing:
        raise MissingArtifactError(
            f"dataset at {directory} is incomplete: {', '.join(missing)}", missing=missing
        )
    manifest = read_manifest(directory / MANIFEST)
    for name, key in ((BASIS_FILE, "sha256.basis"), (TRACES_FILE, "sha256.traces")):
        if file_digest(directory / name) != manifest.get(key):
            raise ValidationError(f"{directory / name} does not match its manifest hash")
    try:
        grid = GridSpec(
            extents=tuple(float(v) for v in manifest["grid.extents"].split()),
            spacing=tuple(float(v) for v in manifest["grid.spacing"].split()),
            time_step=float(manifest["grid.time_step"]),
            horizon=float(manifest["grid.horizon"]),
            cfl_factor=float(manifest["grid.cfl_factor"]),
        )
        patch = BoundaryPatch(
            start=int(manifest["patch.start"]),
            stop=int(manifest["patch.stop"]),
            window=float(manifest["patch.window"]),
            horizon=float(manifest["patch.horizon"]),
            t_min=float(manifest["patch.t_min"]),
        )
        samples = int(manifest["samples"])
    except (KeyError, ValueError) as err:
        raise ValidationError(
            f"{directory / MANIFEST} is missing or has bad keys"
        ) from err
    provenance = {
        key.removeprefix("provenance."): value
        for key, value in manifest.items()
        if key.startswith("provenance.")
    }
    return DtNDataset(
        grid,
        patch,
        np.arange(samples) * grid.time_step,
        read_container(directory / BASIS_FILE)["basis"],
        read_container(directory / TRACES_FILE)["traces"],
        provenance,
    )


def _restrict(
    coeffs: CoefficientField, grid: GridSpec, start: int, stop: int
) -> CoefficientField:
    window = (slice(None),) * (grid.dim - 1) + (slice(start, stop),)
    density = None if coeffs.density is None else coeffs.density[window]
    return CoefficientField.build(
        grid,
        coeffs.metric_inv[window],
        coeffs.potential_a[window],
        coeffs.potential_v[window],
        density,
    )


def _flip_normal(coeffs: CoefficientField) -> CoefficientField:
    """Coefficients in z = x_1 - x_n so the inner face becomes the data face."""
    axis = coeffs.grid.dim - 1
    metric = np.flip(coeffs.metric_inv, axis=axis).copy()
    metric[..., :-1, -1] *= -1.0
    metric[..., -1, :-1] *= -1.0
    potential_a = np.flip(coeffs.potential_a, axis=axis).copy()
    potential_a[..., -1] *= -1.0
    density = None if coeffs.density is None else np.flip(coeffs.density, axis=axis)
    return CoefficientField.build(
        coeffs.grid, metric, potential_a, np.flip(coeffs.potential_v, axis=axis), density
    )


def _conormal(values: np.ndarray, coeffs: CoefficientField, top: bool) -> np.ndarray:
    """sum_j g^{jn}(d_j u + i A_j u)/sqrt(g^{nn}) on the first or last stored layer."""
    grid = coeffs.grid
    h = grid.normal_spacing
    if top:
        face = values[..., -1]
        d_n = (3 * values[..., -1] - 4 * values[..., -2] + values[..., -3]) / (2 * h)
        layer = -1
    else:
        face = values[..., 0]
        d_n = (-3 * values[..., 0] + 4 * values[..., 1] - values[..., 2]) / (2 * h)
        layer = 0
    if grid.dim == 1:
        metric = coeffs.metric_inv[layer][None]
        potential = coeffs.potential_a[layer][None]
        derivs, face = [d_n[:, None]], face[:, None]
    else:
        metric = coeffs.metric_inv[:, layer]
        potential = coeffs.potential_a[:, layer]
        derivs = [np.gradient(face, grid.spacing[0], axis=1, edge_order=2), d_n]
    out = np.zeros(face.shape, dtype=complex)
    for j in range(grid.dim):
        out += metric[:, j, -1] * (derivs[j] + 1j * potential[:, j] * face)
    return (out / np.sqrt(metric[:, -1, -1])).T


def propagate_dtn(
    dataset: DtNDataset,
    known: CoefficientField,
    inner_layer: int,
    *,
    inner_basis: Sequence[BoundarySignal] | None = None,
    cutoff: float = 1e-6,
    threshold: float = 1e-2,
    threads: int = 1,
) -> DtNDataset:
    """Move the data from x_n = 0 to the inner face x_n = x_1 across the known strip.

    The strip values on the inner face are parametrized by Kronecker sources,
    matched to the outer Neumann data by truncated SVD, and the inner trace is
    read from the strip side. The result lives on the window (delta, T - delta).
    """
    if inner_layer == 0:
        return dataset
    grid = known.grid
    if known.grid != dataset.grid:
        raise DimensionError("known coefficients and dataset use different grids")
    if not 2 <= inner_layer < grid.shape[-1] - 3:
        raise DimensionError(f"inner layer {inner_layer} leaves no room on either side")
    patch = dataset.patch
    depth = inner_layer * grid.normal_spacing
    eikonal = solve_eikonal(known, patch, depth)
    delta = float(np.nanmax(eikonal.phi_n[..., : inner_layer + 1]))
    window = float(dataset.times[-1])
    if 2 * delta >= window - patch.t_min:
        raise ValidationError(f"strip depth {delta:.4f} leaves an empty window")

    strip_grid = grid.collar(depth)
    strip = _restrict(known, strip_grid, 0, inner_layer + 1)
    flipped = _flip_normal(strip)
    times = dataset.times
    strip_patch = BoundaryPatch(patch.start, patch.stop, window, grid.horizon)
    sources = impulse_basis(strip_grid, strip_patch, include_last=True)

    def inner_response(f: BoundarySignal) -> tuple[np.ndarray, np.ndarray]:
        values = solve_forward(flipped, f).values[..., ::-1]
        return -_conormal(values, strip, top=False), -_conormal(values, strip, top=True)

    def outer_response(index: int) -> tuple[np.ndarray, np.ndarray]:
        f = BoundarySignal(strip_patch, times, dataset.basis[index])
        values = solve_forward(strip, f).values
        return -_conormal(values, strip, top=False), -_conormal(values, strip, top=True)

    LOGGER.info(
        "Propagating %d pairs across %d layers (%d strip solves)",
        len(dataset), inner_layer, len(sources) + len(dataset),
    )
    inner = parallel_map(inner_response, sources, threads)
    outer = parallel_map(outer_response, range(len(dataset)), threads)
    face = slice(patch.start, patch.stop) if grid.dim == 2 else slice(0, 1)
    n0 = np.stack([r[0][face].reshape(-1) for r in inner], axis=1)
    n1 = np.stack([r[1][face].reshape(-1) for r in inner], axis=1)

    u, s, vh = np.linalg.svd(n0, full_matrices=False)
    keep = s > cutoff * s[0]
    u, s, vh = u[:, keep], s[keep], vh[keep]
    values, traces, residuals = [], [], []
    for index, (out0, out1) in enumerate(outer):
        rhs = dataset.traces[index].reshape(-1) - out0[face].reshape(-1)
        coeffs = vh.conj().T @ ((u.conj().T @ rhs) / s)
        scale = np.linalg.norm(dataset.traces[index]) or 1.0
        residuals.append(float(np.linalg.norm(n0 @ coeffs - rhs) / scale))
        boundary = np.zeros((patch.size, times.size), dtype=complex)
        boundary[:, 1:] = coeffs.reshape(patch.size, -1)
        values.append(boundary)
        traces.append(out1[face] + (n1 @ coeffs).reshape(patch.size, -1))
    matching = max(residuals, default=0.0)

    active = (times > delta + 1e-9 * dataset.time_step) & (
        times < window - delta - 1e-9 * dataset.time_step
    )
    h_values = np.stack(values) if values else np.zeros((0,) + dataset.basis.shape[1:])
    h_traces = np.stack(traces) if traces else np.zeros_like(h_values)
    fit = 0.0
    if inner_basis is not None:
        targets = np.stack([g.samples for g in inner_basis])
        span = (h_values * active).reshape(len(h_values), -1).T
        u2, s2, vh2 = np.linalg.svd(span, full_matrices=False)
        keep2 = s2 > cutoff * s2[0]
        u2, s2, vh2 = u2[:, keep2], s2[keep2], vh2[keep2]
        rhs = (targets * active).reshape(len(targets), -1).T
        alpha = vh2.conj().T @ ((u2.conj().T @ rhs) / s2[:, None])
        fitted = span @ alpha
        fit = float(np.linalg.norm(fitted - rhs) / (np.linalg.norm(rhs) or 1.0))
        h_values = targets
        h_traces = np.tensordot(alpha.T, h_traces, 1)
    worst = max(matching, fit)
    if worst > threshold:
        message = f"propagation residual {worst:.3e} above {threshold:.1e}"
        LOGGER.warning(message)
        warnings.warn(IllPosednessWarning(message, residual=worst), stacklevel=2)

    inner_extents = grid.extents[:-1] + (grid.extents[-1] - depth,)
    inner_grid = replace(grid, extents=inner_extents)
    inner_patch = patch.with_window(window - delta, t_min=delta)
    return DtNDataset(
        inner_grid,
        inner_patch,
        times,
        h_values * active,
        h_traces * active,
        dict(dataset.provenance),
    ).with_provenance(
        propagated_layers=inner_layer,
        delta=repr(delta),
        matching_residual=f"{matching:.3e}",
        fit_residual=f"{fit:.3e}",
        strip_rank=int(keep.sum()),
    )
