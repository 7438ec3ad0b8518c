"""Pointwise recovery of the normal-form coefficients from sliced adjoint fields."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import write_container
from .dtn import parallel_map
from .errors import AssemblyError, DimensionError, RankDeficiencyError
from .models import GridSpec
from .optics import SliceBundle
from .semigeodesic import NormalFormCoefficients, conformal_potential

LOGGER = logging.getLogger(__name__)

SIGMA_CUT = 1e-8
MIN_OVERSAMPLE = 2
ROW_FLOOR = 1e-3
MAX_CONDITION = 1e6
MAX_RESIDUAL = 0.5
RECONSTRUCTION_FILE = "reconstruction.clrc"
SUMMARY_FILE = "summary.txt"


def unknown_names(dim: int) -> list[str]:
    if dim == 1:
        return ["c"]
    return ["metric_11", "b_1", "c"]


def required_rows(dim: int) -> int:
    if dim == 1:
        return 1
    return MIN_OVERSAMPLE * len(unknown_names(dim))


def second_difference(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Central second difference with one-sided four-point stencils at both ends."""
    v = np.moveaxis(np.asarray(values), axis, -1)
    if v.shape[-1] < 4:
        raise DimensionError(f"second differences need four nodes, got {v.shape[-1]}")
    out = np.empty_like(v)
    out[..., 1:-1] = v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]
    out[..., 0] = 2 * v[..., 0] - 5 * v[..., 1] + 4 * v[..., 2] - v[..., 3]
    out[..., -1] = 2 * v[..., -1] - 5 * v[..., -2] + 4 * v[..., -3] - v[..., -4]
    return np.moveaxis(out / h**2, -1, axis)


@dataclass(frozen=True, slots=True)
class StencilSet:
    """Derivatives of every slice, shape (sources, nodes, layers).

    ``edge`` marks nodes whose spatial stencils are one-sided.
    """

    dim: int
    values: np.ndarray
    second_time: np.ndarray
    second_normal: np.ndarray
    first_tangential: np.ndarray | None
    second_tangential: np.ndarray | None
    edge: np.ndarray

    @classmethod
    def from_bundle(cls, bundle: SliceBundle) -> StencilSet:
        values = bundle.values
        h_n = bundle.spacing[-1]
        edge = np.zeros(values.shape[1:], dtype=bool)
        edge[:, [0, -1]] = True
        first = second = None
        if bundle.dim == 2:
            h_t = bundle.spacing[0]
            first = np.gradient(values, h_t, axis=1, edge_order=2)
            second = second_difference(values, h_t, axis=1)
            edge[[0, -1], :] = True
        return cls(
            dim=bundle.dim,
            values=values,
            second_time=bundle.second,
            second_normal=second_difference(values, h_n, axis=2),
            first_tangential=first,
            second_tangential=second,
            edge=edge,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass(frozen=True, slots=True)
class PointwiseSystem:
    """Rows sum g^{jk} v_jk + B^j v_j - C v = v_tt - v_nn, one per source."""

    node: tuple[int, int]
    matrix: np.ndarray
    rhs: np.ndarray
    sources: tuple[int, ...]
    names: tuple[str, ...]


@dataclass(frozen=True, slots=True)
class PointSolution:
    node: tuple[int, int]
    unknowns: np.ndarray
    residual: float
    condition: float
    sigma_min: float


def assemble_system(
    stencils: StencilSet,
    node: tuple[int, int],
    sources: Sequence[int] | None = None,
) -> PointwiseSystem:
    """Rows of one node, each scaled to unit max; rows far below the strongest drop."""
    p, j = node
    ids = range(stencils.values.shape[0]) if sources is None else sources
    v = stencils.values[:, p, j]
    columns = [-v]
    if stencils.dim == 2:
        columns = [
            stencils.second_tangential[:, p, j],
            stencils.first_tangential[:, p, j],
            -v,
        ]
    rows = np.stack(columns, axis=1)[list(ids)]
    rhs = (stencils.second_time[:, p, j] - stencils.second_normal[:, p, j])[list(ids)]
    scale = np.abs(rows).max(axis=1)
    keep = scale > ROW_FLOOR * scale.max(initial=0.0)
    keep &= scale > 0
    matrix = rows[keep] / scale[keep, None]
    rhs = rhs[keep] / scale[keep]
    need = required_rows(stencils.dim)
    if matrix.shape[0] < need:
        raise AssemblyError(
            f"point {node} has {matrix.shape[0]} usable rows, needs {need}",
            deficit=need - matrix.shape[0],
        )
    kept = tuple(int(i) for i, k in zip(ids, keep) if k)
    return PointwiseSystem(node, matrix, rhs, kept, tuple(unknown_names(stencils.dim)))


def solve_point(
    system: PointwiseSystem, *, sigma_cut: float = SIGMA_CUT
) -> PointSolution:
    """Least-squares solve by SVD; a near-null direction is reported, not truncated."""
    u, s, vh = np.linalg.svd(system.matrix, full_matrices=False)
    count = len(system.names)
    if s.size < count or s[-1] <= sigma_cut * s[0]:
        raise RankDeficiencyError(
            f"point {system.node}: sigma_min {s[-1]:.3e}"
            f" below {sigma_cut:g} * {s[0]:.3e}",
            null_direction=vh[-1].conj(),
        )
    unknowns = vh.conj().T @ ((u.conj().T @ system.rhs) / s)
    norm = np.linalg.norm(system.rhs)
    residual = np.linalg.norm(system.matrix @ unknowns - system.rhs)
    return PointSolution(
        node=system.node,
        unknowns=unknowns,
        residual=float(residual / norm) if norm else float(residual),
        condition=float(s[0] / s[-1]),
        sigma_min=float(s[-1]),
    )


def region_grid(
    spacing: tuple[float, ...], shape: tuple[int, int], step: float
) -> GridSpec:
    if len(spacing) == 1:
        extents = ((shape[1] - 1) * spacing[0],)
    else:
        extents = ((shape[0] - 1) * spacing[0], (shape[1] - 1) * spacing[1])
    return GridSpec(extents=extents, spacing=spacing, time_step=step, horizon=step)


def unpack_potentials(
    metric: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    spacing: tuple[float, ...],
    *,
    step: float = 1.0,
    adjoint: bool = True,
    g_hat: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """A = g^{-1}(B - div g)/(2i), V1 = C - gAA + i d(gA), V-hat = V1 - conformal part.

    Arrays are (nodes, layers). Slices of the adjoint problem carry conjugated
    potentials, which are conjugated back when ``adjoint`` is set. ``g_hat`` is
    the prescribed density squared of a weighted operator; None means the
    Riemannian weight det(g^{jk})^{-1} of the recovered tangential block.
    """
    grid = region_grid(spacing, metric.shape, step)
    if len(spacing) == 1:
        a = np.zeros(c.shape, dtype=complex)
        v1 = np.conj(c) if adjoint else np.asarray(c)
        fields = {
            "metric": np.ones_like(metric),
            "potential_a": a,
            "potential_v1": v1,
            "potential_v_hat": v1.copy(),
        }
        if g_hat is not None:
            conformal = conformal_potential(
                np.ones(metric.shape[1:] + (0, 0)), np.asarray(g_hat)[0], grid
            )
            fields["potential_v_hat"] = v1 - conformal[None]
        return fields
    h_t = spacing[0]
    singular = ~(np.abs(metric) > 1e-12)
    safe = np.where(singular, np.nan, metric)
    divergence = np.gradient(safe, h_t, axis=0, edge_order=2)
    a = (b - divergence) / (2j * safe)
    v1 = c - safe * a * a + 1j * np.gradient(safe * a, h_t, axis=0, edge_order=2)
    if adjoint:
        a, v1 = np.conj(a), np.conj(v1)
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = 1.0 / safe if g_hat is None else np.asarray(g_hat, dtype=float)
        conformal = conformal_potential(safe[..., None, None], weight, grid)
    return {
        "metric": safe,
        "potential_a": a,
        "potential_v1": v1,
        "potential_v_hat": v1 - conformal,
    }


def relative_errors(recovered: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(L-inf, L2) errors over finite nodes, relative to max(|truth|, 1)."""
    finite = np.isfinite(recovered)
    if not finite.any():
        return float("nan"), float("nan")
    diff = np.abs(recovered[finite] - truth[finite])
    scale_inf = max(float(np.abs(truth[finite]).max()), 1.0)
    scale_two = max(float(np.linalg.norm(truth[finite])), float(np.sqrt(finite.sum())))
    return float(diff.max() / scale_inf), float(np.linalg.norm(diff) / scale_two)


def region_values(array: np.ndarray, bundle: SliceBundle) -> np.ndarray:
    """Restrict a full-grid array to the slice region, shape (nodes, layers)."""
    region = bundle.region
    layers = slice(0, region.layers)
    if bundle.dim == 1:
        return np.asarray(array)[layers][None]
    return np.asarray(array)[region.start : region.stop, layers]


def truth_on_region(
    nf: NormalFormCoefficients, bundle: SliceBundle
) -> dict[str, np.ndarray]:
    if bundle.dim == 1:
        shape = (1, bundle.region.layers)
        return {
            "metric": np.ones(shape),
            "potential_a": np.zeros(shape),
            "potential_v1": region_values(nf.potential_v1, bundle),
            "potential_v_hat": region_values(nf.potential_v_hat, bundle),
        }
    return {
        "metric": region_values(nf.tangential_metric[..., 0, 0], bundle),
        "potential_a": region_values(nf.potential_a[..., 0], bundle),
        "potential_v1": region_values(nf.potential_v1, bundle),
        "potential_v_hat": region_values(nf.potential_v_hat, bundle),
    }


@dataclass(slots=True)
class ReconstructionResult:
    spacing: tuple[float, ...]
    fields: dict[str, np.ndarray]
    residual: np.ndarray
    condition: np.ndarray
    flags: list[str] = field(default_factory=list)
    errors: dict[str, tuple[float, float]] = field(default_factory=dict)
    truth: dict[str, np.ndarray] = field(default_factory=dict)
    extractor: str = ""

    def summary(self) -> dict[str, str]:
        finite = np.isfinite(self.residual)
        entries = {
            "extractor": self.extractor,
            "nodes": " ".join(str(v) for v in self.residual.shape),
            "solved": str(int(finite.sum())),
            "flags": str(len(self.flags)),
            "residual.max": (
                repr(float(self.residual[finite].max())) if finite.any() else "nan"
            ),
            "condition.max": (
                repr(float(self.condition[finite].max())) if finite.any() else "nan"
            ),
        }
        for name, (linf, l2) in self.errors.items():
            entries[f"error.{name}.linf"] = repr(linf)
            entries[f"error.{name}.l2"] = repr(l2)
        return entries


def reconstruct(
    bundle: SliceBundle,
    *,
    truth: NormalFormCoefficients | None = None,
    adjoint: bool = True,
    threads: int = 1,
    sigma_cut: float = SIGMA_CUT,
    max_condition: float = MAX_CONDITION,
    max_residual: float = MAX_RESIDUAL,
    g_hat: np.ndarray | None = None,
) -> ReconstructionResult:
    """Solve every region point, unpack A and V, and compare with ``truth`` when given.

    Nodes whose stencils are one-sided, or whose solve exceeds ``max_condition``
    or ``max_residual``, are flagged and left unsolved. ``g_hat`` fixes the
    density of a weighted operator class on the region grid.
    """
    stencils = StencilSet.from_bundle(bundle)
    shape = stencils.shape
    points = [(p, j) for p in range(shape[0]) for j in range(shape[1])]
    flags: list[str] = []

    def solve(node: tuple[int, int]) -> PointSolution | str:
        if stencils.edge[node]:
            return "one-sided"
        try:
            system = assemble_system(stencils, node)
        except AssemblyError as err:
            LOGGER.warning("Point %s is short of rows: %s", node, err)
            return "short"
        try:
            solution = solve_point(system, sigma_cut=sigma_cut)
        except RankDeficiencyError as err:
            LOGGER.warning("Point %s is rank deficient: %s", node, err)
            return "rank-deficient"
        if solution.condition > max_condition:
            LOGGER.warning("Point %s: condition %.3e", node, solution.condition)
            return "ill-conditioned"
        if solution.residual > max_residual:
            LOGGER.warning("Point %s: relative residual %.3e", node, solution.residual)
            return "inconsistent"
        return solution

    solutions = parallel_map(solve, points, threads)
    count = len(unknown_names(bundle.dim))
    unknowns = np.full(shape + (count,), np.nan, dtype=complex)
    residual = np.full(shape, np.nan)
    condition = np.full(shape, np.nan)
    for node, solution in zip(points, solutions):
        if isinstance(solution, str):
            flags.append(f"{solution} {node}")
            continue
        unknowns[node] = solution.unknowns
        residual[node] = solution.residual
        condition[node] = solution.condition

    if bundle.dim == 1:
        metric = np.ones(shape)
        b = np.zeros(shape, dtype=complex)
    else:
        metric = unknowns[..., 0].real
        b = unknowns[..., 1]
    fields = unpack_potentials(
        metric,
        b,
        unknowns[..., -1],
        bundle.spacing,
        step=bundle.step,
        adjoint=adjoint,
        g_hat=g_hat,
    )
    for node in zip(*np.nonzero(np.isfinite(metric) & (metric <= 0))):
        flags.append(f"metric not positive definite {tuple(int(i) for i in node)}")
    result = ReconstructionResult(
        spacing=bundle.spacing,
        fields=fields,
        residual=residual,
        condition=condition,
        flags=flags,
        extractor=bundle.extractor,
    )
    if truth is not None:
        expected = truth_on_region(truth, bundle)
        result.truth = expected
        result.errors = {
            name: relative_errors(fields[name], expected[name]) for name in expected
        }
        LOGGER.info("Reconstruction errors: %s", result.errors)
    return result


def select_sources(
    bundle: SliceBundle,
    count: int,
    *,
    seed: int = 0,
    probes: int = 8,
) -> list[int]:
    """Greedy choice of ``count`` sources that raises sigma_min at sampled points."""
    stencils = StencilSet.from_bundle(bundle)
    rng = np.random.default_rng(seed)
    total = stencils.shape[0] * stencils.shape[1]
    sampled = rng.choice(total, size=min(probes, total), replace=False)
    points = [divmod(int(i), stencils.shape[1]) for i in sampled]
    names = len(unknown_names(bundle.dim))
    candidates = list(rng.permutation(bundle.sources))
    chosen: list[int] = []

    def score(ids: list[int]) -> float:
        values = []
        for node in points:
            rows = []
            for i in ids:
                v = stencils.values[i, node[0], node[1]]
                if bundle.dim == 1:
                    rows.append([-v])
                else:
                    rows.append([
                        stencils.second_tangential[i, node[0], node[1]],
                        stencils.first_tangential[i, node[0], node[1]],
                        -v,
                    ])
            matrix = np.asarray(rows)
            norms = np.abs(matrix).max(axis=1, keepdims=True)
            matrix = matrix / np.where(norms > 0, norms, 1.0)
            sigma = np.linalg.svd(matrix, compute_uv=False)
            values.append(sigma[min(len(ids), names) - 1])
        return float(np.mean(values))

    while len(chosen) < min(count, bundle.sources):
        remaining = [c for c in candidates if c not in chosen]
        best = max(remaining, key=lambda c: score(chosen + [c]))
        chosen.append(int(best))
    LOGGER.debug("Selected sources %s", chosen)
    return chosen


def save_reconstruction(directory: Path, result: ReconstructionResult) -> dict[str, str]:
    directory.mkdir(parents=True, exist_ok=True)
    fields = dict(result.fields)
    fields["residual"] = result.residual
    fields["condition"] = result.condition
    fields.update({f"truth.{name}": value for name, value in result.truth.items()})
    digest = write_container(
        directory / RECONSTRUCTION_FILE,
        fields,
        dims=result.residual.shape,
        spacing=result.spacing if len(result.spacing) == 2 else (1.0,) + result.spacing,
        attrs={"extractor": result.extractor, "flags": result.flags},
    )
    entries = result.summary()
    entries["sha256.reconstruction"] = digest
    lines = [f"{key} = {entries[key]}" for key in sorted(entries)]
    (directory / SUMMARY_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    LOGGER.info("Saved reconstruction to %s", directory)
    return {RECONSTRUCTION_FILE: digest}
