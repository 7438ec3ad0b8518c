"""Staged experiment runs, the artifact manifest and the invariant suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
import json
import logging
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .boundary_control import eigen_floor, form_grams, lambda0_form
from .characteristic import CharacteristicGeometry, interior_q
from .config import SUITES, ExperimentConfig
from .container import file_digest, load_coefficients, save_coefficients, write_container
from .dtn import (
    DtNDataset,
    add_noise,
    assemble_dtn,
    bump_basis,
    impulse_basis,
    lambda_prime,
    load_dataset,
    parallel_map,
    propagate_dtn,
    save_dataset,
    time_reversed_adjoint,
)
from .errors import BclabError, StageError, ValidationError
from .generators import boundary_phase, build_family, gauge_profile, shear_map
from .models import BoundaryPatch, BoundarySignal, CoefficientField, GridSpec
from .optics import (
    AdjointFieldExtractor,
    ExtractionPlan,
    ForwardMeasurement,
    ProbeBudget,
    ProbeExtractor,
    ProbeSpec,
    SliceRegion,
    build_probe,
    probe_residual,
    residual_slope,
    slice_field,
)
from .plots import emit_plots
from .recovery import (
    reconstruct,
    region_values,
    save_reconstruction,
    select_sources,
)
from .semigeodesic import (
    NormalFormCoefficients,
    SemiGeodesicChart,
    build_chart,
    normal_form,
    save_chart,
)
from .solver import arrival_times, neumann_trace, solve_adjoint, solve_forward
from .transforms import apply_diffeomorphism, apply_gauge

LOGGER = logging.getLogger(__name__)

MANIFEST = "manifest.json"
REPORT = "report.json"
DIAGNOSTICS = "diagnostics.json"
SLICES_FILE = "slices.clrc"
SPEED_TOLERANCE = 1e-8
RECOVERY_MARGIN = 3
RUN_SECTIONS = (
    "grid",
    "patch",
    "coefficients",
    "basis",
    "schedules",
    "probe",
    "recovery",
    "propagation",
    "noise",
)

DEFAULT_THRESHOLDS = {
    "gauge": 1e-2,
    "diffeo": 2e-2,
    "green": 1e-2,
    "coercivity": 0.0,
    "causality": SPEED_TOLERANCE,
    "time_reversal": 1e-2,
    "refinement": 3.5,
}


@dataclass(slots=True)
class StageRecord:
    key: str
    artifacts: dict[str, str] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    cached: bool = False

    def to_json(self) -> dict[str, Any]:
        return {"key": self.key, "artifacts": self.artifacts, "summary": self.summary}


@dataclass(slots=True)
class RunResult:
    output: Path
    stages: dict[str, StageRecord] = field(default_factory=dict)
    exit_code: int = 0


class Experiment:
    """Lazily built grid, coefficients, chart and normal form of one configuration."""

    def __init__(self, config: ExperimentConfig) -> None:
        self.config = config
        self.grid = config.grid.build()
        self.patch = config.patch.build(self.grid)
        self.output = config.output

    @cached_property
    def coeffs(self) -> CoefficientField:
        section = self.config.coefficients
        if section.path is not None:
            coeffs = load_coefficients(section.path)
            if coeffs.grid.shape != self.grid.shape:
                raise ValidationError(
                    f"{section.path} is sampled on {coeffs.grid.shape},"
                    f" config on {self.grid.shape}"
                )
            return CoefficientField.build(
                self.grid,
                coeffs.metric_inv,
                coeffs.potential_a,
                coeffs.potential_v,
                coeffs.density,
            )
        return build_family(section.family, self.grid, dict(section.params))

    @cached_property
    def normal_form(self) -> NormalFormCoefficients:
        return normal_form(self.chart.coeffs_hat)

    @cached_property
    def chart(self) -> SemiGeodesicChart:
        return build_chart(self.coeffs, self.patch)

    def basis(
        self, grid: GridSpec | None = None, patch: BoundaryPatch | None = None
    ) -> list[BoundarySignal]:
        grid = grid or self.grid
        patch = patch or self.patch
        section = self.config.basis
        if section.kind == "impulse":
            return impulse_basis(grid, patch)
        return bump_basis(
            grid,
            patch,
            centers=section.centers,
            shifts=section.shifts,
            spatial_width=section.spatial_width,
            temporal_width=section.temporal_width,
        )

    def stage_dir(self, name: str) -> Path:
        return self.output / name


def _hashes(directory: Path, root: Path) -> dict[str, str]:
    return {
        str(path.relative_to(root)): file_digest(path)
        for path in sorted(directory.rglob("*"))
        if path.is_file()
    }


def read_run_manifest(output: Path) -> dict[str, Any]:
    path = output / MANIFEST
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path} is not valid JSON") from err


def _write_manifest(
    output: Path,
    config: ExperimentConfig,
    records: dict[str, StageRecord],
    previous: dict[str, Any],
) -> None:
    stages = dict(previous.get("stages", {}))
    stages.update({name: record.to_json() for name, record in records.items()})
    manifest = {
        "format": "bclab-run",
        "seed": config.seed,
        "config": config.section_digest(RUN_SECTIONS),
        "stages": stages,
    }
    output.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    (output / MANIFEST).write_text(text, encoding="utf-8")


def _is_cached(record: dict[str, Any] | None, key: str, root: Path) -> bool:
    if not record or record.get("key") != key:
        return False
    for name, digest in record.get("artifacts", {}).items():
        path = root / name
        if not path.exists() or file_digest(path) != digest:
            return False
    return bool(record.get("artifacts"))


def _linearity_residual(exp: Experiment, dataset: DtNDataset) -> float:
    if len(dataset) < 2:
        return 0.0
    combined = dataset.signal(0) + dataset.signal(1) * 2.0
    field_ = solve_forward(exp.coeffs, combined, storage="collar", collar_depth=0.0)
    trace = neumann_trace(field_, exp.coeffs, dataset.patch).samples
    expected = dataset.traces[0] + 2.0 * dataset.traces[1]
    scale = np.linalg.norm(expected) or 1.0
    return float(np.linalg.norm(trace - expected) / scale)


def _forward_dataset(exp: Experiment) -> DtNDataset:
    """Clean forward data, shared through the content-addressed user cache."""
    config = exp.config
    key = config.section_digest(["basis"], [exp.coeffs.digest(), repr(exp.patch)])
    cached = config.cache_dir / "datasets" / key
    if (cached / "manifest.txt").exists():
        try:
            LOGGER.info("Forward dataset cache hit %s", key[:12])
            return load_dataset(cached)
        except BclabError as err:
            LOGGER.warning("Ignoring broken cache entry %s: %s", cached, err)
    dataset = assemble_dtn(
        exp.coeffs, exp.basis(), threads=config.threads, seed=config.seed
    )
    try:
        save_dataset(cached, dataset)
    except OSError as err:
        LOGGER.warning("Could not populate dataset cache %s: %s", cached, err)
    return dataset


def stage_forward(exp: Experiment) -> dict[str, Any]:
    directory = exp.stage_dir("forward")
    save_coefficients(directory / "coefficients.clrc", exp.coeffs)
    save_chart(directory / "chart.clrc", exp.chart)
    dataset = _forward_dataset(exp)
    linearity = _linearity_residual(exp, dataset)
    dataset = add_noise(dataset, exp.config.noise.level, exp.config.seed)
    save_dataset(directory / "dataset", dataset.with_provenance(seed=exp.config.seed))
    return {
        "elements": len(dataset),
        "linearity_residual": float(f"{linearity:.3e}"),
        "chart_block_residual": float(f"{exp.chart.block_residual:.3e}"),
    }


def stage_dtn(exp: Experiment) -> dict[str, Any]:
    directory = exp.stage_dir("dtn")
    dataset = load_dataset(exp.stage_dir("forward") / "dataset")
    nf = exp.normal_form
    g_boundary, g_normal = nf.boundary_data(exp.patch)
    prime = lambda_prime(dataset, g_boundary, g_normal)
    save_dataset(directory / "prime", prime)
    summary: dict[str, Any] = {"gauge_residual": float(f"{nf.gauge_residual:.3e}")}
    if not exp.coeffs.is_self_adjoint:
        adjoint = time_reversed_adjoint(prime)
        save_dataset(directory / "adjoint", adjoint)
        summary["adjoint_projection_residual"] = adjoint.provenance[
            "adjoint_projection_residual"
        ]
    write_container(
        directory / "normal_form.clrc",
        {
            "tangential_metric": nf.tangential_metric,
            "potential_a": nf.potential_a,
            "potential_v1": nf.potential_v1,
            "potential_v_hat": nf.potential_v_hat,
            "g_hat": nf.g_hat,
        },
        dims=nf.grid.shape,
        spacing=nf.grid.spacing,
        attrs={"time_step": nf.grid.time_step, "horizon": nf.grid.horizon},
    )
    return summary


def _slice_region(exp: Experiment, nf: NormalFormCoefficients) -> SliceRegion:
    """Requested region plus a margin, so reported nodes have centered stencils."""
    section = exp.config.recovery
    layers = min(section.layers + 1, nf.grid.shape[-1])
    if nf.grid.dim == 1:
        return SliceRegion(0, 1, layers, section.stride)
    start = exp.patch.start if section.start is None else section.start
    stop = exp.patch.stop if section.stop is None else section.stop
    if section.slices == "probe":
        lower, upper = exp.patch.start, exp.patch.stop
    else:
        lower, upper = 0, nf.grid.shape[0]
    start = max(lower, start - RECOVERY_MARGIN)
    stop = min(upper, stop + RECOVERY_MARGIN)
    return SliceRegion(start, stop, layers, section.stride)


def _extraction_plan(config: ExperimentConfig) -> ExtractionPlan:
    return ExtractionPlan(
        wavenumbers=tuple(config.schedules.wavenumbers),
        mollifiers=tuple(config.schedules.mollifiers),
        plateau=config.probe.plateau,
        order=config.probe.order,
        k_tolerance=config.probe.k_tolerance,
        eps_schedule=tuple(config.schedules.epsilons),
    )


def probe_sweep(exp: Experiment, dataset: DtNDataset) -> dict[str, Any]:
    """Residual of u_N against k for the configured probe order."""
    config = exp.config
    nf = exp.normal_form
    coords = dataset.patch.coordinates(nf.grid)
    y0 = float(coords[coords.size // 2])
    window = float(dataset.times[-1])
    wavenumbers = list(config.probe.residual_wavenumbers)
    residuals = []
    for k in wavenumbers:
        spec = ProbeSpec(
            k, 0.5 * window, y0, config.probe.plateau, 0.0, config.probe.order
        )
        probe = build_probe(nf, spec, dataset.patch, dataset.times)
        residuals.append(probe_residual(probe))
    positive = all(r > 0 for r in residuals)
    return {
        "order": config.probe.order,
        "wavenumbers": wavenumbers,
        "residuals": residuals,
        "slope": residual_slope(wavenumbers, residuals) if positive else None,
    }


def stage_reconstruct(
    exp: Experiment, *, probe_budget: int | None = None
) -> dict[str, Any]:
    config = exp.config
    directory = exp.stage_dir("reconstruct")
    prime = load_dataset(exp.stage_dir("dtn") / "prime")
    adjoint_dir = exp.stage_dir("dtn") / "adjoint"
    has_adjoint = (adjoint_dir / "manifest.txt").exists()
    adjoint = load_dataset(adjoint_dir) if has_adjoint else None
    nf = exp.normal_form
    region = _slice_region(exp, nf)
    sources = prime.signals()
    budget = ProbeBudget(config.probe.budget if probe_budget is None else probe_budget)
    if config.recovery.slices == "probe":
        g_boundary, g_normal = nf.boundary_data(exp.patch)
        extractor = ProbeExtractor(
            prime,
            nf,
            ForwardMeasurement(exp.coeffs, g_boundary=g_boundary, g_normal=g_normal),
            plan=_extraction_plan(config),
            budget=budget,
            adjoint=adjoint,
        )
        if config.recovery.sources is not None:
            rng = np.random.default_rng(config.seed)
            ids = sorted(rng.choice(len(sources), config.recovery.sources, replace=False))
            sources = [sources[i] for i in ids]
    else:
        LOGGER.warning("Oracle slices: reading adjoint fields of the true operator")
        extractor = AdjointFieldExtractor(nf.to_field())
    spacing = nf.grid.spacing
    bundle = slice_field(
        extractor,
        sources,
        region,
        spacing=spacing,
        window=float(prime.times[-1]),
        time_step=prime.time_step,
        threads=config.threads,
    )
    if config.recovery.slices != "probe" and config.recovery.sources is not None:
        bundle = bundle.subset(
            select_sources(bundle, config.recovery.sources, seed=config.seed)
        )
    weighted = exp.chart.coeffs_hat.density is not None
    result = reconstruct(
        bundle,
        truth=nf,
        threads=config.threads,
        sigma_cut=config.recovery.sigma_cut,
        max_condition=config.recovery.max_condition,
        g_hat=region_values(nf.g_hat, bundle) if weighted else None,
    )
    save_reconstruction(directory, result)
    write_container(
        directory / SLICES_FILE,
        {"values": bundle.values, "first": bundle.first, "second": bundle.second},
        dims=bundle.values.shape,
        spacing=(1.0,) * (3 - len(spacing)) + tuple(spacing),
        attrs={"time": bundle.time, "step": bundle.step, "extractor": bundle.extractor},
    )
    diagnostics = {"probe": probe_sweep(exp, prime), "probe_solves": budget.used}
    (directory / DIAGNOSTICS).write_text(
        json.dumps(diagnostics, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    summary: dict[str, Any] = {"flags": len(result.flags), "sources": bundle.sources}
    summary.update({f"error.{k}.linf": v[0] for k, v in result.errors.items()})
    return summary


def stage_propagate(exp: Experiment) -> dict[str, Any]:
    section = exp.config.propagation
    directory = exp.stage_dir("propagate")
    if section.inner_layer <= 0:
        LOGGER.info("Propagation disabled (inner_layer = %d)", section.inner_layer)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "skipped.txt").write_text("inner_layer = 0\n", encoding="utf-8")
        return {"skipped": True}
    dataset = load_dataset(exp.stage_dir("forward") / "dataset")
    propagated = propagate_dtn(
        dataset,
        exp.coeffs,
        section.inner_layer,
        cutoff=section.cutoff,
        threshold=section.threshold,
        threads=exp.config.threads,
    )
    save_dataset(directory / "dataset", propagated)
    return {
        "delta": propagated.provenance["delta"],
        "matching_residual": propagated.provenance["matching_residual"],
    }


def stage_plots(exp: Experiment) -> dict[str, Any]:
    written = emit_plots(exp.output)
    return {"files": len(written)}


STAGE_FUNCTIONS: dict[str, tuple[Callable[..., dict[str, Any]], list[str], list[str]]] = {
    "forward": (stage_forward, ["grid", "patch", "coefficients", "basis", "noise"], []),
    "dtn": (stage_dtn, [], ["forward"]),
    "reconstruct": (stage_reconstruct, ["recovery", "schedules", "probe"], ["dtn"]),
    "propagate": (stage_propagate, ["propagation"], ["forward"]),
    "plots": (stage_plots, [], ["reconstruct"]),
}


def run_experiment(
    config: ExperimentConfig,
    stages: Sequence[str] | None = None,
    *,
    probe_budget: int | None = None,
) -> RunResult:
    """Run the requested stages in pipeline order; unchanged stages are skipped."""
    requested = list(stages or config.stages)
    order = [name for name in STAGE_FUNCTIONS if name in requested]
    exp = Experiment(config)
    previous = read_run_manifest(config.output)
    done = previous.get("stages", {})
    result = RunResult(config.output)
    for name in order:
        func, sections, upstream = STAGE_FUNCTIONS[name]
        directory = exp.stage_dir(name)
        upstream_hashes = []
        for parent in upstream:
            record = result.stages.get(parent)
            if record is not None:
                artifacts = record.artifacts
            else:
                artifacts = done.get(parent, {}).get("artifacts", {})
            upstream_hashes.extend(sorted(artifacts.values()))
        key = config.section_digest(sections, upstream_hashes)
        if _is_cached(done.get(name), key, config.output):
            LOGGER.info("Stage %s is up to date, skipping", name)
            cached = done[name]
            result.stages[name] = StageRecord(
                key,
                dict(cached["artifacts"]),
                dict(cached.get("summary", {})),
                cached=True,
            )
            continue
        LOGGER.info("Running stage %s", name)
        try:
            if name == "reconstruct":
                summary = func(exp, probe_budget=probe_budget)
            else:
                summary = func(exp)
        except BclabError as err:
            raise StageError(name, directory, err) from err
        record = StageRecord(key, _hashes(directory, config.output), summary)
        result.stages[name] = record
        _write_manifest(config.output, config, result.stages, previous)
    return result


@dataclass(slots=True)
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "value": self.value,
            "threshold": self.threshold,
            "passed": self.passed,
            "detail": self.detail,
        }


def _relative_distance(a: DtNDataset, b: DtNDataset) -> float:
    weights = a.weights()
    diff = np.sqrt(np.sum(np.abs(a.traces - b.traces) ** 2 * weights))
    scale = np.sqrt(np.sum(np.abs(a.traces) ** 2 * weights))
    return float(diff / scale) if scale else float(diff)


def _sample(basis: list[BoundarySignal], count: int) -> list[BoundarySignal]:
    if len(basis) <= count:
        return basis
    picks = np.linspace(0, len(basis) - 1, count).round().astype(int)
    return [basis[i] for i in picks]


def check_gauge(exp: Experiment, threshold: float) -> CheckResult:
    config = exp.config
    basis = _sample(exp.basis(), config.verify.pairs)
    reference = assemble_dtn(exp.coeffs, basis, threads=config.threads)
    if config.verify.break_gauge:
        gauge = boundary_phase(exp.grid)
        gauged = apply_gauge(exp.coeffs, gauge, exp.patch, allow_patch_phase=True)
    else:
        gauge = gauge_profile(exp.grid)
        gauged = apply_gauge(exp.coeffs, gauge, exp.patch)
    gauged_data = assemble_dtn(gauged, basis, threads=config.threads)
    value = _relative_distance(reference, gauged_data)
    detail = {"boundary_phase": gauge.boundary_phase(exp.patch)}
    return CheckResult("gauge", value, threshold, value <= threshold, detail)


def check_diffeo(exp: Experiment, threshold: float) -> CheckResult:
    config = exp.config
    basis = _sample(exp.basis(), config.verify.pairs)
    mapping = shear_map(exp.grid, patch=exp.patch)
    moved = apply_diffeomorphism(exp.coeffs, mapping)
    reference = assemble_dtn(exp.coeffs, basis, threads=config.threads)
    moved_data = assemble_dtn(moved, basis, threads=config.threads)
    value = _relative_distance(reference, moved_data)
    return CheckResult("diffeo", value, threshold, value <= threshold)


def _collar_setup(
    exp: Experiment,
) -> tuple[CoefficientField, CharacteristicGeometry, list]:
    field_coeffs = exp.normal_form.to_field()
    grid = field_coeffs.grid
    geometry = CharacteristicGeometry.build(
        grid, exp.patch, exp.patch.window, field_coeffs.max_wave_speed()
    )
    basis = _sample(exp.basis(grid, exp.patch), exp.config.verify.pairs)
    return field_coeffs, geometry, basis


def check_green(exp: Experiment, threshold: float) -> CheckResult:
    """Q from stored fields on the plane tau = 0 against the boundary form."""
    coeffs, geometry, basis = _collar_setup(exp)
    pairs = [(i, (i + 1) % len(basis)) for i in range(len(basis))]
    forward = parallel_map(lambda f: solve_forward(coeffs, f), basis, exp.config.threads)
    adjoint = parallel_map(lambda f: solve_adjoint(coeffs, f), basis, exp.config.threads)
    weights = exp.patch.weights(coeffs.grid)
    errors = []
    for i, j in pairs:
        lf = neumann_trace(forward[i], coeffs, exp.patch)
        lg = neumann_trace(adjoint[j], coeffs.conjugated(), exp.patch)
        boundary = lambda0_form(basis[i], basis[j], lf, lg, node_weights=weights)
        interior = interior_q(forward[i], adjoint[j], coeffs, geometry)
        errors.append(abs(interior - boundary) / max(abs(interior), 1e-300))
    value = float(max(errors, default=0.0))
    return CheckResult(
        "green", value, threshold, value <= threshold, {"pairs": len(pairs)}
    )


def check_coercivity(exp: Experiment, threshold: float) -> CheckResult:
    """Smallest eigenvalue of the Q Gram built over the (scaled) window."""
    config = exp.config
    coeffs, geometry, _ = _collar_setup(exp)
    window = exp.patch.window * config.verify.window_scale
    grid = coeffs.grid.with_horizon(max(coeffs.grid.horizon, window))
    coeffs = replace(coeffs, grid=grid)
    patch = replace(exp.patch, window=window, horizon=grid.horizon)
    basis = _sample(exp.basis(grid, patch), config.verify.pairs)
    dataset = assemble_dtn(coeffs, basis, threads=config.threads)
    gram_q, _ = form_grams(dataset)
    floor = eigen_floor(gram_q)
    bound = geometry.collar_bound()
    passed = floor > threshold and window <= bound * (1 + 1e-12)
    return CheckResult(
        "coercivity", floor, threshold, passed, {"window": window, "collar_bound": bound}
    )


def check_causality(exp: Experiment, threshold: float) -> CheckResult:
    """Fields stay below tolerance * peak ahead of the maximal-speed front."""
    basis = exp.basis()
    source = basis[len(basis) // 2]
    field_ = solve_forward(exp.coeffs, source)
    arrival = arrival_times(exp.coeffs, source)
    times = field_.times.reshape((-1,) + (1,) * exp.grid.dim)
    early = times < arrival[None] - 1e-12
    peak = float(np.abs(field_.values).max()) or 1.0
    leak = float(np.abs(np.where(early, field_.values, 0.0)).max()) / peak
    return CheckResult("causality", leak, threshold, leak <= threshold)


def check_time_reversal(exp: Experiment, threshold: float) -> CheckResult:
    """Pairings of the time-reversed data against directly solved adjoint traces."""
    config = exp.config
    full = assemble_dtn(exp.coeffs, exp.basis(), threads=config.threads)
    adjoint = time_reversed_adjoint(full)
    pairs = config.verify.pairs
    picks = [full.basis.shape[0] * k // pairs for k in range(pairs)]
    ids = sorted(set(i for i in picks if i < len(full)))
    direct = assemble_dtn(
        exp.coeffs, [adjoint.signal(i) for i in ids], adjoint=True, threads=config.threads
    )
    weights = adjoint.weights()
    reflected = adjoint.basis[ids]
    from_data = np.einsum(
        "ipm,jpm,pm->ij", adjoint.traces[ids], np.conj(reflected), weights
    )
    solved = np.einsum("ipm,jpm,pm->ij", direct.traces, np.conj(reflected), weights)
    scale = np.linalg.norm(solved) or 1.0
    value = float(np.linalg.norm(from_data - solved) / scale)
    return CheckResult("time_reversal", value, threshold, value <= threshold)


def trace_refinement(
    extent: float, spacing: float, window: float, *, levels: int = 2
) -> tuple[list[float], list[float]]:
    """Max error of the free half-line trace against f'(t) on halved grids."""
    spacings, errors = [], []
    for level in range(levels):
        h = spacing / 2**level
        grid = GridSpec((extent,), (h,), h / 2, window)
        patch = BoundaryPatch(0, 1, window, window)
        times = grid.times()
        center, width = 0.3 * window, 0.05 * window
        pulse = np.exp(-(((times - center) / width) ** 2))
        slope = -2 * (times - center) / width**2 * pulse
        coeffs = CoefficientField.euclidean(grid)
        f = BoundarySignal(patch, times, pulse[None])
        trace = neumann_trace(
            solve_forward(coeffs, f, storage="collar", collar_depth=0.0), coeffs, patch
        )
        spacings.append(h)
        errors.append(float(np.abs(trace.samples[0] - slope).max()))
    return spacings, errors


def check_refinement(exp: Experiment, threshold: float) -> CheckResult:
    extent = exp.grid.extents[-1]
    window = min(exp.patch.window, extent)
    spacings, errors = trace_refinement(extent, exp.grid.normal_spacing, window)
    ratio = errors[0] / errors[1] if errors[1] else float("inf")
    detail = {"spacings": spacings, "errors": errors}
    return CheckResult("refinement", ratio, threshold, ratio >= threshold, detail)


CHECKS: dict[str, Callable[[Experiment, float], CheckResult]] = {
    "gauge": check_gauge,
    "diffeo": check_diffeo,
    "green": check_green,
    "coercivity": check_coercivity,
    "causality": check_causality,
    "time_reversal": check_time_reversal,
    "refinement": check_refinement,
}


def verify_invariants(
    config: ExperimentConfig,
    suites: Sequence[str] | None = None,
) -> dict[str, Any]:
    """Run the selected checks; failures become report entries, not exceptions."""
    selected = list(suites or config.verify.suites)
    unknown = set(selected) - set(SUITES)
    if unknown:
        raise ValidationError(f"unknown verify suites: {', '.join(sorted(unknown))}")
    exp = Experiment(config)
    thresholds = {**DEFAULT_THRESHOLDS, **config.verify.thresholds}
    checks: dict[str, Any] = {}
    for name in selected:
        LOGGER.info("Verifying %s", name)
        try:
            outcome = CHECKS[name](exp, thresholds[name])
            checks[name] = outcome.to_json()
        except BclabError as err:
            LOGGER.warning("Check %s could not run: %s", name, err)
            checks[name] = {
                "value": None,
                "threshold": thresholds[name],
                "passed": False,
                "detail": {"error": str(err), "exit_code": err.exit_code},
            }
    report = {
        "seed": config.seed,
        "negative_controls": {
            "break_gauge": config.verify.break_gauge,
            "window_scale": config.verify.window_scale,
        },
        "checks": checks,
        "passed": all(c["passed"] for c in checks.values()),
    }
    directory = config.output / "verify"
    directory.mkdir(parents=True, exist_ok=True)
    (directory / REPORT).write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return report
