"""Forms computable from boundary data alone and the regularized Galerkin step.

Nothing in this module touches interior wave fields; every quantity comes from
the (f, Lambda f) pairs of a D-to-N dataset.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
import json
import logging
from pathlib import Path
from typing import Callable, Sequence
import warnings

import numpy as np

from .dtn import DtNDataset, time_weights
from .errors import (
    CoercivityError,
    ConvergenceWarning,
    DimensionError,
    TruncationWarning,
    ValidationError,
)
from .models import BoundarySignal

LOGGER = logging.getLogger(__name__)

DEFAULT_EPSILONS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
GALERKIN_CUTOFF = 1e-10
COERCIVITY_TOL = 1e-4
DELAYED_ELEMENTS = 64


def _check_signals(*signals: BoundarySignal) -> None:
    first = signals[0]
    for other in signals[1:]:
        if other.patch != first.patch or other.samples.shape != first.samples.shape:
            raise DimensionError("signals live on different patches or time grids")
        if not np.allclose(other.times, first.times, rtol=0, atol=1e-12):
            raise DimensionError("signals use different time samples")


def _weights(f: BoundarySignal, node_weights: np.ndarray | None) -> np.ndarray:
    nodes = np.ones(f.patch.size) if node_weights is None else np.asarray(node_weights)
    if nodes.shape != (f.patch.size,):
        raise DimensionError(f"{nodes.size} node weights for a patch of {f.patch.size}")
    return nodes[:, None] * time_weights(f.times)[None, :]


def lambda0_form(
    f: BoundarySignal,
    g: BoundarySignal,
    lf: BoundarySignal,
    lg: BoundarySignal,
    *,
    node_weights: np.ndarray | None = None,
) -> complex:
    """int (Lambda f) conj(g_t) + f_t conj(Lambda_* g); equals Q(u^f, v^g)."""
    _check_signals(f, g, lf, lg)
    weights = _weights(f, node_weights)
    integrand = lf.samples * np.conj(g.time_derivative()) + f.time_derivative() * np.conj(
        lg.samples
    )
    return complex(np.sum(integrand * weights))


def a_form(
    f: BoundarySignal,
    g: BoundarySignal,
    lf: BoundarySignal,
    lg: BoundarySignal,
    *,
    node_weights: np.ndarray | None = None,
) -> complex:
    """A(u^f, v^g) from the boundary.

    int [(Lambda f) conj(g) - f conj(Lambda_* g)] plus the corner term
    int_gamma f(T) conj(g(T)).
    """
    _check_signals(f, g, lf, lg)
    weights = _weights(f, node_weights)
    nodes = np.ones(f.patch.size) if node_weights is None else np.asarray(node_weights)
    bulk = np.sum(
        (lf.samples * np.conj(g.samples) - f.samples * np.conj(lg.samples)) * weights
    )
    corner = np.sum(nodes * f.samples[:, -1] * np.conj(g.samples[:, -1]))
    return complex(bulk + corner)


@dataclass(frozen=True, slots=True)
class FormData:
    """Basis, Lambda and Lambda_* samples with quadrature weights, shape (N, P, M + 1)."""

    basis: np.ndarray
    traces: np.ndarray
    adjoint_traces: np.ndarray
    weights: np.ndarray
    node_weights: np.ndarray
    time_step: float

    @property
    def derivatives(self) -> np.ndarray:
        return np.gradient(self.basis, self.time_step, axis=-1, edge_order=2)

    def __len__(self) -> int:
        return self.basis.shape[0]


def form_data(
    dataset: DtNDataset,
    ids: Sequence[int] | None = None,
    adjoint: DtNDataset | None = None,
) -> FormData:
    ids = list(range(len(dataset))) if ids is None else list(ids)
    if adjoint is None:
        adjoint_traces = dataset.traces[ids]
    else:
        if adjoint.basis.shape != dataset.basis.shape or not np.allclose(
            adjoint.basis, dataset.basis
        ):
            raise DimensionError("adjoint dataset must share the forward basis")
        adjoint_traces = adjoint.traces[ids]
    return FormData(
        basis=dataset.basis[ids],
        traces=dataset.traces[ids],
        adjoint_traces=adjoint_traces,
        weights=dataset.weights(),
        node_weights=dataset.patch.weights(dataset.grid),
        time_step=dataset.time_step,
    )


def _cross(left: FormData, right: FormData) -> tuple[np.ndarray, np.ndarray]:
    """Q[j, k] = Lambda_0(f_j, g_k) and A[j, k] = A(u_j, v_k) for two families."""
    w = left.weights
    q = np.einsum("jpm,kpm,pm->jk", left.traces, np.conj(right.derivatives), w)
    q += np.einsum("jpm,kpm,pm->jk", left.derivatives, np.conj(right.adjoint_traces), w)
    a = np.einsum("jpm,kpm,pm->jk", left.traces, np.conj(right.basis), w)
    a -= np.einsum("jpm,kpm,pm->jk", left.basis, np.conj(right.adjoint_traces), w)
    last_left, last_right = left.basis[..., -1], np.conj(right.basis[..., -1])
    a += np.einsum("jp,kp,p->jk", last_left, last_right, left.node_weights)
    return q, a


def form_grams(
    dataset: DtNDataset,
    ids: Sequence[int] | None = None,
    adjoint: DtNDataset | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Q and A Gram matrices, G[j, k] = form(u_j, u_k), from boundary data only."""
    data = form_data(dataset, ids, adjoint)
    return _cross(data, data)


def eigen_floor(gram_q: np.ndarray) -> float:
    """Smallest eigenvalue of the Hermitian part of the Q Gram matrix."""
    if gram_q.size == 0:
        return 0.0
    hermitian = 0.5 * (gram_q + gram_q.conj().T)
    return float(np.linalg.eigvalsh(hermitian)[0])


@dataclass(slots=True)
class GalerkinSolveRecord:
    basis_ids: list[int]
    epsilon: float
    gram: np.ndarray
    rhs: np.ndarray
    coefficients: np.ndarray
    eigen_floor: float
    condition: float
    retained: int
    residual: float
    norm_proxy: float


def galerkin_project(
    gram_q: np.ndarray,
    gram_a: np.ndarray,
    rhs: Callable[[float], np.ndarray],
    basis_ids: Sequence[int],
    epsilon: float,
    *,
    cutoff: float = GALERKIN_CUTOFF,
    coercivity_tol: float = COERCIVITY_TOL,
) -> GalerkinSolveRecord:
    """Solve sum_j c_j Q_eps(u_j, u_k) = rhs_k with Q_eps = eps Q + A.

    Grams follow G[j, k] = form(u_j, u_k); the system matrix is its transpose.
    Eigenvalues of the Hermitian Q part within coercivity_tol of zero (relative)
    count as marginal and are truncated rather than rejected.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if gram_q.shape != gram_a.shape or gram_q.shape[0] != len(basis_ids):
        raise DimensionError("Gram matrices and basis ids disagree in size")
    floor = eigen_floor(gram_q)
    spectrum = np.linalg.eigvalsh(0.5 * (gram_q + gram_q.conj().T))
    scale = float(np.abs(spectrum).max(initial=0.0))
    if floor < -coercivity_tol * scale or scale == 0.0:
        raise CoercivityError(
            f"Hermitian part of the Q Gram is not positive (floor {floor:.3e},"
            f" scale {scale:.3e}); the window is too long or the basis degenerate",
            eigen_floor=floor,
        )
    system = (epsilon * gram_q + gram_a).T
    target = np.asarray(rhs(epsilon), dtype=complex)
    u, s, vh = np.linalg.svd(system)
    keep = s > cutoff * s[0]
    if not keep.all():
        dropped = int((~keep).sum())
        message = f"dropped {dropped} of {s.size} directions at eps={epsilon:.1e}"
        LOGGER.debug(message)
        warnings.warn(TruncationWarning(message), stacklevel=2)
    coefficients = vh[keep].conj().T @ ((u[:, keep].conj().T @ target) / s[keep])
    norm = np.linalg.norm(target)
    misfit = np.linalg.norm(system @ coefficients - target)
    residual = float(misfit / norm) if norm else 0.0
    proxy = float(np.real(coefficients.conj() @ gram_q.T @ coefficients))
    return GalerkinSolveRecord(
        basis_ids=list(basis_ids),
        epsilon=epsilon,
        gram=system,
        rhs=target,
        coefficients=coefficients,
        eigen_floor=floor,
        condition=float(s[0] / s[keep][-1]),
        retained=int(keep.sum()),
        residual=residual,
        norm_proxy=proxy,
    )


def _group_key(samples: np.ndarray) -> tuple[float, ...]:
    profile = np.abs(samples).max(axis=1)
    peak = profile.max(initial=0.0)
    return tuple(np.round(profile / peak, 8)) if peak else ()


def delayed_ids(
    dataset: DtNDataset,
    s0: float,
    *,
    stride: int | None = None,
    gamma: tuple[int, int] | None = None,
) -> list[tuple[int, int]]:
    """(element, delay) pairs whose shifted sources are supported in (s0, T].

    Each spatial profile contributes its earliest element, re-centred by exact
    time shifts every ``stride`` samples.
    """
    steps = dataset.times.size - 1
    first = int(np.floor(s0 / dataset.time_step + 1e-9)) + 1
    if first >= steps:
        raise ValidationError(f"s0 = {s0} leaves no room for delayed sources")
    stride = stride or max(1, (steps - first) // DELAYED_ELEMENTS)
    earliest: dict[tuple[float, ...], tuple[int, int]] = {}
    for index in range(len(dataset)):
        samples = dataset.basis[index]
        active_nodes = np.flatnonzero(np.abs(samples).max(axis=1) > 0)
        if active_nodes.size == 0:
            continue
        if gamma is not None and (
            dataset.patch.start + active_nodes[0] < gamma[0]
            or dataset.patch.start + active_nodes[-1] >= gamma[1]
        ):
            continue
        start = int(np.flatnonzero(np.abs(samples).max(axis=0) > 0)[0])
        key = _group_key(samples)
        if key not in earliest or start < earliest[key][1]:
            earliest[key] = (index, start)
    pairs = []
    for key in sorted(earliest, key=lambda k: earliest[k][0]):
        index, start = earliest[key]
        for target in range(max(first, start), steps, stride):
            pairs.append((index, target - start))
    if not pairs:
        raise ValidationError("dataset has no elements to delay past s0")
    return pairs


def _shift(values: np.ndarray, steps: int) -> np.ndarray:
    if steps == 0:
        return values
    out = np.zeros_like(values)
    out[..., steps:] = values[..., :-steps]
    return out


class DelayedSystem:
    """Grams of the delayed basis for one (dataset, s0); reused across f, g and eps."""

    def __init__(
        self,
        dataset: DtNDataset,
        s0: float,
        *,
        adjoint: DtNDataset | None = None,
        stride: int | None = None,
        gamma: tuple[int, int] | None = None,
    ) -> None:
        self.dataset = dataset
        self.s0 = s0
        self.pairs = delayed_ids(dataset, s0, stride=stride, gamma=gamma)
        base = form_data(dataset, None, adjoint)
        self.data = FormData(
            basis=np.stack([_shift(base.basis[i], d) for i, d in self.pairs]),
            traces=np.stack([_shift(base.traces[i], d) for i, d in self.pairs]),
            adjoint_traces=np.stack(
                [_shift(base.adjoint_traces[i], d) for i, d in self.pairs]
            ),
            weights=base.weights,
            node_weights=base.node_weights,
            time_step=base.time_step,
        )
        self.gram_q, self.gram_a = _cross(self.data, self.data)
        self.floor = eigen_floor(self.gram_q)
        LOGGER.debug(
            "Delayed basis at s0=%.4f: %d elements, Q floor %.3e",
            s0,
            len(self.pairs),
            self.floor,
        )

    def _single(
        self, f: BoundarySignal, lf: BoundarySignal, lg: BoundarySignal
    ) -> FormData:
        return FormData(
            basis=f.samples[None],
            traces=lf.samples[None],
            adjoint_traces=lg.samples[None],
            weights=self.data.weights,
            node_weights=self.data.node_weights,
            time_step=self.data.time_step,
        )

    def source_terms(
        self, f: BoundarySignal, lf: BoundarySignal
    ) -> tuple[np.ndarray, np.ndarray]:
        """Q(u^f, u_k) and A(u^f, u_k) over the delayed basis."""
        q, a = _cross(self._single(f, lf, lf), self.data)
        return q[0], a[0]

    def test_terms(
        self, g: BoundarySignal, lg: BoundarySignal
    ) -> tuple[np.ndarray, np.ndarray]:
        """Q(u_j, v^g) and A(u_j, v^g) over the delayed basis."""
        q, a = _cross(self.data, self._single(g, lg, lg))
        return q[:, 0], a[:, 0]


def richardson(values: Sequence[complex], ratios: Sequence[float]) -> list[complex]:
    """Two-term Richardson estimates for a first-order error in the ratio variable."""
    out = []
    for i in range(len(values) - 1):
        r = ratios[i]
        out.append((r * values[i + 1] - values[i]) / (r - 1.0))
    return out


def _monotone(residuals: Sequence[float]) -> bool:
    return all(b <= a * (1 + 1e-9) + 1e-300 for a, b in zip(residuals, residuals[1:]))


@dataclass(slots=True)
class A1Result:
    value: complex
    a_full: complex
    a_u0: complex
    s0: float
    epsilons: list[float]
    values: list[complex]
    extrapolated: list[complex]
    residuals: list[float]
    eigen_floor: float
    basis_size: int
    records: list[GalerkinSolveRecord] = field(default_factory=list, repr=False)

    def report(self) -> dict[str, object]:
        summary = asdict(self)
        summary.pop("records")
        for key in ("value", "a_full", "a_u0"):
            summary[key] = _complex(summary[key])
        for key in ("values", "extrapolated"):
            summary[key] = [_complex(v) for v in summary[key]]
        summary["conditions"] = [r.condition for r in self.records]
        summary["galerkin_residuals"] = [r.residual for r in self.records]
        return summary


def _complex(value: complex) -> list[float]:
    return [float(np.real(value)), float(np.imag(value))]


def recover_a1(
    f: BoundarySignal,
    g: BoundarySignal,
    dataset: DtNDataset,
    s0: float,
    eps_schedule: Sequence[float] = DEFAULT_EPSILONS,
    *,
    adjoint: DtNDataset | None = None,
    system: DelayedSystem | None = None,
    cutoff: float = GALERKIN_CUTOFF,
    lg: BoundarySignal | None = None,
) -> A1Result:
    """A1(u^f, v^g) = A(u^f, v^g) - lim_eps Q_eps(u_eps, v^g).

    ``lg`` is Lambda_* g when g lies outside the span of the test data.
    """
    schedule = [float(e) for e in eps_schedule]
    if not schedule or any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValidationError(f"eps schedule {schedule} must be strictly decreasing")
    if not 0 < s0 < float(dataset.times[-1]):
        raise ValidationError(f"s0 = {s0} outside (0, {dataset.times[-1]})")
    system = system or DelayedSystem(dataset, s0, adjoint=adjoint)
    lf = dataset.response(f)
    if lg is None:
        lg = (adjoint or dataset).response(g)
    weights = dataset.patch.weights(dataset.grid)
    a_full = a_form(f, g, lf, lg, node_weights=weights)

    q_src, a_src = system.source_terms(f, lf)
    q_test, a_test = system.test_terms(g, lg)
    ids = list(range(len(system.pairs)))
    values, records = [], []
    for eps in schedule:
        record = galerkin_project(
            system.gram_q,
            system.gram_a,
            lambda e: e * q_src + a_src,
            ids,
            eps,
            cutoff=cutoff,
        )
        records.append(record)
        values.append(complex(record.coefficients @ (eps * q_test + a_test)))

    ratios = [a / b for a, b in zip(schedule, schedule[1:])]
    extrapolated = richardson(values, ratios) if len(values) > 1 else list(values)
    residuals = [abs(b - a) for a, b in zip(extrapolated, extrapolated[1:])]
    if residuals and not _monotone(residuals):
        message = f"eps extrapolation residuals are not monotone: {residuals}"
        LOGGER.warning(message)
        warnings.warn(ConvergenceWarning(message, sequence=residuals), stacklevel=2)
    a_u0 = extrapolated[-1]
    LOGGER.debug("A1 at s0=%.4f: A=%s, A(u0)=%s", s0, a_full, a_u0)
    return A1Result(
        value=a_full - a_u0,
        a_full=a_full,
        a_u0=a_u0,
        s0=s0,
        epsilons=schedule,
        values=values,
        extrapolated=extrapolated,
        residuals=residuals,
        eigen_floor=system.floor,
        basis_size=len(system.pairs),
        records=records,
    )


def write_report(
    path: Path, result: A1Result, inputs: dict[str, object] | None = None
) -> None:
    payload = {"inputs": inputs or {}, "result": result.report()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
