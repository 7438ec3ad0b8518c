"""CSV series and grayscale previews from a run directory."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .container import read_container
from .dtn import load_dataset
from .errors import MissingArtifactError, ValidationError
from .optics import residual_slope

LOGGER = logging.getLogger(__name__)

REQUIRED = (
    "forward/dataset/manifest.txt",
    "reconstruct/reconstruction.clrc",
    "reconstruct/slices.clrc",
    "reconstruct/diagnostics.json",
)
PREVIEW_FIELDS = ("metric", "potential_a", "potential_v1", "potential_v_hat")
PREVIEW_HEIGHT = 256
SLOPE_TOLERANCE = 1e-6


def _write_csv(
    path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]
) -> Path:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _trace_rows(directory: Path, count: int = 4) -> list[tuple]:
    dataset = load_dataset(directory)
    node = dataset.patch.size // 2
    rows = []
    for element in range(min(count, len(dataset))):
        for m, t in enumerate(dataset.times):
            value = dataset.traces[element, node, m]
            basis = float(dataset.basis[element, node, m].real)
            rows.append(
                (
                    element,
                    node,
                    repr(float(t)),
                    repr(basis),
                    repr(float(value.real)),
                    repr(float(value.imag)),
                )
            )
    return rows


def _slice_rows(path: Path, count: int = 3) -> list[tuple]:
    slices = read_container(path)
    values = slices["values"]
    h_n = slices.spacing[-1]
    node = values.shape[1] // 2
    rows = []
    for source in range(min(count, values.shape[0])):
        for layer in range(values.shape[2]):
            v = values[source, node, layer]
            rows.append(
                (
                    source,
                    node,
                    layer,
                    repr(layer * h_n),
                    repr(float(v.real)),
                    repr(float(v.imag)),
                )
            )
    return rows


def _residual_rows(diagnostics: dict) -> list[tuple]:
    probe = diagnostics.get("probe", {})
    wavenumbers, residuals = probe.get("wavenumbers", []), probe.get("residuals", [])
    stored = probe.get("slope")
    if stored is not None and len(wavenumbers) > 1:
        slope = residual_slope(wavenumbers, residuals)
        if abs(slope - stored) > SLOPE_TOLERANCE * max(1.0, abs(stored)):
            raise ValidationError(f"recomputed residual slope {slope} != stored {stored}")
    order = probe.get("order", "")
    return [(repr(k), repr(r), order) for k, r in zip(wavenumbers, residuals)]


def _profile_rows(container) -> list[tuple]:
    h_n = container.spacing[-1]
    rows = []
    names = [n for n in PREVIEW_FIELDS if f"truth.{n}" in container.fields]
    if not names:
        return rows
    layers = container[names[0]].shape[-1]
    for layer in range(layers):
        row: list[object] = [layer, repr(layer * h_n)]
        for name in names:
            truth = container[f"truth.{name}"][:, layer]
            diff = np.abs(container[name][:, layer] - truth)
            finite = diff[np.isfinite(diff)]
            row.append(repr(float(finite.max())) if finite.size else "nan")
        rows.append(tuple(row))
    return rows


def preview(values: np.ndarray, path: Path) -> Path:
    """Grayscale PNG with layers running downwards; NaN nodes are black."""
    image_values = np.real(np.asarray(values, dtype=complex)).T
    finite = np.isfinite(image_values)
    pixels = np.zeros(image_values.shape, dtype=np.uint8)
    if finite.any():
        lo, hi = image_values[finite].min(), image_values[finite].max()
        span = hi - lo if hi > lo else 1.0
        scaled = (image_values[finite] - lo) / span
        pixels[finite] = (55 + 200 * scaled).astype(np.uint8)
    image = Image.fromarray(pixels)
    scale = max(1, PREVIEW_HEIGHT // max(pixels.shape))
    image = image.resize(
        (pixels.shape[1] * scale, pixels.shape[0] * scale), Image.Resampling.NEAREST
    )
    image.save(path, format="PNG")
    return path


def emit_plots(output: Path) -> list[Path]:
    missing = [str(output / name) for name in REQUIRED if not (output / name).exists()]
    if missing:
        raise MissingArtifactError(
            f"cannot emit plots, {len(missing)} inputs missing: {', '.join(missing)}",
            missing=missing,
        )
    target = output / "plots"
    target.mkdir(parents=True, exist_ok=True)
    written = [
        _write_csv(
            target / "traces.csv",
            ("element", "node", "t", "basis", "trace_re", "trace_im"),
            _trace_rows(output / "forward" / "dataset"),
        ),
        _write_csv(
            target / "slices.csv",
            ("source", "node", "layer", "y_n", "value_re", "value_im"),
            _slice_rows(output / "reconstruct" / "slices.clrc"),
        ),
    ]
    diagnostics = json.loads((output / "reconstruct" / "diagnostics.json").read_text())
    written.append(
        _write_csv(
            target / "residual_vs_k.csv",
            ("k", "residual", "order"),
            _residual_rows(diagnostics),
        )
    )
    reconstruction = read_container(output / "reconstruct" / "reconstruction.clrc")
    profile = _profile_rows(reconstruction)
    if profile:
        names = [n for n in PREVIEW_FIELDS if f"truth.{n}" in reconstruction.fields]
        written.append(
            _write_csv(target / "error_profile.csv", ("layer", "y_n", *names), profile)
        )
    report = output / "verify" / "report.json"
    if report.exists():
        detail = json.loads(report.read_text()).get("checks", {}).get("refinement", {})
        detail = detail.get("detail", {})
        if "errors" in detail:
            pairs = zip(detail["spacings"], detail["errors"])
            written.append(
                _write_csv(
                    target / "refinement.csv",
                    ("spacing", "error"),
                    [(repr(h), repr(e)) for h, e in pairs],
                )
            )
    for name in PREVIEW_FIELDS:
        if name in reconstruction.fields:
            written.append(preview(reconstruction[name], target / f"{name}.png"))
    LOGGER.info("Wrote %d plot files to %s", len(written), target)
    return written
