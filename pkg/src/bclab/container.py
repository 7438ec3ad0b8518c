"""Self-describing CLRC1 array container (binary and plain-text)."""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from .errors import MissingArtifactError, ValidationError
from .models import CoefficientField, GridSpec

LOGGER = logging.getLogger(__name__)

MAGIC = b"CLRC1"
TEXT_MAGIC = "CLRC1-TEXT"
COEFFICIENT_FIELDS = ("metric_inv", "potential_a", "potential_v", "density")


@dataclass(slots=True)
class Container:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    fields: dict[str, np.ndarray]
    attrs: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.fields[name]
        except KeyError as err:
            raise ValidationError(f"container has no field '{name}'") from err


def file_digest(path: Path) -> str:
    sha = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()


def write_container(
    path: Path,
    fields: dict[str, np.ndarray],
    *,
    dims: tuple[int, ...],
    spacing: tuple[float, ...],
    attrs: dict[str, Any] | None = None,
) -> str:
    """Write arrays as little-endian float64 (complex interleaved); return SHA-256."""
    entries = []
    payloads = []
    for name, value in fields.items():
        array = np.ascontiguousarray(value)
        is_complex = bool(np.iscomplexobj(array))
        data = array.astype("<c16" if is_complex else "<f8")
        entries.append({"name": name, "shape": list(array.shape), "complex": is_complex})
        payloads.append(data.view("<f8").tobytes())
    header = {
        "dims": list(dims),
        "spacing": list(spacing),
        "fields": entries,
        "attrs": attrs or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(MAGIC + b"\n")
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for payload in payloads:
            handle.write(payload)
    LOGGER.debug("Wrote %s (%d fields)", path, len(entries))
    return file_digest(path)


def read_container(path: Path) -> Container:
    if not path.exists():
        raise MissingArtifactError(f"missing container {path}", missing=[str(path)])
    if path.suffix == ".txt":
        return read_text_container(path)
    with path.open("rb") as handle:
        magic = handle.readline().rstrip(b"\n")
        if magic != MAGIC:
            raise ValidationError(f"{path} is not a CLRC1 container")
        try:
            header = json.loads(handle.readline())
        except json.JSONDecodeError as err:
            raise ValidationError(f"{path} has a corrupt header") from err
        body = handle.read()
    fields: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["fields"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) * (2 if entry["complex"] else 1)
        chunk = np.frombuffer(body, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        array = chunk.view("<c16") if entry["complex"] else chunk
        fields[entry["name"]] = array.reshape(shape).astype(
            complex if entry["complex"] else float
        )
    if offset != len(body):
        raise ValidationError(f"{path} has {len(body) - offset} trailing bytes")
    return Container(
        dims=tuple(header["dims"]),
        spacing=tuple(header["spacing"]),
        fields=fields,
        attrs=header.get("attrs", {}),
    )


def read_text_container(path: Path) -> Container:
    """Parse the hand-written form: ``dims``, ``spacing``, ``field name shape...``."""
    lines = [
        line.split("#", 1)[0].strip()
        for line in path.read_text(encoding="utf-8").splitlines()
    ]
    lines = [line for line in lines if line]
    if not lines or lines[0] != TEXT_MAGIC:
        raise ValidationError(f"{path} does not start with {TEXT_MAGIC}")
    dims: tuple[int, ...] = ()
    spacing: tuple[float, ...] = ()
    attrs: dict[str, Any] = {}
    fields: dict[str, np.ndarray] = {}
    pending: tuple[str, tuple[int, ...]] | None = None
    values: list[float] = []

    def flush() -> None:
        nonlocal pending, values
        if pending is None:
            return
        name, shape = pending
        expected = int(np.prod(shape))
        if len(values) != expected:
            raise ValidationError(
                f"{path}: field '{name}' has {len(values)} values, expected {expected}"
            )
        fields[name] = np.array(values, dtype=float).reshape(shape)
        pending, values = None, []

    for line in lines[1:]:
        keyword, *rest = line.split()
        try:
            if keyword == "dims":
                flush()
                dims = tuple(int(v) for v in rest)
            elif keyword == "spacing":
                flush()
                spacing = tuple(float(v) for v in rest)
            elif keyword in ("time_step", "horizon", "cfl_factor"):
                flush()
                attrs[keyword] = float(rest[0])
            elif keyword == "field":
                flush()
                pending = (rest[0], tuple(int(v) for v in rest[1:]))
            else:
                values.extend(float(v) for v in line.split())
        except (ValueError, IndexError) as err:
            raise ValidationError(f"{path}: cannot parse line '{line}'") from err
    flush()
    if not dims or len(spacing) != len(dims):
        raise ValidationError(f"{path}: dims and spacing are required")
    return Container(dims=dims, spacing=spacing, fields=fields, attrs=attrs)


def grid_from_container(container: Container) -> GridSpec:
    extents = tuple((d - 1) * h for d, h in zip(container.dims, container.spacing))
    time_step = float(container.attrs.get("time_step", min(container.spacing) / 2))
    horizon = container.attrs.get("horizon")
    if horizon is None:
        horizon = time_step * round(max(extents) / time_step)
    return GridSpec(
        extents=extents,
        spacing=container.spacing,
        time_step=time_step,
        horizon=float(horizon),
        cfl_factor=float(container.attrs.get("cfl_factor", 0.7)),
    )


def save_coefficients(path: Path, coeffs: CoefficientField) -> str:
    grid = coeffs.grid
    fields = {
        "metric_inv": coeffs.metric_inv,
        "potential_a": coeffs.potential_a,
        "potential_v": coeffs.potential_v,
    }
    if coeffs.density is not None:
        fields["density"] = coeffs.density
    return write_container(
        path,
        fields,
        dims=grid.shape,
        spacing=grid.spacing,
        attrs={
            "time_step": grid.time_step,
            "horizon": grid.horizon,
            "cfl_factor": grid.cfl_factor,
        },
    )


def load_coefficients(path: Path) -> CoefficientField:
    container = read_container(path)
    grid = grid_from_container(container)
    unknown = set(container.fields) - set(COEFFICIENT_FIELDS)
    if unknown:
        LOGGER.warning("Ignoring unknown fields in %s: %s", path, sorted(unknown))
    shape, n = grid.shape, grid.dim
    try:
        metric = container["metric_inv"].reshape(shape + (n, n))
        potential_a = container.fields.get("potential_a")
        potential_v = container.fields.get("potential_v")
        density = container.fields.get("density")
        return CoefficientField.build(
            grid,
            metric,
            None if potential_a is None else potential_a.reshape(shape + (n,)),
            None if potential_v is None else potential_v.reshape(shape),
            None if density is None else density.reshape(shape),
        )
    except ValueError as err:
        raise ValidationError(f"{path}: field shapes do not match dims {shape}") from err
