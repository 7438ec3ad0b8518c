from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from bclab.container import (
    load_coefficients,
    read_container,
    save_coefficients,
    write_container,
)
from bclab.errors import MissingArtifactError, ValidationError
from bclab.generators import warped
from bclab.models import GridSpec

DATA = Path(__file__).parent / "data"


def test_write_and_read_mixed_fields(tmp_path: Path) -> None:
    path = tmp_path / "mixed.clrc"
    values = np.arange(6, dtype=float).reshape(2, 3)
    phases = np.exp(1j * values)
    digest = write_container(
        path,
        {"values": values, "phases": phases},
        dims=(2, 3),
        spacing=(0.5, 0.25),
        attrs={"note": "sample"},
    )
    assert len(digest) == 64
    container = read_container(path)
    assert container.dims == (2, 3)
    assert container.spacing == (0.5, 0.25)
    assert container.attrs == {"note": "sample"}
    assert np.array_equal(container["values"], values)
    assert np.array_equal(container["phases"], phases)
    with pytest.raises(ValidationError):
        container["missing"]


def test_missing_and_corrupt_containers(tmp_path: Path) -> None:
    with pytest.raises(MissingArtifactError) as info:
        read_container(tmp_path / "absent.clrc")
    assert info.value.missing == [str(tmp_path / "absent.clrc")]

    path = tmp_path / "bad.clrc"
    write_container(path, {"x": np.ones(3)}, dims=(3,), spacing=(1.0,))
    path.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(ValidationError, match="trailing"):
        read_container(path)

    other = tmp_path / "other.clrc"
    other.write_bytes(b"NOPE\n{}\n")
    with pytest.raises(ValidationError):
        read_container(other)


def test_text_container_loads_coefficients() -> None:
    coeffs = load_coefficients(DATA / "layered-1d.txt")
    assert coeffs.grid.shape == (5,)
    assert coeffs.grid.time_step == pytest.approx(0.125)
    assert coeffs.metric_inv[2, 0, 0] == pytest.approx(1.2)
    assert coeffs.potential_v[1] == pytest.approx(0.1)
    assert np.allclose(coeffs.potential_a, 0.0)


def test_text_container_rejects_wrong_value_count(tmp_path: Path) -> None:
    path = tmp_path / "short.txt"
    path.write_text("CLRC1-TEXT\ndims 3\nspacing 0.5\nfield v 3\n1.0 2.0\n")
    with pytest.raises(ValidationError, match="expected 3"):
        read_container(path)


def test_coefficients_survive_save_and_load(tmp_path: Path) -> None:
    grid = GridSpec(
        extents=(1.0, 0.5), spacing=(0.125, 0.125), time_step=0.0625, horizon=1.0
    )
    coeffs = warped(grid)
    path = tmp_path / "coefficients.clrc"
    save_coefficients(path, coeffs)
    loaded = load_coefficients(path)
    assert loaded.grid == grid
    assert loaded.digest() == coeffs.digest()
