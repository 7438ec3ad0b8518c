from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from bclab.config import ExperimentConfig, load_config
from bclab.errors import MissingArtifactError
from bclab.pipeline import run_experiment
from bclab.plots import emit_plots, preview


def _config(tmp_path: Path) -> ExperimentConfig:
    config = load_config(output=tmp_path / "run")
    config.grid.extents = [0.5]
    config.grid.spacing = [1 / 32]
    config.grid.horizon = 0.5
    config.coefficients.family = "normal-bump"
    config.basis.kind = "bump"
    config.basis.shifts = 4
    config.recovery.slices = "adjoint-field"
    config.recovery.layers = 4
    config.cache_dir = tmp_path / "cache"
    return config


def _rows(path: Path) -> list[list[str]]:
    with path.open(encoding="utf-8", newline="") as handle:
        return list(csv.reader(handle))


def test_missing_inputs_are_listed(tmp_path: Path) -> None:
    with pytest.raises(MissingArtifactError) as info:
        emit_plots(tmp_path)
    assert len(info.value.missing) == 4
    assert info.value.exit_code == 4


def test_plots_from_a_run(tmp_path: Path) -> None:
    config = _config(tmp_path)
    result = run_experiment(config, ["forward", "dtn", "reconstruct", "plots"])
    assert result.stages["plots"].summary["files"] >= 5
    target = tmp_path / "run" / "plots"
    traces = _rows(target / "traces.csv")
    assert traces[0] == ["element", "node", "t", "basis", "trace_re", "trace_im"]
    assert len(traces) == 1 + 4 * 33
    slices = _rows(target / "slices.csv")
    assert len(slices) == 1 + 3 * 5
    residuals = _rows(target / "residual_vs_k.csv")
    assert [float(row[0]) for row in residuals[1:]] == [20.0, 40.0, 80.0, 160.0]
    profile = _rows(target / "error_profile.csv")
    assert profile[0][:2] == ["layer", "y_n"]
    with Image.open(target / "potential_v1.png") as image:
        assert image.mode == "L"


def test_preview_marks_unsolved_nodes(tmp_path: Path) -> None:
    values = np.array([[0.0, 1.0, np.nan], [2.0, 3.0, 4.0]])
    path = preview(values, tmp_path / "field.png")
    with Image.open(path) as image:
        pixels = np.asarray(image)
    scale = pixels.shape[0] // 3
    assert pixels.shape == (3 * scale, 2 * scale)
    assert pixels[2 * scale, 0] == 0
    assert pixels[0, 0] == 55
    assert pixels[2 * scale, scale] == 255
