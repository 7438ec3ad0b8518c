from __future__ import annotations

from pathlib import Path

import pytest

from bclab.config import load_config
from bclab.errors import ValidationError

DATA = Path(__file__).parent / "data"


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("BCLAB_THREADS", raising=False)
    monkeypatch.delenv("BCLAB_CACHE_DIR", raising=False)


def test_defaults() -> None:
    config = load_config()
    grid = config.grid.build()
    assert grid.time_step == pytest.approx(1 / 128)
    assert config.patch.build(grid).window == grid.horizon
    assert config.stages == ["forward", "dtn", "reconstruct"]
    assert config.recovery.slices == "probe"
    assert config.recovery.max_condition == 1e6
    assert config.threads == 1
    assert config.seed == 0


def test_file_values() -> None:
    config = load_config(DATA / "strip-2d.toml")
    assert config.seed == 7
    assert config.threads == 2
    assert config.stages == ["forward", "dtn"]
    assert config.coefficients.family == "normal-bump"
    assert config.coefficients.params["metric_amplitude"] == 0.2
    assert config.schedules.epsilons == [1e-1, 1e-2, 1e-3]
    patch = config.patch.build(config.grid.build())
    assert (patch.start, patch.stop, patch.window) == (4, 13, 0.5)


def test_overrides_and_environment(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.setenv("BCLAB_THREADS", "3")
    monkeypatch.setenv("BCLAB_CACHE_DIR", str(tmp_path / "cache"))
    config = load_config(output=tmp_path / "run", seed=11)
    assert config.threads == 3
    assert config.cache_dir == tmp_path / "cache"
    assert config.output == tmp_path / "run"
    assert config.seed == 11
    assert load_config(DATA / "strip-2d.toml", threads=5).threads == 5

    monkeypatch.setenv("BCLAB_THREADS", "many")
    with pytest.raises(ValidationError, match="BCLAB_THREADS"):
        load_config()


@pytest.mark.parametrize(
    ("text", "message"),
    [
        ("[grid]\nsize = 3\n", "unknown keys"),
        ("colour = 'red'\n", "unknown top-level"),
        ("grid = 3\n", "must be a table"),
        ("[schedules]\nepsilons = [1e-3, 1e-2]\n", "strictly decreasing"),
        ("[schedules]\nwavenumbers = []\n", "must not be empty"),
        ("stages = ['forward', 'publish']\n", "unknown stages"),
        ("[verify]\nsuites = ['gauge', 'luck']\n", "unknown verify suites"),
        ("[recovery]\nslices = 'guess'\n", "recovery.slices"),
        ("[basis]\nkind = 'wavelet'\n", "basis.kind"),
        ("[grid]\nspacing = [0.3]\n", "multiple"),
        ("[patch]\nwindow = 2.0\n", "window"),
        ("[grid\n", "not valid TOML"),
    ],
)
def test_rejected_files(tmp_path: Path, text: str, message: str) -> None:
    path = tmp_path / "experiment.toml"
    path.write_text(text)
    with pytest.raises(ValidationError, match=message):
        load_config(path)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ValidationError, match="does not exist"):
        load_config(tmp_path / "absent.toml")


def test_section_digest_tracks_inputs() -> None:
    config = load_config(DATA / "strip-2d.toml")
    base = config.section_digest(["grid", "basis"])
    assert base == load_config(DATA / "strip-2d.toml").section_digest(["grid", "basis"])
    assert config.section_digest(["grid", "basis"], ["abc"]) != base
    config.basis.shifts = 5
    assert config.section_digest(["grid", "basis"]) != base
    fresh = config.section_digest(["grid"])
    config.seed = 8
    assert config.section_digest(["grid"]) != fresh
