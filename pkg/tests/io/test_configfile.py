from pathlib import Path

import pytest

from surelab import ConfigError, ConfigFile, ExperimentConfig, Method
from surelab.trainer import Decoding

TOML = """\
# A small experiment.
[schedule]
method = "slow_random"
beta = 0.99

[grid]
seeds = [0, 1]
"""


def test_config_file(tmp_path: Path) -> None:
    path = tmp_path / "experiment.toml"
    path.write_text(TOML)

    with ConfigFile.open(path) as config_file:
        config = config_file.get_config()

    assert Method.SLOW_RANDOM == config.schedule.method
    assert 0.99 == config.schedule.beta
    assert (0, 1) == config.grid.seeds
    assert TOML == path.read_text()


def test_config_file__overrides(tmp_path: Path) -> None:
    path = tmp_path / "experiment.toml"
    path.write_text(TOML)

    config = ConfigFile(path).get_config(["schedule.method=seqft", "grid.seeds=[3]"])

    assert Method.SEQFT == config.schedule.method
    assert (3,) == config.grid.seeds
    assert 0.99 == config.schedule.beta


def test_config_file__missing(tmp_path: Path) -> None:
    path = tmp_path / "experiment.toml"

    with ConfigFile.open(path) as config_file:
        assert ExperimentConfig() == config_file.get_config()
        config_file.set_config(ExperimentConfig())

    assert "[model]" in path.read_text()
    assert ExperimentConfig() == ConfigFile(path).get_config()


def test_config_file__invalid(tmp_path: Path) -> None:
    path = tmp_path / "experiment.toml"
    path.write_text("[schedule\nbeta = 0.9\n")

    with pytest.raises(ConfigError):
        ConfigFile(path)


@pytest.mark.parametrize(
    "path", sorted((Path(__file__).parents[2] / "configs").glob("*.toml")), ids=lambda p: p.name
)
def test_config_file__shipped(path: Path) -> None:
    config = ConfigFile(path).get_config()

    assert config.cells()


def test_config_file__desk() -> None:
    config = ConfigFile(Path(__file__).parents[2] / "configs" / "desk.toml").get_config()
    cells = config.cells()

    assert 60 == len(cells)
    assert {0, 1, 2, 3, 4} == {c.seed for c in cells}
    assert {"order1", "order2", "order3"} == {c.order for c in cells}
    assert 4 == len({c.method for c in cells})
    assert Decoding.LABELS == config.schedule.decode
