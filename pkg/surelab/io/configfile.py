from __future__ import annotations

from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any

from tomlkit import TOMLDocument, document, dump, dumps, load
from tomlkit.exceptions import ParseError
from typing_extensions import Self

from surelab.config import ExperimentConfig, apply_overrides, config_to_toml, parse_config
from surelab.errors import ConfigError
from surelab.paths import AnyPath


class ConfigFile:
    """
    Wrapper around an experiment configuration file in TOML.

    Usage::

        with ConfigFile.open("experiment.toml") as config_file:
            config = config_file.get_config()

    Missing files are read as an empty document, and are created on `close`.
    """

    def __init__(self, path: AnyPath) -> None:
        self.path = Path(path)
        self.toml: TOMLDocument = document()
        if self.path.exists():
            with open(self.path, "rt", encoding="utf-8") as fp:
                try:
                    self.toml = load(fp)
                except ParseError as e:
                    raise ConfigError(f"Cannot parse {self.path}: {e}") from e

    def close(self) -> None:
        with open(self.path, "wt", encoding="utf-8") as fp:
            dump(self.toml, fp)

    @classmethod
    @contextmanager
    def open(cls, path: AnyPath) -> Iterator[Self]:
        f = cls(path)
        yield f
        f.close()

    def get_data(self) -> dict[str, Any]:
        """The document as plain python values."""
        result: dict[str, Any] = self.toml.unwrap()
        return result

    def get_config(self, overrides: Sequence[str] = ()) -> ExperimentConfig:
        return parse_config(apply_overrides(self.get_data(), overrides))

    def set_config(self, config: ExperimentConfig) -> None:
        self.toml = config_to_toml(config)

    def __str__(self) -> str:
        return dumps(self.toml)
