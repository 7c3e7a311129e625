from os import PathLike
from pathlib import Path
from typing import TypeAlias

AnyPath: TypeAlias = PathLike[str] | str
"""Type alias for anything that can be converted to a `pathlib.Path`."""


def ensure_dir(path: AnyPath) -> Path:
    """Create the directory `path`, and its parents, if needed, and return it as a `Path`."""
    result = Path(path)
    result.mkdir(parents=True, exist_ok=True)
    return result
