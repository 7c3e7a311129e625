from __future__ import annotations

import json
from collections.abc import Iterable, Iterator
from contextlib import contextmanager
from pathlib import Path

from typing_extensions import Self

from surelab.paths import AnyPath
from surelab.trainer import StepRecord


class StepLog:
    """
    Line-delimited JSON log of training steps, one record per line.

    Usage::

        with StepLog.open(path, offset=state.log_offset) as log:
            log.extend(state.log)

    Opening with an `offset` drops every record after the first `offset` ones, so a resumed run
    continues exactly where its checkpoint was taken.
    """

    def __init__(self, path: AnyPath, offset: int | None = None) -> None:
        self.path = Path(path)
        lines = []
        if self.path.exists():
            lines = self.path.read_text(encoding="utf-8").splitlines()
        if offset is not None:
            assert offset <= len(lines), f"Log has only {len(lines)} records. Found: {offset=}"
            lines = lines[:offset]
        self.records = [StepRecord.from_json(json.loads(line)) for line in lines if line]

    def close(self) -> None:
        self.path.write_text(str(self), encoding="utf-8")

    @classmethod
    @contextmanager
    def open(cls, path: AnyPath, offset: int | None = None) -> Iterator[Self]:
        f = cls(path, offset)
        yield f
        f.close()

    def extend(self, records: Iterable[StepRecord]) -> None:
        self.records.extend(records)

    def __len__(self) -> int:
        return len(self.records)

    def __str__(self) -> str:
        return "".join(
            json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) + "\n"
            for r in self.records
        )
