"""
Experiment configuration.

A configuration is a TOML document with the sections `[model]`, `[schedule]`, `[sgd]`,
`[buffer]`, `[stream]`, `[grid]` and `[run]`. Every key is optional and defaults to the values in
the dataclasses below. The `[grid]` section lists values to sweep; every combination of its axes
is one run.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Any, TypeAlias

import tomlkit
from tomlkit import TOMLDocument
from tomlkit.exceptions import ParseError

from surelab.buffer import BufferTiming
from surelab.errors import ConfigError
from surelab.model import ModelConfig
from surelab.optim import SgdConfig
from surelab.surprise import SurpriseVariant
from surelab.tasks import SyntheticTaskSpec
from surelab.trainer import Decoding, LossSpan, Method, RunConfig, TrainSchedule

AnyOrder: TypeAlias = str | tuple[int, ...]
"""A named task order, or an explicit permutation."""

ORDER_NAMES = ("order1", "order2", "order3")


def resolve_order(order: AnyOrder, n_tasks: int) -> tuple[int, ...]:
    """
    Get the permutation of a task order.

    `order1` is the generation order, `order2` its reverse, and `order3` the even indices followed
    by the odd ones.
    """
    if isinstance(order, str):
        match order:
            case "order1":
                return tuple(range(n_tasks))
            case "order2":
                return tuple(reversed(range(n_tasks)))
            case "order3":
                return tuple(range(0, n_tasks, 2)) + tuple(range(1, n_tasks, 2))
        raise ConfigError(f"Unknown task order {order!r}. Expected one of {ORDER_NAMES}.")
    result = tuple(int(i) for i in order)
    if sorted(result) != list(range(n_tasks)):
        raise ConfigError(f"Task order must be a permutation of 0..{n_tasks - 1}. Found: {result}")
    return result


def order_name(order: AnyOrder) -> str:
    if isinstance(order, str):
        return order
    return "perm-" + "-".join(str(i) for i in order)


def replay_interval_for_ratio(ratio: str, batch_size: int, replay_batch: int) -> int:
    """
    Convert a replay ratio `"1:r"` to a replay interval.

    One replayed example per `r` current examples means a replay batch every
    `r * replay_batch / batch_size` steps.
    """
    parts = ratio.split(":")
    try:
        one, r = (int(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"Replay ratio must look like '1:r'. Found: {ratio!r}") from e
    if one != 1 or r < 1:
        raise ConfigError(f"Replay ratio must look like '1:r' with r >= 1. Found: {ratio!r}")
    interval, remainder = divmod(r * replay_batch, batch_size)
    if remainder or interval < 1:
        raise ConfigError(
            f"Replay ratio {ratio} does not give a whole replay interval for"
            f" batch_size={batch_size} and replay_batch={replay_batch}."
        )
    return interval


@dataclass(frozen=True)
class BufferConfig:
    size: int | None = None
    """Absolute capacity. Takes precedence over `fraction`."""

    fraction: float = 0.02


@dataclass(frozen=True)
class StreamConfig:
    spec: SyntheticTaskSpec = SyntheticTaskSpec()
    n_tasks: int = 8
    seed: int = 0


@dataclass(frozen=True)
class GridConfig:
    """Axes to sweep. An empty axis uses the single value from the other sections."""

    methods: tuple[Method, ...] = ()
    betas: tuple[float, ...] = ()
    buffer_sizes: tuple[int, ...] = ()
    replay_ratios: tuple[str, ...] = ()
    orders: tuple[AnyOrder, ...] = ("order1",)
    seeds: tuple[int, ...] = ()


@dataclass(frozen=True)
class RunSection:
    output_dir: str = "surelab-out"
    workers: int = 1
    checkpoint: bool = True


@dataclass(frozen=True)
class Cell:
    """One run of a grid, and the name of its output directory."""

    cell_id: str
    method: Method
    order: str
    seed: int
    run: RunConfig


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    schedule: TrainSchedule = TrainSchedule()
    replay_ratio: str | None = None
    """If set, overrides `schedule.replay_interval`."""

    buffer: BufferConfig = BufferConfig()
    stream: StreamConfig = StreamConfig()
    grid: GridConfig = GridConfig()
    run: RunSection = RunSection()

    def __post_init__(self) -> None:
        if not self.grid.orders:
            raise ConfigError("grid.orders must not be empty.")
        for order in self.grid.orders:
            resolve_order(order, self.stream.n_tasks)
        if self.run.workers < 1:
            raise ConfigError(f"run.workers must be positive. Found: {self.run.workers}")
        self.cells()

    def _interval(self, ratio: str | None) -> int:
        if ratio is None:
            return self.schedule.replay_interval
        return replay_interval_for_ratio(
            ratio, self.schedule.batch_size, self.schedule.replay_batch
        )

    def cells(self) -> list[Cell]:
        """Every combination of the grid axes, in a fixed order."""
        grid = self.grid
        methods = grid.methods or (self.schedule.method,)
        betas = grid.betas or (self.schedule.beta,)
        sizes: tuple[int | None, ...] = grid.buffer_sizes or (self.buffer.size,)
        ratios: tuple[str | None, ...] = grid.replay_ratios or (self.replay_ratio,)
        seeds = grid.seeds or (self.schedule.seed,)
        result = []
        for method, beta, size, ratio, order, seed in itertools.product(
            methods, betas, sizes, ratios, grid.orders, seeds
        ):
            schedule = replace(
                self.schedule,
                method=method,
                beta=beta,
                replay_interval=self._interval(ratio),
                seed=seed,
            )
            run = RunConfig(
                model=self.model,
                schedule=schedule,
                stream=self.stream.spec,
                n_tasks=self.stream.n_tasks,
                stream_seed=self.stream.seed,
                order=resolve_order(order, self.stream.n_tasks),
                buffer_size=size,
                buffer_fraction=self.buffer.fraction,
            )
            buffer_label = f"S{size}" if size is not None else f"f{self.buffer.fraction:g}"
            cell_id = "_".join(
                [
                    method.value,
                    f"b{beta:g}",
                    buffer_label,
                    f"k{schedule.replay_interval}",
                    order_name(order),
                    f"seed{seed}",
                ]
            )
            result.append(Cell(cell_id, method, order_name(order), seed, run))
        ids = [c.cell_id for c in result]
        if len(set(ids)) != len(ids):
            raise ConfigError("The grid contains duplicate runs.")
        return result


Converter: TypeAlias = Callable[[Any], Any]


def _as_int(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"Expected an integer. Found: {value!r}")
    return value


def _as_float(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"Expected a number. Found: {value!r}")
    return float(value)


def _as_bool(value: Any) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"Expected a boolean. Found: {value!r}")
    return value


def _as_str(value: Any) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"Expected a string. Found: {value!r}")
    return value


def _as_enum(enum: type[Enum]) -> Converter:
    def _convert(value: Any) -> Any:
        try:
            return enum(_as_str(value))
        except ValueError as e:
            choices = [m.value for m in enum]
            raise ConfigError(f"Expected one of {choices}. Found: {value!r}") from e

    return _convert


def _as_optional(convert: Converter) -> Converter:
    return lambda value: None if value is None else convert(value)


def _as_tuple(convert: Converter) -> Converter:
    def _convert(value: Any) -> tuple[Any, ...]:
        if not isinstance(value, list):
            raise ConfigError(f"Expected an array. Found: {value!r}")
        return tuple(convert(v) for v in value)

    return _convert


def _as_order(value: Any) -> AnyOrder:
    if isinstance(value, list):
        return tuple(_as_int(v) for v in value)
    return _as_str(value)


_SECTIONS: Mapping[str, Mapping[str, Converter]] = {
    "model": {
        "vocab_size": _as_int,
        "model_dim": _as_int,
        "layers": _as_int,
        "heads": _as_int,
        "max_seq_len": _as_int,
        "dropout_rate": _as_float,
        "lora_rank": _as_int,
        "lora_alpha": _as_float,
        "lora_init_std": _as_float,
    },
    "schedule": {
        "method": _as_enum(Method),
        "batch_size": _as_int,
        "replay_batch": _as_int,
        "replay_interval": _as_int,
        "replay_ratio": _as_optional(_as_str),
        "epochs": _as_int,
        "beta": _as_float,
        "timing": _as_optional(_as_enum(BufferTiming)),
        "surprise_variant": _as_enum(SurpriseVariant),
        "aging": _as_bool,
        "loss_span": _as_enum(LossSpan),
        "decode": _as_enum(Decoding),
        "seed": _as_int,
    },
    "sgd": {
        "learning_rate": _as_float,
        "clip_norm": _as_optional(_as_float),
    },
    "buffer": {
        "size": _as_optional(_as_int),
        "fraction": _as_float,
    },
    "stream": {
        "vocab_size": _as_int,
        "label_budget": _as_int,
        "classes_per_task": _as_int,
        "seq_len": _as_int,
        "train_per_class": _as_int,
        "test_per_class": _as_int,
        "separation": _as_float,
        "sparsity": _as_float,
        "n_tasks": _as_int,
        "seed": _as_int,
    },
    "grid": {
        "methods": _as_tuple(_as_enum(Method)),
        "betas": _as_tuple(_as_float),
        "buffer_sizes": _as_tuple(_as_int),
        "replay_ratios": _as_tuple(_as_str),
        "orders": _as_tuple(_as_order),
        "seeds": _as_tuple(_as_int),
    },
    "run": {
        "output_dir": _as_str,
        "workers": _as_int,
        "checkpoint": _as_bool,
    },
}


def _convert_section(name: str, values: Any) -> dict[str, Any]:
    converters = _SECTIONS[name]
    if not isinstance(values, Mapping):
        raise ConfigError(f"[{name}] must be a table. Found: {values!r}")
    result = {}
    for key, value in values.items():
        if key not in converters:
            raise ConfigError(f"Unknown key {name}.{key}. Known keys: {sorted(converters)}")
        try:
            result[key] = converters[key](value)
        except ConfigError as e:
            raise ConfigError(f"Invalid value for {name}.{key}: {e}") from e
    return result


def parse_config(data: Mapping[str, Any]) -> ExperimentConfig:
    """Build an `ExperimentConfig` from plain python values, as read from TOML."""
    for name in data:
        if name not in _SECTIONS:
            raise ConfigError(f"Unknown section [{name}]. Known sections: {sorted(_SECTIONS)}")
    sections = {name: _convert_section(name, data.get(name, {})) for name in _SECTIONS}

    try:
        schedule_values = dict(sections["schedule"])
        replay_ratio = schedule_values.pop("replay_ratio", None)
        stream_values = dict(sections["stream"])
        n_tasks = stream_values.pop("n_tasks", StreamConfig.n_tasks)
        stream_seed = stream_values.pop("seed", StreamConfig.seed)
        return ExperimentConfig(
            model=ModelConfig(**sections["model"]),
            schedule=TrainSchedule(**schedule_values, sgd=SgdConfig(**sections["sgd"])),
            replay_ratio=replay_ratio,
            buffer=BufferConfig(**sections["buffer"]),
            stream=StreamConfig(SyntheticTaskSpec(**stream_values), n_tasks, stream_seed),
            grid=GridConfig(**sections["grid"]),
            run=RunSection(**sections["run"]),
        )
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _parse_value(raw: str) -> Any:
    try:
        return tomlkit.parse(f"value = {raw}").unwrap()["value"]
    except ParseError:
        return raw


def apply_overrides(data: Mapping[str, Any], overrides: Sequence[str]) -> dict[str, Any]:
    """
    Apply `section.key=value` overrides to plain configuration data.

    Values are parsed as TOML values. Anything that does not parse is taken as a bare string, so
    `schedule.method=seqft` works without quotes.
    """
    result = {name: dict(values) for name, values in data.items()}
    for override in overrides:
        key, sep, raw = override.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"Overrides must look like 'section.key=value'. Found: {override!r}")
        result.setdefault(section, {})[name] = _parse_value(raw.strip())
    return result


def _encode(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_encode(v) for v in value]
    return value


def _section_values(instance: Any, skip: Sequence[str] = ()) -> dict[str, Any]:
    return {
        f.name: _encode(getattr(instance, f.name)) for f in fields(instance) if f.name not in skip
    }


def config_to_data(config: ExperimentConfig) -> dict[str, dict[str, Any]]:
    """Plain python values of every key, `None` included."""
    schedule = _section_values(config.schedule, skip=["sgd"])
    schedule["replay_ratio"] = config.replay_ratio
    stream = _section_values(config.stream.spec)
    stream["n_tasks"] = config.stream.n_tasks
    stream["seed"] = config.stream.seed
    return {
        "model": _section_values(config.model),
        "schedule": schedule,
        "sgd": _section_values(config.schedule.sgd),
        "buffer": _section_values(config.buffer),
        "stream": stream,
        "grid": _section_values(config.grid),
        "run": _section_values(config.run),
    }


def config_to_toml(config: ExperimentConfig) -> TOMLDocument:
    """
    The effective configuration as a TOML document.

    Keys whose value is `None` are left out. The permutation of every named order is recorded as a
    comment.
    """
    doc = tomlkit.document()
    for name, values in config_to_data(config).items():
        table = tomlkit.table()
        for key, value in values.items():
            if value is not None:
                table.add(key, value)
        if name == "grid":
            for order in config.grid.orders:
                if isinstance(order, str):
                    permutation = resolve_order(order, config.stream.n_tasks)
                    table.add(tomlkit.comment(f"{order} = {list(permutation)}"))
        doc.add(name, table)
    return doc


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON of the configuration."""
    canonical = json.dumps(config_to_data(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def run_config_hash(run: RunConfig) -> str:
    """sha256 of the canonical JSON of one run's configuration."""
    data = {
        "model": _section_values(run.model),
        "schedule": _section_values(run.schedule, skip=["sgd"]),
        "sgd": _section_values(run.schedule.sgd),
        "stream": _section_values(run.stream),
        "n_tasks": run.n_tasks,
        "stream_seed": run.stream_seed,
        "order": list(run.task_order),
        "buffer_size": run.buffer_size,
        "buffer_fraction": run.buffer_fraction,
    }
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
