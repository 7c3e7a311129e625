"""
Binary checkpoints of a `RunState`.

Layout::

    MAGIC | header length (u32, little endian) | header (JSON) | payload

The header carries the format version, the hash of the run configuration and the sha256 of the
payload. The payload is a length-prefixed JSON document followed by every model tensor in `.npy`
format, in the order listed in the document. Saving the same state twice gives identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
from packaging.version import InvalidVersion, Version

from surelab.buffer import BufferEntry, ReplayMemory
from surelab.errors import CheckpointError, ConfigMismatchError, CorruptCheckpointError
from surelab.model import init_model
from surelab.optim import SgdStats
from surelab.paths import AnyPath
from surelab.rng import get_rng_state, restore_rng
from surelab.surprise import SurpriseScore, SurpriseVariant
from surelab.tasks import Example
from surelab.trainer import RunConfig, RunState

MAGIC = b"SURECKPT"
FORMAT_VERSION = Version("1.0")

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _dumps(data: Any) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _encode_entry(entry: BufferEntry) -> dict[str, Any]:
    score = None
    if entry.score is not None:
        score = {
            "value": entry.score.value,
            "variant": entry.score.variant.value,
            "token_count": entry.score.token_count,
            "scored_at": entry.score.scored_at,
        }
    return {
        "tokens": list(entry.tokens),
        "task_id": entry.task_id,
        "class_index": entry.example.class_index,
        "score": score,
        "inserted_at": entry.inserted_at,
    }


def _decode_entry(data: dict[str, Any]) -> BufferEntry:
    score = None
    if data["score"] is not None:
        s = data["score"]
        score = SurpriseScore(
            float(s["value"]), SurpriseVariant(s["variant"]), int(s["token_count"]), s["scored_at"]
        )
    example = Example(tuple(data["tokens"]), data["task_id"], data["class_index"])
    return BufferEntry(example, score, data["inserted_at"])


def _encode_memory(memory: ReplayMemory | None) -> dict[str, Any] | None:
    if memory is None:
        return None
    return {
        "capacity": memory.capacity,
        "policy": memory.policy.value,
        "timing": memory.timing.value,
        "aging": memory.aging,
        "seen": {str(k): v for k, v in memory.seen.items()},
        "shortfalls": {str(k): v for k, v in memory.shortfalls.items()},
        "entries": [_encode_entry(e) for e in memory.entries],
    }


def _decode_memory(data: dict[str, Any] | None) -> ReplayMemory | None:
    if data is None:
        return None
    memory = ReplayMemory(data["capacity"], data["policy"], data["timing"], data["aging"])
    memory.restore(
        [_decode_entry(e) for e in data["entries"]],
        {int(k): v for k, v in data["seen"].items()},
        {int(k): v for k, v in data["shortfalls"].items()},
    )
    return memory


def checkpoint_bytes(state: RunState, config_hash: str) -> bytes:
    """Serialise `state`. Equal states give equal bytes."""
    tensors = state.model.tensors()
    document = {
        "position": state.position,
        "step": state.step,
        "log_offset": state.log_count,
        "sgd": {"steps": state.sgd_stats.steps, "rejected_steps": state.sgd_stats.rejected_steps},
        "rng": get_rng_state(state.rng),
        "rows": [[float(v) for v in row] for row in state.rows],
        "memory": _encode_memory(state.memory),
        "tensors": [t.name for t in tensors],
    }
    payload = io.BytesIO()
    encoded = _dumps(document)
    payload.write(_U64.pack(len(encoded)))
    payload.write(encoded)
    for t in tensors:
        np.lib.format.write_array(payload, np.ascontiguousarray(t.data), allow_pickle=False)
    payload_bytes = payload.getvalue()
    header = _dumps(
        {
            "format_version": str(FORMAT_VERSION),
            "config_hash": config_hash,
            "payload_sha256": hashlib.sha256(payload_bytes).hexdigest(),
            "payload_length": len(payload_bytes),
        }
    )
    return MAGIC + _U32.pack(len(header)) + header + payload_bytes


def save_checkpoint(state: RunState, path: AnyPath, config_hash: str) -> Path:
    """Write a checkpoint. The file is replaced atomically."""
    result = Path(path)
    tmp = result.with_name(result.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state, config_hash))
    os.replace(tmp, result)
    return result


def _read_header(data: bytes) -> tuple[dict[str, Any], bytes]:
    if not data.startswith(MAGIC):
        raise CorruptCheckpointError("Not a checkpoint: bad magic bytes.")
    offset = len(MAGIC)
    if len(data) < offset + _U32.size:
        raise CorruptCheckpointError("Checkpoint is truncated.")
    (header_length,) = _U32.unpack_from(data, offset)
    offset += _U32.size
    if len(data) < offset + header_length:
        raise CorruptCheckpointError("Checkpoint is truncated.")
    try:
        header = json.loads(data[offset : offset + header_length])
        version = Version(header["format_version"])
    except (ValueError, KeyError, InvalidVersion) as e:
        raise CorruptCheckpointError(f"Checkpoint header is unreadable: {e}") from e
    if version.major != FORMAT_VERSION.major:
        raise CheckpointError(
            f"Unsupported checkpoint format {version}. Expected: {FORMAT_VERSION.major}.x"
        )
    payload = data[offset + header_length :]
    if len(payload) != header["payload_length"]:
        raise CorruptCheckpointError(
            f"Checkpoint is truncated: {len(payload)} of {header['payload_length']} payload bytes."
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError("Checkpoint checksum does not match its contents.")
    return header, payload


def load_checkpoint(path: AnyPath, config: RunConfig, config_hash: str) -> RunState:
    """
    Load a checkpoint written for the run configuration with hash `config_hash`.

    The model architecture comes from `config`; all weights, the memory, the generator state and
    the progress come from the file.
    """
    header, payload = _read_header(Path(path).read_bytes())
    if header["config_hash"] != config_hash:
        raise ConfigMismatchError(
            f"Checkpoint was written for configuration {header['config_hash']}."
            f" Found: {config_hash}"
        )
    stream = io.BytesIO(payload)
    (length,) = _U64.unpack(stream.read(_U64.size))
    document = json.loads(stream.read(length))

    model = init_model(config.model, 0)
    tensors = {t.name: t for t in model.tensors()}
    if sorted(tensors) != sorted(document["tensors"]):
        raise ConfigMismatchError("Checkpoint tensors do not match the model configuration.")
    for name in document["tensors"]:
        tensors[name].assign(np.lib.format.read_array(stream, allow_pickle=False))

    return RunState(
        position=document["position"],
        step=document["step"],
        model=model,
        memory=_decode_memory(document["memory"]),
        rng=restore_rng(document["rng"]),
        rows=[np.array(row, dtype=np.float64) for row in document["rows"]],
        log=[],
        log_offset=document["log_offset"],
        sgd_stats=SgdStats(document["sgd"]["steps"], document["sgd"]["rejected_steps"]),
    )
