"""
Checkpoint persistence
A checkpoint is a directory with a text manifest (model.manifest) and one
flat little-endian f32 buffer (params.bin) holding every parameter in
manifest order
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from service import keyvalue
from service.errors import DataError
from service.model import HeadMaskTransformer, ModelConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "model.manifest"
PARAMS_NAME = "params.bin"
WIRE_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    """A loaded model plus the free-form metadata stored alongside it"""

    model: HeadMaskTransformer
    meta: Dict[str, str] = field(default_factory=dict)
    path: Optional[Path] = None


def save_checkpoint(
    model: HeadMaskTransformer,
    directory: Union[str, Path],
    meta: Optional[Mapping[str, object]] = None,
) -> Path:
    """
    Write ``model`` to ``directory``

    Args:
        model: Model to persist
        directory: Target directory (created if missing)
        meta: Extra entries stored under ``meta.*`` (task, seed, step...)

    Returns:
        Path of the manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries: Dict[str, object] = {"format_version": FORMAT_VERSION}
    for key, value in model.config.model_dump().items():
        entries[f"config.{key}"] = value

    offset = 0
    chunks = []
    for index, (name, tensor) in enumerate(model.params.items()):
        blob = np.ascontiguousarray(tensor.data, dtype=WIRE_DTYPE).tobytes()
        entries[f"param.{index}.name"] = name
        entries[f"param.{index}.shape"] = "x".join(str(d) for d in tensor.shape)
        entries[f"param.{index}.offset"] = offset
        entries[f"param.{index}.nbytes"] = len(blob)
        chunks.append(blob)
        offset += len(blob)
    entries["param.count"] = len(chunks)
    for key, value in (meta or {}).items():
        entries[f"meta.{key}"] = value

    (directory / PARAMS_NAME).write_bytes(b"".join(chunks))
    manifest = keyvalue.write_file(directory / MANIFEST_NAME, entries)
    logger.info(f"💾 Checkpoint saved: {directory} ({offset} bytes)")
    return manifest


def _model_config(entries: Mapping[str, str]) -> ModelConfig:
    fields = {key[len("config."):]: value for key, value in entries.items() if key.startswith("config.")}
    try:
        return ModelConfig(**fields)
    except ValidationError as e:
        raise DataError(f"checkpoint config is invalid: {e}") from e


def _shape(text: str) -> Tuple[int, ...]:
    return tuple(int(d) for d in text.split("x")) if text else ()


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``

    Raises:
        DataError: Missing files, unknown format version, or parameters that
            do not match the model the manifest's config describes
    """
    directory = Path(directory)
    entries = keyvalue.read_file(directory / MANIFEST_NAME)
    if entries.get("format_version") != str(FORMAT_VERSION):
        raise DataError(f"{directory}: unsupported checkpoint format {entries.get('format_version')!r}")

    model = HeadMaskTransformer(_model_config(entries))
    try:
        buffer = (directory / PARAMS_NAME).read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"{directory}: missing {PARAMS_NAME}") from e

    count = int(entries.get("param.count", -1))
    if count != len(model.params):
        raise DataError(f"{directory}: manifest lists {count} parameters, model has {len(model.params)}")

    expected_offset = 0
    for index, (name, tensor) in enumerate(model.params.items()):
        stored_name = entries.get(f"param.{index}.name")
        shape = _shape(entries.get(f"param.{index}.shape", ""))
        offset = int(entries.get(f"param.{index}.offset", -1))
        nbytes = int(entries.get(f"param.{index}.nbytes", -1))
        if stored_name != name or shape != tensor.shape:
            raise DataError(f"{directory}: parameter {index} is {stored_name} {shape}, "
                            f"model expects {name} {tensor.shape}")
        if offset != expected_offset or nbytes != tensor.size * WIRE_DTYPE.itemsize:
            raise DataError(f"{directory}: bad offset/size for {name}")
        if offset + nbytes > len(buffer):
            raise DataError(f"{directory}: {PARAMS_NAME} is truncated at {name}")
        array = np.frombuffer(buffer, dtype=WIRE_DTYPE, count=tensor.size, offset=offset)
        tensor.data = array.astype(model.dtype).reshape(shape)
        expected_offset += nbytes
    if expected_offset != len(buffer):
        raise DataError(f"{directory}: {len(buffer) - expected_offset} trailing bytes in {PARAMS_NAME}")

    meta = {key[len("meta."):]: value for key, value in entries.items() if key.startswith("meta.")}
    logger.info(f"✅ Checkpoint loaded: {directory}")
    return Checkpoint(model=model, meta=meta, path=directory)
