"""
Binary checkpoint files (.omoe).

Layout (all integers little-endian):

    b"OMOE"                    magic
    u32                        format version (1)
    u32 + bytes                length-prefixed UTF-8 JSON: {"model": ...,
                               "train": ..., plus any extra sections}
    u64                        training step
    u32                        number of tensors
    per tensor:
        u16 + bytes            length-prefixed UTF-8 name
        u8                     dtype code (1 = float64, 2 = int64)
        u8                     number of dimensions
        u64 * ndim             dimensions
        payload                little-endian values, C order

Parameters are stored as "param/<name>", Adam moments as "adam.m/<name>"
and "adam.v/<name>". The batch sampler is reseeded from (seed, step) at
every step, so no random generator state needs saving.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from .errors import DecodeError
from .model import ModelConfig, MoETransformer

log = logging.getLogger(__name__)

_DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_OF_KIND = {"f": 1, "i": 2}

PARAM_PREFIX = "param/"
ADAM_M_PREFIX = "adam.m/"
ADAM_V_PREFIX = "adam.v/"


@dataclass
class Checkpoint:
    config: dict
    step: int
    tensors: dict

    def section(self, prefix):
        """Tensors whose names start with prefix, with the prefix removed"""
        return {
            name[len(prefix) :]: value
            for name, value in self.tensors.items()
            if name.startswith(prefix)
        }

    @property
    def params(self):
        return self.section(PARAM_PREFIX)


def _encode_tensor(name, value):
    value = np.asarray(value)
    if value.dtype.kind not in _CODE_OF_KIND:
        raise DecodeError(f"tensor {name} has unsupported dtype {value.dtype}")
    code = _CODE_OF_KIND[value.dtype.kind]
    encoded_name = name.encode("utf-8")
    header = struct.pack("<H", len(encoded_name)) + encoded_name
    header += struct.pack("<BB", code, value.ndim)
    header += struct.pack(f"<{value.ndim}Q", *value.shape)
    payload = np.ascontiguousarray(value, dtype=_DTYPE_CODES[code]).tobytes()
    return header + payload


def save_checkpoint(path, config, step, tensors):
    """
    Writes a checkpoint. The file is written next to its destination and
    renamed into place, so an interrupted save never leaves half a file.

    :param path: destination .omoe path
    :param config: JSON-serializable dict
    :param step: training step the state belongs to
    :param tensors: dict name -> numpy array (float64 or int64)

    """
    encoded_config = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_FORMAT_VERSION),
        struct.pack("<I", len(encoded_config)),
        encoded_config,
        struct.pack("<Q", step),
        struct.pack("<I", len(tensors)),
    ]
    parts += [_encode_tensor(name, value) for name, value in tensors.items()]

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as handle:
        for part in parts:
            handle.write(part)
    os.replace(tmp_path, path)
    log.info("saved checkpoint for step %d to %s", step, path)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, count):
        if self.offset + count > len(self.data):
            raise DecodeError(f"{self.path}: checkpoint file is truncated")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """
    Reads a checkpoint written by save_checkpoint.

    :raises DecodeError: on a wrong magic, an unknown version or a
        truncated/corrupt file

    """
    with open(path, "rb") as handle:
        reader = _Reader(handle.read(), path)

    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DecodeError(f"{path}: not a moescope checkpoint")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DecodeError(
            f"{path}: unsupported checkpoint version {version}"
        )
    (config_len,) = reader.unpack("<I")
    try:
        config = json.loads(reader.take(config_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DecodeError(f"{path}: corrupt checkpoint config") from err
    (step,) = reader.unpack("<Q")
    (count,) = reader.unpack("<I")

    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise DecodeError(f"{path}: tensor {name} has dtype code {code}")
        shape = reader.unpack(f"<{ndim}Q")
        dtype = _DTYPE_CODES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        values = np.frombuffer(reader.take(size), dtype=dtype)
        # Copy into native byte order so the arrays are writable
        tensors[name] = values.reshape(shape).astype(dtype.newbyteorder("="))
    if reader.offset != len(reader.data):
        raise DecodeError(f"{path}: trailing bytes after the last tensor")
    log.debug("loaded checkpoint %s at step %d", path, step)
    return Checkpoint(config=config, step=step, tensors=tensors)


def load_model(path):
    """
    Rebuilds the model stored in a checkpoint.

    :returns: (MoETransformer, Checkpoint)

    """
    checkpoint = load_checkpoint(path)
    if "model" not in checkpoint.config:
        raise DecodeError(f"{path}: checkpoint has no model config")
    model_config = ModelConfig.from_dict(checkpoint.config["model"])
    return MoETransformer(model_config, checkpoint.params), checkpoint
