"""Flat, versioned binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"MXLC"
    version u32      currently 1
    cfg_len u64      byte length of the UTF-8 model-config INI text
    cfg     bytes    ModelConfig.to_ini() text
    count   u64      number of named arrays
    per array:
        name_len u16, name UTF-8 bytes
        ndim     u8,  dims ndim x u32
        data     float64 little-endian, row-major

Array names are the model's stable parameter names (for example
``stage2.block4.mlp.fc1.weight`` or ``stage3.pos_emb``), which is what
makes warm starting across checkpoints possible.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import DataError
from .metaformer import MetaFormer, ModelConfig

MAGIC = b"MXLC"
VERSION = 1


def save_arrays(path: str, config_text: str, arrays: dict[str, np.ndarray]):
    cfg = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def load_arrays(path: str) -> tuple[str, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DataError(f"{path}: not a mixerlab checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<Q", fh.read(8))
        config_text = fh.read(cfg_len).decode("utf-8")
        (count,) = struct.unpack("<Q", fh.read(8))
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise DataError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        return config_text, arrays


def save_model(path: str, model: MetaFormer):
    save_arrays(path, model.config.to_ini(), model.state())


def load_model(path: str, seed: int = 0) -> MetaFormer:
    config_text, arrays = load_arrays(path)
    config = ModelConfig.from_ini(config_text)
    model = MetaFormer(config, seed=seed)
    model.load_state(arrays)
    return model
