"""Binary checkpoint format.

Layout: magic ``FERCNN01`` (8 bytes), u32 LE format version (1),
u32 LE length + UTF-8 JSON blob (model config + run metadata),
u32 LE tensor count, then per tensor: u16 LE name length, name bytes,
u8 rank, rank x u32 LE extents, row-major float32 LE payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import Model, ModelConfig, build_model
from .optim import Adam, Sgd
from .tensor import Rng

MAGIC = b"FERCNN01"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class TensorShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    meta: dict  # optimizer meta, rng state, epoch, diverged flag
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def from_model(model: Model, optimizer, rng: Rng, epoch: int,
               diverged: bool = False) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, slot in model.slots.items():
        tensors[name] = slot.value
    for i, bn in enumerate(model.batchnorms(), start=1):
        tensors[f"bn{i}/running_mean"] = bn.running_mean
        tensors[f"bn{i}/running_var"] = bn.running_var
    tensors.update(optimizer.state_tensors())
    meta = {
        "optimizer": optimizer.state_meta(),
        "rng_state": list(rng.state()),
        "epoch": epoch,
        "diverged": diverged,
    }
    return Checkpoint(model.config, meta, tensors)


def save_checkpoint(ckpt: Checkpoint, path):
    blob = json.dumps({"model_config": ckpt.model_config.to_dict(),
                       "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name, t in ckpt.tensors.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.ndim))
            for d in t.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedCheckpointError(
            f"truncated checkpoint while reading {what} "
            f"(wanted {n} bytes, got {len(buf)})")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"format version {version}, expected {FORMAT_VERSION}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, blob_len, "header").decode("utf-8"))
        config = ModelConfig.from_dict(header["model_config"])
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"tensor {i} name length"))
            name = _read_exact(f, name_len, f"tensor {i} name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, f"{name} rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, f"{name} extent"))[0]
                for _ in range(rank))
            size = int(np.prod(shape)) if shape else 1
            payload = _read_exact(f, 4 * size, f"{name} payload")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    ckpt = Checkpoint(config, header["meta"], tensors)
    _validate_shapes(ckpt)
    return ckpt


def _expected_param_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    trace = config.shape_trace()
    cin = config.input_shape[0]
    k = config.kernel
    for i, cout in enumerate(config.conv_channels, start=1):
        shapes[f"conv{i}/weight"] = (cout, cin, k, k)
        shapes[f"conv{i}/bias"] = (cout,)
        shapes[f"bn{i}/gamma"] = (cout,)
        shapes[f"bn{i}/beta"] = (cout,)
        shapes[f"bn{i}/running_mean"] = (cout,)
        shapes[f"bn{i}/running_var"] = (cout,)
        cin = cout
    c, h, w = trace[-1]
    shapes["fc1/weight"] = (c * h * w, config.hidden_units)
    shapes["fc1/bias"] = (config.hidden_units,)
    shapes["fc2/weight"] = (config.hidden_units, config.num_classes)
    shapes["fc2/bias"] = (config.num_classes,)
    return shapes


def _validate_shapes(ckpt: Checkpoint):
    expected = _expected_param_shapes(ckpt.model_config)
    for name, shape in expected.items():
        if name not in ckpt.tensors:
            raise TensorShapeError(f"checkpoint missing tensor {name!r}")
        got = ckpt.tensors[name].shape
        if got != shape:
            raise TensorShapeError(
                f"tensor {name!r} has shape {got}, config implies {shape}")


def restore(ckpt: Checkpoint):
    """Rebuild (model, optimizer, rng) from a loaded checkpoint."""
    rng = Rng.from_state(ckpt.meta["rng_state"])
    model = build_model(ckpt.model_config, Rng(0), dropout_rng=rng)
    for name, slot in model.slots.items():
        slot.value[...] = ckpt.tensors[name]
    for i, bn in enumerate(model.batchnorms(), start=1):
        bn.running_mean[...] = ckpt.tensors[f"bn{i}/running_mean"]
        bn.running_var[...] = ckpt.tensors[f"bn{i}/running_var"]
    opt_meta = ckpt.meta["optimizer"]
    opt_tensors = {k: v for k, v in ckpt.tensors.items() if k.startswith("opt/")}
    if opt_meta["kind"] == "sgd":
        optimizer = Sgd.from_state(opt_meta, opt_tensors)
    elif opt_meta["kind"] == "adam":
        optimizer = Adam.from_state(opt_meta, opt_tensors)
    else:
        raise CheckpointError(f"unknown optimizer kind {opt_meta['kind']!r}")
    return model, optimizer, rng
