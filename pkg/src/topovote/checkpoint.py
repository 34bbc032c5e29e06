"""Versioned binary container for network parameters.

Layout: 8-byte magic, uint32 format version, uint64 header length, a
JSON header (architecture descriptor, tensor table, metadata map,
payload digest), then the tensor payload as little-endian float64 in
C order. Saves are deterministic: the same network and metadata always
produce the same bytes, and a load followed by a save reproduces the
file exactly.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct

import numpy as np

from . import gradnet as gn

MAGIC = b"NMLCKPT1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable or unusable checkpoint files."""


class CheckpointFormatError(CheckpointError):
    """Structurally invalid container, header or tensor table."""


class VersionMismatchError(CheckpointError):
    """Format version is one this build does not read."""


class ChecksumError(CheckpointError):
    """Tensor payload does not match its recorded digest."""


def _encode_layer(layer):
    if isinstance(layer, gn.Dense):
        return {"kind": "dense", "in_features": layer.in_features,
                "out_features": layer.out_features}
    if isinstance(layer, gn.Conv2D):
        return {"kind": "conv2d", "in_channels": layer.in_channels,
                "out_channels": layer.out_channels, "kernel": layer.kernel,
                "stride": layer.stride}
    if isinstance(layer, gn.ReLU):
        return {"kind": "relu"}
    if isinstance(layer, gn.Flatten):
        return {"kind": "flatten"}
    raise ValueError(f"cannot serialize layer type {type(layer).__name__}")


def _decode_layer(desc):
    try:
        kind = desc["kind"]
        if kind == "dense":
            return gn.Dense(desc["in_features"], desc["out_features"])
        if kind == "conv2d":
            return gn.Conv2D(desc["in_channels"], desc["out_channels"],
                             desc["kernel"], desc["stride"])
        if kind == "relu":
            return gn.ReLU()
        if kind == "flatten":
            return gn.Flatten()
    except (TypeError, KeyError) as exc:
        raise CheckpointFormatError(f"malformed layer descriptor: {desc!r}") from exc
    raise CheckpointFormatError(f"unknown layer kind {kind!r}")


def save_checkpoint(net, path, metadata=None):
    """Write net to path, returning the path.

    metadata must be a JSON-serializable mapping; tuples inside it come
    back as lists on load.
    """
    metadata = dict(metadata or {})
    try:
        json.dumps(metadata)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"metadata is not JSON-serializable: {exc}") from exc
    table = []
    payload = bytearray()
    for name in sorted(net.params):
        raw = np.ascontiguousarray(net.params[name], dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(net.params[name].shape),
                      "offset": len(payload), "nbytes": len(raw)})
        payload += raw
    header = {
        "architecture": {
            "layers": [_encode_layer(layer) for layer in net.layers],
            "input_shape": list(net.input_shape),
            "num_classes": net.num_classes,
        },
        "tensors": table,
        "metadata": metadata,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return str(path)


def _field(mapping, key):
    if not isinstance(mapping, dict) or key not in mapping:
        raise CheckpointFormatError(f"header missing field {key!r}")
    return mapping[key]


def _read_container(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise CheckpointFormatError("file too short for a checkpoint header")
    if raw[:8] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:8]!r}")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint has format version {version}; this build reads "
            f"version {FORMAT_VERSION}"
        )
    header_len = struct.unpack("<Q", raw[12:20])[0]
    if len(raw) < 20 + header_len:
        raise CheckpointFormatError("file ends inside the header")
    try:
        header = json.loads(raw[20:20 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}") from exc
    payload = raw[20 + header_len:]
    if hashlib.sha256(payload).hexdigest() != _field(header, "payload_sha256"):
        raise ChecksumError("tensor payload does not match its digest")
    if not isinstance(_field(header, "metadata"), dict):
        raise CheckpointFormatError("metadata is not a mapping")
    return header, payload


def load_checkpoint(path):
    """Reconstruct the Network stored at path, bit-exactly."""
    header, payload = _read_container(path)
    arch = _field(header, "architecture")
    layers = tuple(_decode_layer(d) for d in _field(arch, "layers"))
    try:
        net = gn.build_network(layers, _field(arch, "input_shape"),
                               _field(arch, "num_classes"),
                               np.random.default_rng(0))
    except Exception as exc:
        raise CheckpointFormatError(f"architecture descriptor is invalid: {exc}") from exc
    expected = {name: arr.shape for name, arr in net.params.items()}
    table = _field(header, "tensors")
    names = [_field(t, "name") for t in table]
    if sorted(names) != sorted(expected):
        raise CheckpointFormatError(
            f"tensor table {sorted(names)} does not match the architecture's "
            f"parameters {sorted(expected)}"
        )
    for entry in table:
        name = entry["name"]
        shape = tuple(_field(entry, "shape"))
        # strict int check: JSON corruption can yield floats that compare
        # equal to the expected ints but crash reshape and slicing
        if shape != expected[name] or not all(isinstance(d, int) for d in shape):
            raise CheckpointFormatError(
                f"tensor {name} has shape {shape}, architecture expects "
                f"{expected[name]}"
            )
        nbytes = _field(entry, "nbytes")
        offset = _field(entry, "offset")
        if not (isinstance(nbytes, int) and nbytes == math.prod(shape) * 8):
            raise CheckpointFormatError(f"tensor {name} byte count is wrong")
        if not (isinstance(offset, int) and 0 <= offset <= len(payload) - nbytes):
            raise CheckpointFormatError(f"tensor {name} lies outside the payload")
        flat = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8")
        net.params[name] = flat.reshape(shape).astype(np.float64)
    return net


def checkpoint_metadata(path):
    """Return the metadata map stored alongside the tensors."""
    header, _ = _read_container(path)
    return header["metadata"]


ADVSET_MAGIC = b"NMLADVS1"


def save_advset(advset, path):
    """Persist an adversarial dataset; same container idea as checkpoints.

    All records must share one input shape. Originals and adversarials go
    into the payload as two stacked float64 blocks; per-record scalars
    live in the JSON header.
    """
    from . import topo  # local import keeps module load order flexible

    if not isinstance(advset, topo.AdvDataset) or not advset.records:
        raise ValueError("expected a non-empty AdvDataset")
    shape = advset.records[0].original.shape
    if any(r.original.shape != shape for r in advset.records):
        raise ValueError("records do not share one input shape")
    originals = np.stack([r.original for r in advset.records])
    adversarials = np.stack([r.adversarial for r in advset.records])
    payload = (np.ascontiguousarray(originals, dtype="<f8").tobytes()
               + np.ascontiguousarray(adversarials, dtype="<f8").tobytes())
    header = {
        "shape": list(shape),
        "count": len(advset.records),
        "epsilons": list(advset.epsilons),
        "records": [
            {"sample_id": r.sample_id, "true_class": r.true_class,
             "target_class": r.target_class, "epsilon": r.epsilon,
             "source_tag": r.source_tag, "norm": r.norm}
            for r in advset.records
        ],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(ADVSET_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return str(path)


def load_advset(path):
    """Reload a persisted adversarial dataset, re-running record validation."""
    from . import attack, topo

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise CheckpointFormatError("file too short for an advset header")
    if raw[:8] != ADVSET_MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:8]!r}")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"advset has format version {version}; this build reads "
            f"version {FORMAT_VERSION}"
        )
    header_len = struct.unpack("<Q", raw[12:20])[0]
    if len(raw) < 20 + header_len:
        raise CheckpointFormatError("file ends inside the header")
    try:
        header = json.loads(raw[20:20 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}") from exc
    payload = raw[20 + header_len:]
    if hashlib.sha256(payload).hexdigest() != _field(header, "payload_sha256"):
        raise ChecksumError("advset payload does not match its digest")
    shape = tuple(_field(header, "shape"))
    count = _field(header, "count")
    table = _field(header, "records")
    if (not isinstance(count, int) or count < 1 or len(table) != count
            or not all(isinstance(d, int) and d > 0 for d in shape)):
        raise CheckpointFormatError("record table is inconsistent")
    block = math.prod(shape) * count
    if len(payload) != block * 16:
        raise CheckpointFormatError("payload size does not match the table")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    originals = flat[:block].reshape((count,) + shape)
    adversarials = flat[block:].reshape((count,) + shape)
    try:
        records = tuple(
            attack.AdvExample(
                originals[i], adversarials[i], entry["true_class"],
                entry["target_class"], entry["epsilon"], entry["source_tag"],
                sample_id=entry["sample_id"], norm=entry["norm"])
            for i, entry in enumerate(table)
        )
        return topo.AdvDataset(records, tuple(_field(header, "epsilons")))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"record table is invalid: {exc}") from exc
