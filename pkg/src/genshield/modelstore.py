"""Versioned binary serialization of estimator and guardian models.

File layout (all integers little-endian):
    magic            8 bytes  b"GENMODEL"
    format_version   u32      currently 1
    model_kind       u8       1 = estimator, 2 = guardian
    m, d             u32 u32  input shape
    manifest_len     u32
    manifest         UTF-8 JSON: layer specs (+ parameter shapes), stats flag
    stats            2*m f64  per-channel min then max (only if flagged)
    parameters       f32      concatenated in manifest order
    checksum         u32      CRC-32 over all preceding bytes

Trainable/frozen masks are a session property and are not stored; a
loaded estimator is trainable until the caller freezes it.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np

from .dataio import NormalizationStats
from .errors import (
    ModelCorruptionError,
    ModelFormatError,
    ModelIncompatibilityError,
    ModelVersionError,
)
from .estimator import EstimatorModel
from .guardian import GuardianModel
from .nncore import NeuralNet, layer_from_spec

MAGIC = b"GENMODEL"
FORMAT_VERSION = 1
_KIND_CODES = {"estimator": 1, "guardian": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def _net_manifest(net):
    entries = []
    for layer in net.layers:
        entry = dict(layer.spec())
        entry["param_shapes"] = {name: list(arr.shape) for name, arr in layer.params()}
        entries.append(entry)
    return entries


def _net_params(net):
    return [arr for _, _, arr in net.parameters()]


def _model_parts(model):
    if isinstance(model, EstimatorModel):
        kind = "estimator"
        manifest = {
            "trunk": _net_manifest(model.trunk),
            "activity_head": _net_manifest(model.activity_head),
            "gender_head": _net_manifest(model.gender_head),
        }
        params = (
            _net_params(model.trunk)
            + _net_params(model.activity_head)
            + _net_params(model.gender_head)
        )
        stats = model.normalization
    elif isinstance(model, GuardianModel):
        kind = "guardian"
        manifest = {"autoencoder": _net_manifest(model.autoencoder)}
        params = _net_params(model.autoencoder)
        stats = model.normalization
    else:
        raise ModelFormatError(f"cannot serialize {type(model).__name__}")
    return kind, manifest, params, stats


def save(model, path, normalization=None):
    """Write the model; returns the number of bytes written."""
    kind, manifest, params, stats = _model_parts(model)
    stats = normalization or stats
    m, d = model.input_shape
    manifest_doc = dict(manifest)
    manifest_doc["has_stats"] = stats is not None
    manifest_bytes = json.dumps(manifest_doc, sort_keys=True).encode()

    chunks = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<B", _KIND_CODES[kind]),
        struct.pack("<II", m, d),
        struct.pack("<I", len(manifest_bytes)),
        manifest_bytes,
    ]
    if stats is not None:
        chunks.append(np.asarray(stats.channel_min, "<f8").tobytes())
        chunks.append(np.asarray(stats.channel_max, "<f8").tobytes())
    for arr in params:
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(chunks)
    data = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ModelCorruptionError("model file truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]


def _rebuild_net(manifest_entries, reader, dtype=np.float32):
    layers = []
    for entry in manifest_entries:
        layer = layer_from_spec(entry, dtype=dtype)
        declared = entry.get("param_shapes", {})
        actual = {name: list(arr.shape) for name, arr in layer.params()}
        if declared != actual:
            raise ModelIncompatibilityError(
                f"layer {entry.get('kind')}: manifest shapes {declared} "
                f"do not match rebuilt shapes {actual}"
            )
        for name, arr in layer.params():
            raw = reader.take(arr.size * 4)
            arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
        layers.append(layer)
    return NeuralNet(layers)


def load(path):
    """Read a model file back into an EstimatorModel or GuardianModel."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 + 4:
        raise ModelCorruptionError("model file truncated")
    body, stored_crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ModelCorruptionError("checksum mismatch")

    reader = _Reader(body)
    if reader.take(len(MAGIC)) != MAGIC:
        raise ModelFormatError("bad magic: not a model file")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ModelVersionError(
            f"unsupported format version {version} (expected {FORMAT_VERSION})"
        )
    kind_code = reader.u8()
    if kind_code not in _KIND_NAMES:
        raise ModelFormatError(f"unknown model kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]
    m, d = reader.u32(), reader.u32()
    manifest_len = reader.u32()
    try:
        manifest = json.loads(reader.take(manifest_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable manifest: {exc}") from exc

    stats = None
    if manifest.get("has_stats"):
        cmin = np.frombuffer(reader.take(m * 8), dtype="<f8").copy()
        cmax = np.frombuffer(reader.take(m * 8), dtype="<f8").copy()
        stats = NormalizationStats(channel_min=cmin, channel_max=cmax)

    if kind == "estimator":
        model = EstimatorModel(
            trunk=_rebuild_net(manifest["trunk"], reader),
            activity_head=_rebuild_net(manifest["activity_head"], reader),
            gender_head=_rebuild_net(manifest["gender_head"], reader),
            input_shape=(m, d),
            normalization=stats,
        )
    else:
        model = GuardianModel(
            autoencoder=_rebuild_net(manifest["autoencoder"], reader),
            input_shape=(m, d),
            normalization=stats,
        )
    if reader.pos != len(body):
        raise ModelIncompatibilityError(
            f"{len(body) - reader.pos} unexpected trailing bytes after parameters"
        )
    return model


def fingerprint(path):
    """-> (hex digest of the file, human-readable manifest summary)."""
    model = load(path)  # validates format and checksum
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    kind, manifest, params, stats = _model_parts(model)
    lines = [
        f"kind: {kind}",
        f"input_shape: {model.input_shape}",
        f"parameters: {sum(a.size for a in params)}",
        f"normalization_stats: {'yes' if stats is not None else 'no'}",
    ]
    for section, entries in manifest.items():
        lines.append(f"{section}:")
        for entry in entries:
            shapes = entry.get("param_shapes") or {}
            extra = (
                " " + " ".join(f"{k}={v}" for k, v in shapes.items()) if shapes else ""
            )
            hyper = {
                k: v for k, v in entry.items() if k not in ("kind", "param_shapes")
            }
            hp = f" {hyper}" if hyper else ""
            lines.append(f"  - {entry['kind']}{hp}{extra}")
    return digest, "\n".join(lines)
