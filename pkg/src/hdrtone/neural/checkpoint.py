"""Versioned binary checkpoints for CAN parameter sets.

Layout: 8-byte magic, little-endian uint32 header length, a JSON header
describing the networks (configs plus tensor names/shapes), then raw
little-endian float32 blocks in header order. A plain-text manifest is
written next to the checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .can import CanConfig, CanParams, LayerSpec

MAGIC = b"HTCKPT01"


def _tensor_entries(cfg: CanConfig, params: CanParams):
    for i, spec in enumerate(cfg.layers):
        yield f"layer{i}.weight", params.weights[i]
        if spec.bias:
            yield f"layer{i}.bias", params.biases[i]
        if spec.adaptive_norm:
            yield f"layer{i}.an", params.an[i]


def save_checkpoint(path, kind: str,
                    networks: list[tuple[str, CanConfig, CanParams]],
                    meta: dict | None = None) -> None:
    """Write networks to ``path`` and a text manifest to ``path + '.manifest'``."""
    path = Path(path)
    header = {"format_version": 1, "kind": kind, "meta": meta or {}, "networks": []}
    blobs: list[bytes] = []
    manifest = [f"checkpoint {path.name}", f"kind {kind}"]
    for name, cfg, params in networks:
        tensors = []
        for tname, arr in _tensor_entries(cfg, params):
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            blobs.append(blob)
            tensors.append({"name": tname, "shape": list(arr.shape)})
            digest = hashlib.sha256(blob).hexdigest()[:16]
            manifest.append(f"{name}/{tname} shape={tuple(arr.shape)} sha256={digest}")
        header["networks"].append({
            "name": name,
            "in_channels": cfg.in_channels,
            "layers": [asdict(s) for s in cfg.layers],
            "tensors": tensors,
        })
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)
    manifest.append(f"parameter_bytes {sum(len(b) for b in blobs)}")
    Path(str(path) + ".manifest").write_text("\n".join(manifest) + "\n")


def load_checkpoint(path, expect_kind: str | None = None):
    """Read a checkpoint; returns (kind, {name: (CanConfig, CanParams)}, meta)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(raw) < 12:
        raise CheckpointError(f"{path} is truncated")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header") from exc
    if header.get("format_version") != 1:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"expected a {expect_kind!r} checkpoint, found {kind!r}")

    offset = 12 + hlen
    networks: dict[str, tuple[CanConfig, CanParams]] = {}
    for net in header["networks"]:
        layers = tuple(LayerSpec(**spec) for spec in net["layers"])
        cfg = CanConfig(layers=layers, in_channels=net["in_channels"])
        arrays: dict[str, np.ndarray] = {}
        for entry in net["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(raw):
                raise CheckpointError(f"{path} is truncated inside tensor {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(
                raw[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
            offset = end
        weights, biases, ans = [], [], []
        for i, spec in enumerate(layers):
            try:
                weights.append(arrays[f"layer{i}.weight"])
            except KeyError as exc:
                raise CheckpointError(f"{path} misses weights for layer {i}") from exc
            biases.append(arrays.get(f"layer{i}.bias") if spec.bias else None)
            ans.append(arrays.get(f"layer{i}.an") if spec.adaptive_norm else None)
            if spec.bias and biases[-1] is None or spec.adaptive_norm and ans[-1] is None:
                raise CheckpointError(f"{path} misses tensors for layer {i}")
        networks[net["name"]] = (cfg, CanParams(weights=weights, biases=biases, an=ans))
    if offset != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - offset} trailing bytes")
    return kind, networks, header.get("meta", {})
