"""Versioned binary checkpoint container.

Layout: an 8-byte magic, a little-endian uint32 format version, a
little-endian uint32 header length, a canonical JSON header (sorted keys,
no whitespace), then the raw little-endian tensor payload. Identical
inputs serialize to identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .model import GlcnnModel, ModelConfig, audit_shapes
from .optim import Adam
from .ordinal import RankSpec

MAGIC = b"GAITCKPT"
VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def _config_to_dict(config: ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    for key in ("crop_rows", "conv_channels", "conv_kernels"):
        d[key] = list(d[key])
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    kwargs = dict(d)
    for key in ("crop_rows", "conv_channels", "conv_kernels"):
        kwargs[key] = tuple(kwargs[key])
    return ModelConfig(**kwargs)


def save_checkpoint(path: str, model: GlcnnModel, rank: RankSpec,
                    run_echo: dict | None = None,
                    adam: Adam | None = None) -> None:
    """Serialize a model (and optionally optimizer state) to ``path``."""
    precision = str(model.params["fc4.weight"].dtype)
    code = _DTYPE_CODES[precision]
    tensors = []
    chunks = []
    offset = 0

    def add(name: str, arr: np.ndarray):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape),
                        "dtype": precision, "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for name in sorted(model.params):
        add(name, model.params[name])

    adam_block = None
    if adam is not None:
        state = adam.state_dict()
        adam_tensors = []
        for kind in ("m", "v"):
            for pname in sorted(state[kind]):
                tag = f"adam.{kind}.{pname}"
                add(tag, state[kind][pname])
                adam_tensors.append(tag)
        adam_block = {"t": state["t"], "hyper": state["hyper"],
                      "tensors": adam_tensors}

    header = {
        "model": _config_to_dict(model.config),
        "rank": {"r_min": rank.r_min, "eta": rank.eta, "count": rank.count},
        "seed": model.seed,
        "precision": precision,
        "run": run_echo or {},
        "tensors": tensors,
        "adam": adam_block,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for chunk in chunks:
            f.write(chunk)


@dataclass
class Checkpoint:
    model: GlcnnModel
    rank: RankSpec
    run: dict
    precision: str
    adam: Adam | None
    version: int


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint; raises :class:`CheckpointError` on any mismatch."""
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version} not supported (expected {VERSION})")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = blob[16 + header_len:]

    def read_tensor(entry) -> np.ndarray:
        code = _DTYPE_CODES.get(entry["dtype"])
        if code is None:
            raise CheckpointError(f"{path}: unknown tensor dtype {entry['dtype']}")
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        return np.frombuffer(raw, dtype=code).reshape(entry["shape"]).copy()

    config = _config_from_dict(header["model"])
    plan = audit_shapes(config)
    arrays = {e["name"]: read_tensor(e) for e in header["tensors"]}
    params = {n: a for n, a in arrays.items() if not n.startswith("adam.")}
    model = GlcnnModel(config, plan, header["seed"], params)

    rank = RankSpec(header["rank"]["r_min"], header["rank"]["eta"],
                    header["rank"]["count"])
    if config.head_mode == "ordinal" and config.k_minus_1 != rank.k_minus_1:
        raise CheckpointError(
            f"{path}: model outputs {config.k_minus_1} classifiers but the "
            f"rank grid implies {rank.k_minus_1}")

    adam = None
    if header.get("adam"):
        block = header["adam"]
        m, v = {}, {}
        for tag in block["tensors"]:
            _, kind, pname = tag.split(".", 2)
            (m if kind == "m" else v)[pname] = arrays[tag]
        adam = Adam.from_state_dict({"t": block["t"], "hyper": block["hyper"],
                                     "m": m, "v": v})
    return Checkpoint(model, rank, header.get("run", {}),
                      header["precision"], adam, version)
