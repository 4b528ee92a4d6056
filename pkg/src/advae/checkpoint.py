"""Single binary checkpoint format shared by every model in the package.

Layout: magic b"ADVAE1", little-endian u64 header length, UTF-8 JSON
header, then raw tensor bytes concatenated in directory order. The
header carries config, epoch/step, the tensor directory (name, shape,
dtype, offset, nbytes), optional RNG states and loss history, and a
sha256 over the tensor blob so corruption and truncation are detected
before any model is built.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, CheckpointFormatError, CheckpointVersionError

MAGIC = b"ADVAE1"
FORMAT_VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "i8": np.dtype("<i8")}


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.int64:
        return "i8"
    raise CheckpointFormatError(f"unsupported tensor dtype {arr.dtype}")


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    rng: dict | None = None
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: Path | str, ckpt: Checkpoint) -> Path:
    path = Path(path)
    blob = bytearray()
    directory = []
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": code,
                "offset": len(blob),
                "nbytes": len(raw),
            }
        )
        blob.extend(raw)
    header = {
        "version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "tensors": directory,
        "rng": ckpt.rng,
        "history": ckpt.history,
        "meta": ckpt.meta,
        "data_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header_bytes)))
            f.write(header_bytes)
            f.write(bytes(blob))
    except OSError as e:
        raise ArtifactError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ArtifactError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    header_end = len(MAGIC) + 8 + header_len
    if len(data) < header_end:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {header.get('version')} incompatible with {FORMAT_VERSION}"
        )
    blob = data[header_end:]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(blob) != expected:
        raise CheckpointFormatError(
            f"{path}: tensor data truncated ({len(blob)} bytes, expected {expected})"
        )
    if hashlib.sha256(blob).hexdigest() != header["data_sha256"]:
        raise CheckpointFormatError(f"{path}: tensor data checksum mismatch")
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise CheckpointFormatError(f"{path}: unknown dtype {entry['dtype']!r}")
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        tensors=tensors,
        epoch=header["epoch"],
        step=header["step"],
        rng=header["rng"],
        history=header["history"],
        meta=header.get("meta", {}),
    )


def checkpoint_hash(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_classifier(path: Path | str, model, metrics: dict | None = None) -> Path:
    """Persist any of the classifier models with its config and metrics."""
    from .networks import module_tensors

    config = model.config.to_dict()
    if hasattr(model, "num_topics"):
        config["num_topics"] = model.num_topics
    ckpt = Checkpoint(
        kind=model.kind,
        config=config,
        tensors=module_tensors(model),
        meta={"metrics": metrics or {}},
    )
    return save_checkpoint(path, ckpt)


def load_classifier(path: Path | str):
    from .classifiers import (
        AttributeClassifier,
        ClassifierConfig,
        ExpressionClassifier,
        TopicClassifier,
    )
    from .networks import load_module_tensors

    ckpt = load_checkpoint(path)
    config = ClassifierConfig.from_dict(ckpt.config)
    if ckpt.kind == AttributeClassifier.kind:
        model = AttributeClassifier(config)
    elif ckpt.kind == ExpressionClassifier.kind:
        model = ExpressionClassifier(config)
    elif ckpt.kind == TopicClassifier.kind:
        model = TopicClassifier(config, int(ckpt.config["num_topics"]))
    else:
        raise CheckpointFormatError(f"{path}: unknown classifier kind {ckpt.kind!r}")
    load_module_tensors(model, ckpt.tensors)
    model.eval()
    return model
