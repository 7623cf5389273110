"""Versioned key->tensor container with a JSON header.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header (metadata plus a tensor directory), then the raw float64 buffers
back to back. Raw bytes make the round trip exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"CSCKPT01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    directory = []
    offset = 0
    buffers = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        raw = arr.tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": directory},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format_version')}"
            )
        body = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype=np.float64).reshape(
            entry["shape"]
        ).copy()
    return header["meta"], tensors


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- model / generator specific wrappers -------------------------------------


def save_base_model(path, model) -> None:
    from .data import FieldSpec  # noqa: F401  (documents the header contents)

    meta = {
        "kind": "base_model",
        "variant": model.variant,
        "m": model.m,
        "hidden_dims": model.hidden_dims,
        "seed": model.seed,
        "field_specs": [
            {"name": s.name, "kind": s.kind, "vocab_size": s.vocab_size, "group": s.group}
            for s in model.field_specs
        ],
    }
    tensors = {p.name: p.value for p in model.parameters()}
    save_checkpoint(path, meta, tensors)


def load_base_model(path):
    from .data import FieldSpec
    from .models import build_model

    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "base_model":
        raise CheckpointError(f"{path}: not a base-model checkpoint")
    specs = [FieldSpec(**fs) for fs in meta["field_specs"]]
    model = build_model(meta["variant"], specs, meta["m"], meta["hidden_dims"], meta["seed"])
    for p in model.parameters():
        if p.name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {p.name}")
        if tensors[p.name].shape != p.value.shape:
            raise CheckpointError(f"{path}: shape mismatch for {p.name}")
        p.value = tensors[p.name]
    return model


def save_generator(path, generator, base_checkpoint_path) -> None:
    meta = {
        "kind": "generator",
        "pooling": generator.pooling,
        "l2": generator.l2,
        "base_sha256": file_sha256(base_checkpoint_path),
    }
    save_checkpoint(path, meta, {"gen.w": generator.w.value})


def load_generator(path, model, base_checkpoint_path):
    from .metagen import Generator

    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "generator":
        raise CheckpointError(f"{path}: not a generator checkpoint")
    actual = file_sha256(base_checkpoint_path)
    if actual != meta["base_sha256"]:
        raise CheckpointError(
            "generator checkpoint was trained against a different base model "
            f"(expected {meta['base_sha256'][:12]}..., found {actual[:12]}...)"
        )
    gen = Generator(model, pooling=meta["pooling"], l2=meta["l2"])
    gen.w.value = tensors["gen.w"]
    return gen
