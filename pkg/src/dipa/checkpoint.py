"""Versioned binary checkpoint container.

Layout (all little-endian):

    bytes 0..7    magic  b"DIPACKPT"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..15  uint32 header length in bytes
    header        UTF-8 JSON: encoder config, n/d/k counts, and the
                  offset table ("sections": name -> {offset, shape, dtype})
    payload       raw arrays at the recorded absolute offsets

Sections: one per encoder weight/bias, prototype vectors, active mask,
class_of table, head weights, antitype vectors and provenance. Writing is
deterministic (sorted JSON keys, fixed section order) so identical model
state yields identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Value
from .losses import AntitypeSet
from .model import EncoderConfig, HeadWeights, ProtoPartModel, PrototypeSet

MAGIC = b"DIPACKPT"
VERSION = 1

_DTYPES = {"f4": "<f4", "i4": "<i4", "u1": "<u1"}


class CheckpointError(ValueError):
    pass


def _sections_of(model: ProtoPartModel, antitypes: AntitypeSet) -> list[tuple[str, np.ndarray, str]]:
    secs: list[tuple[str, np.ndarray, str]] = []
    for i, w in enumerate(model.encoder.weights):
        secs.append((f"encoder_w{i}", w.data, "f4"))
    for i, b in enumerate(model.encoder.biases):
        secs.append((f"encoder_b{i}", b.data, "f4"))
    secs.append(("prototypes", model.prototypes.vectors.data, "f4"))
    secs.append(("active", model.prototypes.active.astype(np.uint8), "u1"))
    secs.append(("class_of", model.prototypes.class_of.astype(np.int32), "i4"))
    secs.append(("head_w", model.head.w.data, "f4"))
    av = antitypes.vectors
    if av.size == 0:
        av = np.zeros((0, model.config.latent_dim), dtype=np.float32)
    secs.append(("antitype_vectors", av, "f4"))
    prov = np.asarray(antitypes.provenance, dtype=np.int32).reshape(-1, 2)
    secs.append(("antitype_provenance", prov, "i4"))
    return secs


def save_checkpoint(path: str | Path, model: ProtoPartModel,
                    antitypes: AntitypeSet | None = None) -> None:
    antitypes = antitypes or AntitypeSet()
    secs = _sections_of(model, antitypes)

    # two passes: sizes first so the header can carry absolute offsets
    meta = {}
    for name, arr, code in secs:
        meta[name] = {"shape": list(arr.shape), "dtype": code,
                      "nbytes": int(arr.astype(_DTYPES[code]).nbytes)}

    def header_bytes(with_offsets: dict) -> bytes:
        header = {
            "encoder_config": model.config.to_dict(),
            "n_classes": model.n_classes,
            "n_prototypes": model.prototypes.n,
            "latent_dim": model.config.latent_dim,
            "per_class": model.prototypes.per_class,
            "eps": model.eps,
            "sections": with_offsets,
        }
        return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    # compute header size with dummy offsets of the same width, then fill in
    probe = {name: {**m, "offset": 0} for name, m in meta.items()}
    base = len(MAGIC) + 8 + len(header_bytes(probe))
    # offsets are plain ints; their digit width can change the header length,
    # so iterate until the layout is stable
    for _ in range(4):
        offset = base
        table = {}
        for name, arr, code in secs:
            table[name] = {**meta[name], "offset": offset}
            offset += meta[name]["nbytes"]
        hb = header_bytes(table)
        new_base = len(MAGIC) + 8 + len(hb)
        if new_base == base:
            break
        base = new_base
    else:
        raise CheckpointError("header layout failed to stabilize")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).tobytes())
        f.write(np.uint32(len(hb)).tobytes())
        f.write(hb)
        for name, arr, code in secs:
            assert f.tell() == table[name]["offset"]
            f.write(np.ascontiguousarray(arr.astype(_DTYPES[code])).tobytes())


def load_checkpoint(path: str | Path) -> tuple[ProtoPartModel, AntitypeSet]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    version = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    hlen = int(np.frombuffer(blob[12:16], dtype="<u4")[0])
    header = json.loads(blob[16:16 + hlen].decode())

    def read(name: str) -> np.ndarray:
        sec = header["sections"][name]
        dt = np.dtype(_DTYPES[sec["dtype"]])
        count = int(np.prod(sec["shape"])) if sec["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=sec["offset"])
        return arr.reshape(sec["shape"]).copy()

    config = EncoderConfig.from_dict(header["encoder_config"])
    model = ProtoPartModel(config=config, n_classes=header["n_classes"],
                           per_class=header["per_class"], eps=header["eps"], seed=0)
    for i in range(len(model.encoder.weights)):
        model.encoder.weights[i] = Value(read(f"encoder_w{i}"))
        model.encoder.biases[i] = Value(read(f"encoder_b{i}"))
    model.prototypes = PrototypeSet(
        vectors=Value(read("prototypes")),
        class_of=read("class_of").astype(np.int32),
        active=read("active").astype(bool),
        per_class=header["per_class"])
    model.head = HeadWeights(w=Value(read("head_w")))
    prov = read("antitype_provenance")
    antitypes = AntitypeSet(
        vectors=read("antitype_vectors").astype(np.float32),
        provenance=[tuple(int(x) for x in row) for row in prov])
    return model, antitypes
