"""Binary container, checkpoint and metrics formats.

Container layout (all integers little-endian)::

    b"CADT"                      magic
    u32 version                  currently 1
    u32 section count
    per section:
        u32 name length, UTF-8 name bytes
        u8  dtype code           1 = float32, 2 = float64, 3 = int32
        u32 rank, rank x u32 extents
        payload                  element size x prod(extents) bytes, little-endian

A checkpoint is a container whose sections are the model parameters,
batch-norm buffers (prefixed ``buffer:``) and a ``meta`` section holding
UTF-8 JSON, one byte per int32 element.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import struct
from collections import OrderedDict
from typing import Dict, Mapping

import numpy as np

MAGIC = b"CADT"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4")}
CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int32"): 3}
BUFFER_PREFIX = "buffer:"
METRICS_HEADER = ["epoch", "L_im", "L_cst", "L_cmk", "L_total", "easy_count", "hard_count",
                  "pl_acc_easy", "pl_acc_all", "target_acc"]


class FormatError(ValueError):
    """Malformed container; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _to_storable(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind in "iub" and arr.dtype != np.int32:
        if arr.size and (arr.min() < np.iinfo(np.int32).min or arr.max() > np.iinfo(np.int32).max):
            raise ValueError("integer array does not fit in int32")
        arr = arr.astype(np.int32)
    if arr.dtype not in CODE_OF:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    return arr


def encode_container(sections: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, arr in sections.items():
        arr = _to_storable(arr)
        raw = name.encode("utf-8")
        code = CODE_OF[arr.dtype]
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def decode_container(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, {len(buf) - pos} left", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a CADT container", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "section name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("section name is not valid UTF-8", start + 4) from None
        if name in out:
            raise FormatError(f"duplicate section {name!r}", start)
        code_pos = pos
        code, rank = struct.unpack("<BI", take(5, "dtype/rank"))
        if code not in DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code}", code_pos)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        dt = DTYPE_CODES[code]
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        payload = take(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last section", pos)
    return out


def save_container(path, sections: Mapping[str, np.ndarray]) -> None:
    data = encode_container(sections)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_container(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return decode_container(fh.read())


def text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int32)


def array_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")


# -- datasets ------------------------------------------------------------------
SIDECAR_PREFIX = "sidecar:"


def save_dataset(path, dataset) -> None:
    sections = OrderedDict(images=dataset.images)
    if dataset.labels is not None:
        sections["labels"] = dataset.labels
    for key, arr in dataset.sidecar.items():
        sections[SIDECAR_PREFIX + key] = arr
    save_container(path, sections)


def load_dataset(path, include_sidecar: bool = False):
    """Load a dataset container. The sidecar is dropped unless asked for."""
    from .synthdata import Dataset

    sec = load_container(path)
    if "images" not in sec:
        raise FormatError("dataset container has no 'images' section", 0)
    sidecar = {}
    if include_sidecar:
        sidecar = {k[len(SIDECAR_PREFIX):]: v for k, v in sec.items() if k.startswith(SIDECAR_PREFIX)}
    return Dataset(images=sec["images"], labels=sec.get("labels"), sidecar=sidecar)


# -- checkpoints ---------------------------------------------------------------
def save_checkpoint(path, model, meta: Dict) -> None:
    sections: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, p in model.params.items():
        sections[name] = p.data
    for name, b in model.buffers.items():
        sections[BUFFER_PREFIX + name] = b
    meta = dict(meta)
    # architecture is always recorded so the checkpoint can be rebuilt on load
    meta["backbone"] = dataclasses.asdict(model.backbone_cfg)
    meta["adm"] = dataclasses.asdict(model.adm_cfg)
    meta["frozen"] = sorted(model.frozen)
    sections["meta"] = text_to_array(json.dumps(meta, sort_keys=True))
    save_container(path, sections)


def load_checkpoint(path):
    """Return ``(ModelState, meta)``; configs are rebuilt from the meta snapshot."""
    from .adm import AdmConfig
    from .backbone import BackboneConfig
    from .params import ModelState
    from .tensor import Tensor

    sec = load_container(path)
    if "meta" not in sec:
        raise FormatError("checkpoint has no 'meta' section", 0)
    meta = json.loads(array_to_text(sec.pop("meta")))
    model = ModelState(backbone_cfg=BackboneConfig(**meta["backbone"]), adm_cfg=AdmConfig(**meta["adm"]))
    for name, arr in sec.items():
        if name.startswith(BUFFER_PREFIX):
            model.buffers[name[len(BUFFER_PREFIX):]] = arr.copy()
        else:
            model.params[name] = Tensor(arr.copy(), requires_grad=True)
    for name in meta.get("frozen", []):
        model.frozen.add(name)
        model.params[name].requires_grad = False
    return model, meta


# -- metrics -------------------------------------------------------------------
def format_metric(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def append_metrics_row(path, row: Mapping) -> None:
    """Append one row, writing the header first if the file is new or empty."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_HEADER)
        w.writerow([format_metric(row[k]) for k in METRICS_HEADER])


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
