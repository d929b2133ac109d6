"""GRAD1 tensor containers, model/GRADIEND checkpoints and CSV/JSON reports.

GRAD1 layout::

    b"GRD1" | u32 LE header length | UTF-8 JSON header | little-endian f32 payload

The header is ``{"version": 1, "entries": [{name, shape, dtype, offset,
length}, ...]}`` with offsets and lengths in bytes relative to the payload.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Gradiend
from .gradients import FlatIndexMap
from .lm import ModelConfig, ParamStore

MAGIC = b"GRD1"
VERSION = 1
_DTYPE = np.dtype("<f4")


class ContainerError(ValueError):
    """Malformed GRAD1 bytes."""


class IntegrityError(RuntimeError):
    """An artifact does not match its recorded content hash."""


def save_container(entries: Mapping[str, np.ndarray] | Sequence[tuple[str, np.ndarray]]) -> bytes:
    items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ValueError("entry names must be unique")
    header, chunks, offset = [], [], 0
    for name, arr in items:
        a = np.asarray(arr)
        data = np.ascontiguousarray(a, dtype=_DTYPE).tobytes()
        header.append({"name": name, "shape": list(a.shape), "dtype": "f32", "offset": offset, "length": len(data)})
        chunks.append(data)
        offset += len(data)
    head = json.dumps({"version": VERSION, "entries": header}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def load_container(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ContainerError("bad magic: not a GRAD1 container")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise ContainerError("truncated header")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from None
    if header.get("version") != VERSION:
        raise ContainerError(f"unknown container version {header.get('version')!r}")
    payload = memoryview(blob)[8 + hlen:]
    out, spans = {}, []
    for e in header["entries"]:
        if e["dtype"] != "f32":
            raise ContainerError(f"unsupported dtype {e['dtype']!r} for {e['name']}")
        off, length, shape = int(e["offset"]), int(e["length"]), tuple(e["shape"])
        if length != 4 * math.prod(shape):
            raise ContainerError(f"length of {e['name']} does not match its shape")
        if off < 0 or off + length > len(payload):
            raise ContainerError(f"truncated payload: {e['name']} extends past the end")
        if e["name"] in out:
            raise ContainerError(f"duplicate entry {e['name']}")
        spans.append((off, off + length))
        out[e["name"]] = np.frombuffer(payload[off:off + length], dtype=_DTYPE).astype(np.float32).reshape(shape)
    spans.sort()
    if any(a[1] > b[0] for a, b in zip(spans, spans[1:])):
        raise ContainerError("overlapping entries")
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_json(path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- checkpoints

def save_model(path, model: ParamStore) -> None:
    """Parameters to ``path`` (GRAD1) and the config to ``path + '.json'``."""
    _atomic_write(path, save_container([(n, model[n]) for n in model.names()]))
    write_json(str(path) + ".json", {"kind": "micro-lm", "config": model.config.to_dict()})


def load_model(path) -> ParamStore:
    meta = read_json(str(path) + ".json")
    params = load_container(Path(path).read_bytes())
    return ParamStore(ModelConfig(**meta["config"]), params)


def save_gradiend(path, g: Gradiend, extra: Mapping | None = None) -> None:
    entries = [("b_dec", g.b_dec), ("b_enc", np.array([g.b_enc], dtype=np.float32)),
               ("w_dec", g.w_dec), ("w_enc", g.w_enc)]
    _atomic_write(path, save_container(entries))
    meta = {"kind": "gradiend", "class_pair": list(g.class_pair), "n": g.n,
            "sign_standardized": g.sign_standardized,
            "index": g.index.to_json() if g.index is not None else None}
    meta.update(extra or {})
    write_json(str(path) + ".json", meta)


def load_gradiend(path) -> Gradiend:
    meta = read_json(str(path) + ".json")
    t = load_container(Path(path).read_bytes())
    index = FlatIndexMap.from_json(meta["index"]) if meta.get("index") is not None else None
    return Gradiend(t["w_enc"], float(t["b_enc"][0]), t["w_dec"], t["b_dec"], index,
                    tuple(meta["class_pair"]), bool(meta["sign_standardized"]))


# ---------------------------------------------------------------- CSV

SWEEP_COLUMNS = ("h", "alpha", "p_a", "p_b", "p_union", "lms", "bpi", "fpi", "mpi", "status")
METRIC_COLUMNS = ("name", "value", "boot_mean", "ci_low", "ci_high", "n")
ENCODED_COLUMNS = ("text_id", "tag", "label", "h")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_bytes(rows: Iterable[Mapping], columns: Sequence[str]) -> bytes:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue().encode("utf-8")


def write_csv(path, rows: Iterable[Mapping], columns: Sequence[str]) -> None:
    _atomic_write(path, csv_bytes(rows, columns))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
