"""DCLK checkpoint files.

Layout (all integers little-endian)::

    b"DCLK" | u32 version | u32 entry_count
    entry_count x [u16 name_len | name (utf-8) | u8 dtype | u8 rank |
                   rank x u64 dim | u64 offset | u64 nbytes]
    raw tensor blobs, each starting at its absolute ``offset`` (8-byte aligned)

Model and optimizer tensors are float32.  Counters use int64 and opaque byte
strings (RNG state, embedded config text) use uint8.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from densecl.dictionary import KeyQueue
from densecl.errors import CheckpointError, ShapeError

MAGIC = b"DCLK"
VERSION = 1

_DTYPES = {0: ("f32", np.dtype("<f4")), 1: ("i64", np.dtype("<i8")), 2: ("u8", np.dtype("u1"))}
_TAG_OF = {np.dtype("<f4"): 0, np.dtype("<i8"): 1, np.dtype("u1"): 2}


@dataclass
class ManifestEntry:
    name: str
    dtype: str
    shape: tuple
    offset: int
    nbytes: int


def _as_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu()
        if t.dtype in (torch.float32, torch.float64, torch.float16):
            return t.to(torch.float32).numpy().astype("<f4")
        if t.dtype == torch.uint8:
            return t.numpy().astype("u1")
        return t.to(torch.int64).numpy().astype("<i8")
    return np.asarray(t)


def write_tensors(path, tensors: dict) -> None:
    """Write ``name -> array`` pairs in the given order."""
    arrays = [(name, _as_array(t)) for name, t in tensors.items()]
    header = bytearray(MAGIC + struct.pack("<II", VERSION, len(arrays)))
    header_len = len(header)
    for name, a in arrays:
        header_len += 2 + len(name.encode()) + 2 + 8 * a.ndim + 16
    offset = (header_len + 7) & ~7
    blobs = []
    for name, a in arrays:
        if a.dtype not in _TAG_OF:
            raise CheckpointError(f"unsupported dtype {a.dtype}", field=name)
        raw = np.ascontiguousarray(a).tobytes()
        enc = name.encode()
        header += struct.pack("<H", len(enc)) + enc
        header += struct.pack("<BB", _TAG_OF[a.dtype], a.ndim)
        header += struct.pack(f"<{a.ndim}Q", *a.shape)
        header += struct.pack("<QQ", offset, len(raw))
        blobs.append((offset, raw))
        offset = (offset + len(raw) + 7) & ~7
    buf = bytearray(header)
    for off, raw in blobs:
        buf += b"\0" * (off - len(buf))
        buf += raw
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(buf)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read_manifest(data: bytes) -> list:
    if len(data) < 12:
        raise CheckpointError("file shorter than the fixed header", field="header")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", field="magic")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", field="version")
    pos, entries = 12, []
    for idx in range(count):
        where = f"manifest[{idx}]"
        try:
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode()
            if len(name.encode()) != n:
                raise struct.error("short name")
            pos += 2 + n
            tag, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            offset, nbytes = struct.unpack_from("<QQ", data, pos)
            pos += 16
        except (struct.error, UnicodeDecodeError):
            raise CheckpointError("truncated manifest", field=where) from None
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag}", field=name)
        dtype_name, dt = _DTYPES[tag]
        if int(np.prod(dims, dtype=np.int64)) * dt.itemsize != nbytes:
            raise CheckpointError("byte count disagrees with shape", field=name)
        if offset + nbytes > len(data):
            raise CheckpointError(f"blob truncated (needs {offset + nbytes} bytes, "
                                  f"file has {len(data)})", field=name)
        entries.append(ManifestEntry(name, dtype_name, tuple(dims), offset, nbytes))
    return entries


def read_tensors(path) -> dict:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    out = {}
    for e in read_manifest(data):
        dt = dict(_DTYPES.values())[e.dtype]
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(e.shape, dtype=np.int64)),
                            offset=e.offset).reshape(e.shape)
        out[e.name] = arr.copy()
    return out


def inspect_checkpoint(path) -> list:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return read_manifest(data)


def _queue_entries(prefix: str, q: KeyQueue) -> dict:
    return {
        f"{prefix}/buffer": q.buffer,
        f"{prefix}/head": np.array(q.head, dtype="<i8"),
        f"{prefix}/size": np.array(q.size, dtype="<i8"),
    }


def save_checkpoint(state, path) -> None:
    from densecl.config import config_from_train

    tensors = {
        "meta/config": np.frombuffer(config_from_train(state.cfg).text().encode(), dtype="u1"),
        "meta/iteration": np.array(state.iteration, dtype="<i8"),
        "meta/total_iterations": np.array(state.total_iterations, dtype="<i8"),
        "meta/generator": state.generator.get_state(),
    }
    for prefix, net in (("query", state.query), ("key", state.key)):
        for name, t in net.state_dict().items():
            tensors[f"{prefix}/{name}"] = t
    names = [n for n, _ in state.query.named_parameters()]
    for name, buf in zip(names, state.momentum_buffers):
        tensors[f"optim/{name}"] = buf
    tensors.update(_queue_entries("queue/global", state.global_queue))
    tensors.update(_queue_entries("queue/dense", state.dense_queue))
    write_tensors(path, tensors)


def _load_net(net, tensors: dict, prefix: str) -> None:
    sd = net.state_dict()
    for name, ref in sd.items():
        key = f"{prefix}/{name}"
        if key not in tensors:
            raise CheckpointError("missing tensor", field=key)
        arr = tensors[key]
        if tuple(arr.shape) != tuple(ref.shape):
            part = name.split(".")[0]
            raise ShapeError(f"{part}: tensor {key} has shape {tuple(arr.shape)}, "
                             f"model expects {tuple(ref.shape)}")
        with torch.no_grad():
            ref.copy_(torch.from_numpy(arr).to(ref.dtype))


def _load_queue(q: KeyQueue, tensors: dict, prefix: str) -> None:
    buf = tensors.get(f"{prefix}/buffer")
    if buf is None:
        raise CheckpointError("missing tensor", field=f"{prefix}/buffer")
    if buf.shape != tuple(q.buffer.shape):
        raise ShapeError(f"{prefix}: stored queue {buf.shape} vs configured "
                         f"{tuple(q.buffer.shape)}")
    q.buffer.copy_(torch.from_numpy(buf))
    q.head = int(tensors[f"{prefix}/head"])
    q.size = int(tensors[f"{prefix}/size"])


def stored_config(tensors: dict):
    from densecl.config import from_text

    raw = tensors.get("meta/config")
    if raw is None:
        raise CheckpointError("missing embedded config", field="meta/config")
    return from_text(bytes(raw).decode())


def load_checkpoint(path, cfg=None, weights_only: bool = False):
    """Rebuild a :class:`~densecl.trainer.TrainState`.

    ``cfg`` (a ``TrainConfig``) overrides the embedded config; its model shape must
    agree with the file.  ``weights_only`` loads the query encoder weights into a
    fresh state (both encoders), with empty queues, zero SGD buffers and
    iteration 0.
    """
    from densecl.trainer import build_state

    tensors = read_tensors(path)
    saved = stored_config(tensors).train
    cfg = cfg or saved
    if cfg.grid_size != saved.grid_size:
        raise ShapeError(f"dense_head: checkpoint was trained with grid size "
                         f"{saved.grid_size}, requested {cfg.grid_size}")
    if cfg.model.channels != saved.model.channels or cfg.model.head != saved.model.head:
        raise ShapeError(f"model: checkpoint model {saved.model} differs from requested "
                         f"{cfg.model}")
    state = build_state(cfg)
    if weights_only:
        _load_net(state.query, tensors, "query")
        _load_net(state.key, tensors, "query")
        return state
    _load_net(state.query, tensors, "query")
    _load_net(state.key, tensors, "key")
    names = [n for n, _ in state.query.named_parameters()]
    for name, buf in zip(names, state.momentum_buffers):
        arr = tensors.get(f"optim/{name}")
        if arr is None:
            raise CheckpointError("missing tensor", field=f"optim/{name}")
        buf.copy_(torch.from_numpy(arr))
    _load_queue(state.global_queue, tensors, "queue/global")
    _load_queue(state.dense_queue, tensors, "queue/dense")
    state.iteration = int(tensors["meta/iteration"])
    state.total_iterations = int(tensors["meta/total_iterations"])
    state.generator.set_state(torch.from_numpy(tensors["meta/generator"].copy()))
    return state
