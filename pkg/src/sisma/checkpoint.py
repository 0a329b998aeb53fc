"""Single-file checkpoint archive.

Layout (all integers little-endian)::

    b"SISMA-CKPT"            magic, 10 bytes
    u16                      format version
    u32                      header length H
    H bytes                  canonical JSON header: step, fingerprint, config,
                             meta and the entry table (name, dtype, shape,
                             offset, nbytes), entries sorted by name
    data                     concatenated raw entry bytes
    32 bytes                 SHA-256 of everything above

Weights are stored in their working dtype; optimizer state is widened to
float64 (lossless) and narrowed back on load.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CheckpointError, CheckpointIntegrityError, CheckpointVersionError, ConfigError

MAGIC = b"SISMA-CKPT"
VERSION = 1
SUPPORTED_VERSIONS = (1,)
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_TORCH_CODES = {torch.float32: "f32", torch.float64: "f64", torch.int64: "i64"}
_CODE_TORCH = {v: k for k, v in _TORCH_CODES.items()}


@dataclass
class Checkpoint:
    model: dict
    ema: dict
    optimizer: dict = field(default_factory=dict)
    step: int = 0
    fingerprint: str = ""
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def _entries(ckpt):
    out = {}
    for prefix, group, widen in (("model", ckpt.model, False), ("ema", ckpt.ema, False),
                                 ("optim", ckpt.optimizer, True)):
        for name, tensor in group.items():
            t = torch.as_tensor(tensor).detach().cpu()
            orig = _TORCH_CODES.get(t.dtype)
            if orig is None:
                raise CheckpointError(f"cannot store dtype {t.dtype} for entry {prefix}/{name}")
            code = "f64" if widen and t.is_floating_point() else orig
            out[f"{prefix}/{name}"] = (t, code, orig)
    return dict(sorted(out.items()))


def encode(ckpt):
    table = []
    blobs = []
    offset = 0
    for name, (t, code, orig) in _entries(ckpt).items():
        data = np.ascontiguousarray(t.numpy().astype(_DTYPES[code], copy=False)).tobytes()
        entry = {"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(data)}
        if orig != code:
            entry["orig_dtype"] = orig
        table.append(entry)
        blobs.append(data)
        offset += len(data)
    header = {
        "step": int(ckpt.step),
        "fingerprint": ckpt.fingerprint,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "entries": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<HI", ckpt.version, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(raw, source="<bytes>"):
    if len(raw) < len(MAGIC) + 6 or not raw.startswith(MAGIC):
        raise CheckpointIntegrityError(f"{source}: not a SISMA checkpoint (bad magic or truncated header)")
    version, hlen = struct.unpack_from("<HI", raw, len(MAGIC))
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointVersionError(version, SUPPORTED_VERSIONS)
    start = len(MAGIC) + 6
    if len(raw) < start + hlen + 32:
        raise CheckpointIntegrityError(f"{source}: truncated ({len(raw)} bytes)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{source}: checksum mismatch (truncated or corrupt)")
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as exc:
        raise CheckpointIntegrityError(f"{source}: unreadable header ({exc})") from None
    data = memoryview(body)[start + hlen:]
    groups = {"model": {}, "ema": {}, "optim": {}}
    for e in header["entries"]:
        dt = _DTYPES[e["dtype"]]
        chunk = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointIntegrityError(f"{source}: entry {e['name']} runs past the data region")
        arr = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
        t = torch.from_numpy(arr)
        if "orig_dtype" in e:
            t = t.to(_CODE_TORCH[e["orig_dtype"]])
        prefix, name = e["name"].split("/", 1)
        groups[prefix][name] = t
    return Checkpoint(groups["model"], groups["ema"], groups["optim"], header["step"], header["fingerprint"],
                      header["config"], header["meta"], version)


def save_checkpoint(path, ckpt):
    raw = encode(ckpt)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, expect_fingerprint=None):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    ckpt = decode(raw, str(path))
    if expect_fingerprint is not None and ckpt.fingerprint != expect_fingerprint:
        raise ConfigError(
            f"checkpoint {path} was written for config {ckpt.fingerprint}, current config is {expect_fingerprint}"
        )
    return ckpt


def optimizer_entries(optimizer, model):
    """Flatten an Adam-family optimizer state into name -> tensor entries."""
    index = {id(p): n for n, p in model.named_parameters()}
    params = [p for g in optimizer.param_groups for p in g["params"]]
    out = {}
    for p in params:
        state = optimizer.state.get(p, {})
        for key, value in state.items():
            out[f"{index[id(p)]}/{key}"] = torch.as_tensor(value)
    return out


def restore_optimizer(optimizer, model, entries):
    named = dict(model.named_parameters())
    for key, value in entries.items():
        pname, field_name = key.rsplit("/", 1)
        if pname not in named:
            raise CheckpointError(f"optimizer entry {key} names unknown parameter {pname}")
        optimizer.state[named[pname]][field_name] = value.clone()
