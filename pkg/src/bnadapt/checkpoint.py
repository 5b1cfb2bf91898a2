"""``BNCK`` checkpoints.

Little-endian layout::

    b"BNCK"  u32 version
    u32 meta_len   meta_len bytes of UTF-8 "key=value" lines
    u32 n_entries
    n_entries x { u32 name_len, name, u32 dtype code, u32 ndim,
                  ndim x u64 extents, u64 offset, u64 nbytes }
    payload blob (offsets are relative to its start)

Dtype codes match the ``BNT1`` tensor files. Each batch-norm layer stores its
current running mean/var, gamma and beta, the four source-snapshot arrays and
eps, so adaptation can be inspected or resumed without the source data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .segnet import NetworkSpec, ToyUNet
from .tensorio import CODE_DTYPES, DTYPE_CODES

MAGIC = b"BNCK"
VERSION = 1
PHASES = ("init", "pretrained", "adapted")
BN_FIELDS = ("running_mean", "running_var", "gamma", "beta", "source_mean", "source_var", "source_gamma", "source_beta", "eps")


class CheckpointError(ValueError):
    pass


def _entries(model: ToyUNet) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, conv in model.convs.items():
        out.append((f"conv.{name}.weight", conv.weight.data))
        out.append((f"conv.{name}.bias", conv.bias.data))
    for name, bn in model.bns.items():
        vals = {
            "running_mean": bn.running_mean,
            "running_var": bn.running_var,
            "gamma": bn.gamma.data,
            "beta": bn.beta.data,
            "source_mean": bn.source_mean,
            "source_var": bn.source_var,
            "source_gamma": bn.source_gamma,
            "source_beta": bn.source_beta,
            "eps": np.asarray(bn.eps, np.float64),
        }
        for f in BN_FIELDS:
            if vals[f] is not None:
                out.append((f"bn.{name}.{f}", np.asarray(vals[f])))
    return out


def _meta(model: ToyUNet) -> dict[str, str]:
    s = model.spec
    return {
        "spec_id": s.spec_id,
        "phase": model.phase,
        "seed": str(model.seed),
        "source_iters": str(model.source_iters),
        "adapt_iters": str(model.adapt_iters),
        "dtype": model.dtype.name,
        "in_channels": str(s.in_channels),
        "num_classes": str(s.num_classes),
    }


def to_bytes(model: ToyUNet) -> bytes:
    if model.phase == "pretrained" and not model.frozen:
        raise CheckpointError("a pretrained checkpoint must carry frozen source snapshots")
    meta = "".join(f"{k}={v}\n" for k, v in _meta(model).items()).encode("utf-8")
    directory, blobs, offset = [], [], 0
    for name, arr in _entries(model):
        dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        nb = name.encode("utf-8")
        directory.append(
            struct.pack("<I", len(nb)) + nb
            + struct.pack("<II", DTYPE_CODES[dt], arr.ndim)
            + struct.pack(f"<{arr.ndim}Q", *arr.shape)
            + struct.pack("<QQ", offset, len(raw))
        )
        blobs.append(raw)
        offset += len(raw)
    head = MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(meta)) + meta + struct.pack("<I", len(directory))
    return head + b"".join(directory) + b"".join(blobs)


def save(model: ToyUNet, path) -> None:
    data = to_bytes(model)
    Path(path).write_bytes(data)


def read_raw(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse checkpoint bytes into (metadata, named arrays)."""
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic: {buf[:4]!r}")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack_from("<I", buf, 8)
        pos = 12
        meta_txt = buf[pos : pos + mlen].decode("utf-8")
        pos += mlen
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        directory = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + ln].decode("utf-8")
            pos += ln
            code, ndim = struct.unpack_from("<II", buf, pos)
            pos += 8
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            off, nbytes = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            directory.append((name, code, shape, off, nbytes))
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    meta = dict(line.split("=", 1) for line in meta_txt.splitlines() if line)
    arrays = {}
    for name, code, shape, off, nbytes in directory:
        if code not in CODE_DTYPES:
            raise CheckpointError(f"entry {name!r}: unknown dtype code {code}")
        dt = CODE_DTYPES[code]
        start = pos + off
        if start + nbytes > len(buf) or nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"entry {name!r}: truncated or inconsistent payload")
        arrays[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=start).reshape(shape).copy()
    return meta, arrays


def from_bytes(buf: bytes) -> ToyUNet:
    meta, arrays = read_raw(buf)
    if meta.get("spec_id") != NetworkSpec().spec_id:
        raise CheckpointError(f"unknown network spec {meta.get('spec_id')!r}")
    if meta.get("phase") not in PHASES:
        raise CheckpointError(f"unknown phase {meta.get('phase')!r}")
    spec = NetworkSpec(in_channels=int(meta["in_channels"]), num_classes=int(meta["num_classes"]))
    model = ToyUNet(spec, seed=int(meta["seed"]), dtype=np.dtype(meta["dtype"]))
    model.phase = meta["phase"]
    model.source_iters = int(meta["source_iters"])
    model.adapt_iters = int(meta["adapt_iters"])

    def take(key):
        try:
            return arrays[key]
        except KeyError:
            raise CheckpointError(f"missing entry {key!r}") from None

    for name, conv in model.convs.items():
        for attr in ("weight", "bias"):
            arr = take(f"conv.{name}.{attr}")
            tgt = getattr(conv, attr)
            if arr.shape != tgt.shape:
                raise CheckpointError(f"conv.{name}.{attr}: shape {arr.shape}, expected {tgt.shape}")
            tgt.data = arr
    for name, bn in model.bns.items():
        bn.running_mean = take(f"bn.{name}.running_mean")
        bn.running_var = take(f"bn.{name}.running_var")
        bn.gamma.data = take(f"bn.{name}.gamma")
        bn.beta.data = take(f"bn.{name}.beta")
        bn.eps = float(take(f"bn.{name}.eps"))
        src = [arrays.get(f"bn.{name}.{f}") for f in ("source_mean", "source_var", "source_gamma", "source_beta")]
        if all(s is not None for s in src):
            bn.set_source(*src)
        elif any(s is not None for s in src):
            raise CheckpointError(f"bn.{name}: incomplete source snapshot")
    if model.phase in ("pretrained", "adapted") and not model.frozen:
        raise CheckpointError(f"{model.phase} checkpoint is missing source snapshots")
    return model


def load(path) -> ToyUNet:
    return from_bytes(Path(path).read_bytes())
