"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"LINN"  u32 version
    u32 header_len, header (UTF-8 JSON: hparams, sigma_n, sigma_t, head)
    u32 tensor_count
    per tensor: u16 name_len, name, u8 dtype (0=f32, 1=f64), u8 ndim,
                u32 dims[ndim], row-major payload
    u64 checksum (first 8 bytes of BLAKE2b over everything before it)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .denoiser import LISTAHead, STHead
from .linn import LinnScale, PUNet
from .model import HParams, LinnModel

MAGIC = b"LINN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class HeadMismatchError(CheckpointError):
    pass


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def dumps(model: LinnModel) -> bytes:
    header = {
        "hparams": model.hparams.to_dict(),
        "sigma_n": model.sigma_n,
        "sigma_t": model.sigma_t,
        "head": model.hparams.head,
        "meta": model.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(hbytes)), hbytes]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode()
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def save_checkpoint(model: LinnModel, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, expect_head: str | None = None) -> LinnModel:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a LINN checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode())
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    body_end = r.pos
    stored = r.take(8)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected trailing bytes after checksum")
    if stored != _checksum(data[:body_end]):
        raise ChecksumMismatchError("checkpoint checksum mismatch")

    hp = HParams(**header["hparams"])
    if expect_head is not None and hp.head != expect_head:
        raise HeadMismatchError(f"checkpoint has a {hp.head!r} head, expected {expect_head!r}")
    return _build(hp, header, tensors)


def load_checkpoint(path: str | Path, expect_head: str | None = None) -> LinnModel:
    return loads(Path(path).read_bytes(), expect_head)


def _pop(tensors, name):
    try:
        return tensors.pop(name)
    except KeyError:
        raise CheckpointError(f"checkpoint is missing tensor {name}") from None


def _punet(tensors, prefix, depth):
    weights = [_pop(tensors, f"{prefix}conv{k}.weight") for k in range(depth + 1)]
    thetas = [_pop(tensors, f"{prefix}thr{k}") for k in range(depth)]
    return PUNet(weights, thetas)


def _build(hp: HParams, header: dict, tensors: dict) -> LinnModel:
    sigma_n = float(header["sigma_n"])
    sigma_t = header.get("sigma_t")
    scales, heads = [], []
    for s in range(hp.scales):
        pairs = [
            (_punet(tensors, f"s{s}.pair{i}.P.", hp.depth), _punet(tensors, f"s{s}.pair{i}.U.", hp.depth))
            for i in range(hp.pairs)
        ]
        scales.append(LinnScale(pairs))
        h = f"s{s}.head."
        if hp.head == "st":
            head = STHead(_pop(tensors, h + "theta"))
            if sigma_t is not None:
                head.gain = sigma_t**2 / sigma_n**2
        else:
            t = range(hp.lista_layers)
            head = LISTAHead(
                we=[_pop(tensors, f"{h}layer{k}.We") for k in t],
                wg=[_pop(tensors, f"{h}layer{k}.Wg") for k in t],
                thetas=[_pop(tensors, f"{h}layer{k}.thr") for k in t],
                ws=_pop(tensors, h + "Ws"),
            )
        heads.append(head)
    if tensors:
        raise CheckpointError(f"checkpoint has unexpected tensors: {sorted(tensors)[:5]}")
    model = LinnModel(hp, scales, heads, sigma_n, sigma_t, dict(header.get("meta", {})))
    _check_shapes(model)
    return model


def _check_shapes(model: LinnModel) -> None:
    hp = model.hparams
    f = hp.kernel_size
    for scale in model.scales:
        for p, u in scale.pairs:
            for net in (p, u):
                if net.depth != hp.depth or net.weights[0].shape[2:] != (f, f):
                    raise CheckpointError("tensor shapes disagree with hyperparameters")
                if any(w.shape[0] != hp.width for w in net.weights[:-1]):
                    raise CheckpointError("P/U net width disagrees with hyperparameters")
