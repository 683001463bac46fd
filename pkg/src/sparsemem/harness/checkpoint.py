"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic b"SPMCKPT\\0" | u16 version | 32-byte sha256 of the canonical config JSON
    then one record per section, in the fixed order CONF PARM BKGD RNGS:
        4-byte tag | u64 payload length | payload | 32-byte sha256 of payload
    then the 4-byte end marker b"END\\0"

Sections are fully verified before any object is built, so a damaged file never
yields a partially loaded model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointError
from ..model import ModelConfig, TransformerModel, init_model
from ..ranking import BackgroundIndexStore

MAGIC = b"SPMCKPT\0"
VERSION = 1
END = b"END\0"
_SECTIONS = (b"CONF", b"PARM", b"BKGD", b"RNGS")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> ndarray
    store: BackgroundIndexStore | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)  # JSON-compatible run metadata
    version: int = VERSION

    @classmethod
    def from_model(cls, model: TransformerModel, store=None, rng_state=None, extra=None) -> "Checkpoint":
        return cls(model.config, model.state(), store, rng_state, dict(extra or {}))

    def build_model(self) -> TransformerModel:
        model = init_model(self.config, _skip_init=True)
        model.load_state(self.params)
        return model


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_digest(config: ModelConfig) -> bytes:
    return hashlib.sha256(canonical_json(config.to_dict())).digest()


def _encode_params(params: dict) -> bytes:
    out = [struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        dt = arr.dtype.newbyteorder("<").str.encode()
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(dt)) + dt)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}q", *arr.shape))
        out.append(arr.astype(dt.decode(), copy=False).tobytes())
    return b"".join(out)


def _decode_params(blob: bytes) -> dict:
    (n,), off = struct.unpack_from("<I", blob), 4
    params = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", blob, off)
        name = blob[off + 2 : off + 2 + ln].decode()
        off += 2 + ln
        (ld,) = struct.unpack_from("<B", blob, off)
        dt = np.dtype(blob[off + 1 : off + 1 + ld].decode())
        off += 1 + ld
        (ndim,) = struct.unpack_from("<B", blob, off)
        shape = struct.unpack_from(f"<{ndim}q", blob, off + 1)
        off += 1 + 8 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        params[name] = np.frombuffer(blob, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).astype(dt.newbyteorder("="))
        off += size
    if off != len(blob):
        raise CheckpointError("parameter section has trailing bytes")
    return params


def to_bytes(ckpt: Checkpoint) -> bytes:
    conf = canonical_json({"model": ckpt.config.to_dict(), "extra": ckpt.extra})
    payloads = {
        b"CONF": conf,
        b"PARM": _encode_params(ckpt.params),
        b"BKGD": ckpt.store.to_bytes() if ckpt.store is not None else b"",
        b"RNGS": canonical_json(ckpt.rng_state) if ckpt.rng_state is not None else b"",
    }
    out = [MAGIC, struct.pack("<H", ckpt.version), config_digest(ckpt.config)]
    for tag in _SECTIONS:
        data = payloads[tag]
        out += [tag, struct.pack("<Q", len(data)), data, hashlib.sha256(data).digest()]
    out.append(END)
    return b"".join(out)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 34 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<H", blob, off)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    digest = blob[off + 2 : off + 34]
    off += 34
    sections = {}
    for tag in _SECTIONS:
        if off + 12 > len(blob) or blob[off : off + 4] != tag:
            raise CheckpointError(f"section {tag.decode()} missing or truncated")
        (n,) = struct.unpack_from("<Q", blob, off + 4)
        data = blob[off + 12 : off + 12 + n]
        check = blob[off + 12 + n : off + 44 + n]
        if len(data) != n or len(check) != 32:
            raise CheckpointError(f"section {tag.decode()} truncated")
        if hashlib.sha256(data).digest() != check:
            raise CheckpointError(f"checksum failure in section {tag.decode()}")
        sections[tag] = data
        off += 44 + n
    if blob[off:] != END:
        raise CheckpointError("missing end marker or trailing bytes")

    conf = json.loads(sections[b"CONF"])
    config = ModelConfig.from_dict(conf["model"])
    if config_digest(config) != digest:
        raise CheckpointError("config digest in header does not match the stored config")
    bkgd = sections[b"BKGD"]
    rngs = sections[b"RNGS"]
    return Checkpoint(
        config=config,
        params=_decode_params(sections[b"PARM"]),
        store=BackgroundIndexStore.from_bytes(bkgd) if bkgd else None,
        rng_state=json.loads(rngs) if rngs else None,
        extra=conf["extra"],
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's bit-generator state."""

    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return [int(x) for x in v.tolist()]
        return int(v) if isinstance(v, (np.integer,)) else v

    return plain(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    st = dict(state)
    inner = st["state"]
    st["state"] = {k: np.array(v, dtype=np.uint64) if isinstance(v, list) else v for k, v in inner.items()}
    if isinstance(st.get("buffer"), list):
        st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    bg.state = st
    return np.random.Generator(bg)
