"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DIGC" | u16 version | u32 config hash
    repeated records:
        u16 name length | name (utf-8) | u8 dtype | u8 rank | u32 * rank dims | payload
    u32 CRC32 of every preceding byte

Parameters are stored as ``param/<name>``, momentum buffers as
``momentum/<name>``; the config snapshot, optimizer hyperparameters and RNG
state travel as UTF-8 JSON in ``meta/*`` uint8 records.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DIGC"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<i4"): 4,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(config: dict) -> int:
    return zlib.crc32(canonical_json(config))


@dataclass
class Checkpoint:
    config: dict
    params: dict  # name -> ndarray
    momentum: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    iteration: int = 0
    version: int = VERSION

    @property
    def config_hash(self) -> int:
        return config_hash(self.config)


def _json_record(obj) -> np.ndarray:
    return np.frombuffer(canonical_json(obj), dtype=np.uint8)


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = DTYPE_CODES.get(np.dtype(dt))
    if code is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
        raise CheckpointError(f"{name}: name or rank too large")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    records = [
        ("meta/config", _json_record(ckpt.config)),
        ("meta/optimizer", _json_record(ckpt.optimizer)),
        ("meta/rng", _json_record(ckpt.rng_state)),
        ("meta/iteration", np.asarray(ckpt.iteration, dtype="<i8")),
    ]
    records += [(f"param/{k}", v) for k, v in ckpt.params.items()]
    records += [(f"momentum/{k}", v) for k, v in ckpt.momentum.items()]
    body = MAGIC + struct.pack("<HI", ckpt.version, ckpt.config_hash)
    body += b"".join(_pack_record(n, a) for n, a in records)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, expected_config=None) -> Checkpoint:
    """Parse a checkpoint, verifying magic, version, CRC and config hash.

    ``expected_config`` may be a config dict or a precomputed hash; a
    mismatch raises :class:`ConfigMismatchError`.
    """
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise CheckpointError("not a DIGC checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch (corrupt or truncated file)")
    version, chash = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    records = {}
    try:
        while pos < len(body):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos: pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = CODE_DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise CheckpointError(f"record {name!r} runs past end of file")
            records[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize,
                                          offset=pos).reshape(dims).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint record: {exc}") from None

    def meta(name):
        if name not in records:
            raise CheckpointError(f"missing record {name}")
        return json.loads(records[name].tobytes().decode("utf-8"))

    if "meta/iteration" not in records:
        raise CheckpointError("missing record meta/iteration")
    config = meta("meta/config")
    if config_hash(config) != chash:
        raise CheckpointError("stored config does not match header hash")
    if expected_config is not None:
        want = expected_config if isinstance(expected_config, int) else config_hash(expected_config)
        if want != chash:
            raise ConfigMismatchError(
                f"checkpoint config hash {chash:08x} does not match expected {want:08x}")
    params = {k[len("param/"):]: v for k, v in records.items() if k.startswith("param/")}
    momentum = {k[len("momentum/"):]: v for k, v in records.items() if k.startswith("momentum/")}
    return Checkpoint(config, params, momentum, meta("meta/optimizer"), meta("meta/rng"),
                      int(records["meta/iteration"]), version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(ckpt))


def load_checkpoint(path, expected_config=None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read(), expected_config)
