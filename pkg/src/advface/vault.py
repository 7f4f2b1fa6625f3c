"""Binary persistence for protected feature tensors (the server-side database).

A vault is a directory holding one ``<record_id>.advf`` file per record.
Record layout (all integers little-endian):

    magic      4 bytes   b"ADVF"
    version    u8        currently 1
    dtype      u8        1 = float32
    ndim       u8
    dims       ndim*u32
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON (record_id, identity, protection,
               provenance)
    payload    prod(dims)*4 bytes, float32 little-endian
    crc32      u32 of the payload bytes

Reads are safe concurrently; writes require exclusive access per vault.
"""

from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ADVF"
VERSION = 1
DTYPE_FLOAT32 = 1
RECORD_SUFFIX = ".advf"


class VaultError(Exception):
    """Malformed vault data or a failed integrity check."""


class VaultCorruption(VaultError):
    """Payload bytes do not match the stored checksum."""


class VaultNotFound(VaultError, KeyError):
    """No record with the requested id."""


@dataclass
class VaultRecord:
    """One stored feature plus its identity label and provenance."""

    record_id: str
    identity: str
    feature: np.ndarray
    protection: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)


_ID_RE = re.compile(r"[^A-Za-z0-9._-]+")


def _record_path(vault: Path, record_id: str) -> Path:
    safe = _ID_RE.sub("_", record_id)
    return vault / f"{safe}{RECORD_SUFFIX}"


def encode_record(record: VaultRecord) -> bytes:
    feature = np.ascontiguousarray(record.feature, dtype="<f4")
    if not np.isfinite(feature).all():
        raise VaultError(f"record {record.record_id!r}: feature has non-finite values")
    meta = json.dumps(
        {
            "record_id": record.record_id,
            "identity": record.identity,
            "protection": record.protection,
            "provenance": record.provenance,
        },
        sort_keys=True,
    ).encode()
    payload = feature.tobytes()
    head = bytearray()
    head += MAGIC
    head += struct.pack("<BBB", VERSION, DTYPE_FLOAT32, feature.ndim)
    head += struct.pack(f"<{feature.ndim}I", *feature.shape)
    head += struct.pack("<I", len(meta))
    return bytes(head) + meta + payload + struct.pack("<I", zlib.crc32(payload))


def decode_record(blob: bytes) -> VaultRecord:
    if blob[:4] != MAGIC:
        raise VaultError("bad magic: not a vault record")
    version, dtype, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise VaultError(f"unsupported vault record version {version}")
    if dtype != DTYPE_FLOAT32:
        raise VaultError(f"unsupported dtype code {dtype}")
    offset = 7
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    meta = json.loads(blob[offset:offset + meta_len].decode())
    offset += meta_len
    count = int(np.prod(dims)) if ndim else 1
    payload = blob[offset:offset + 4 * count]
    if len(payload) != 4 * count:
        raise VaultError("truncated payload")
    offset += 4 * count
    (stored_crc,) = struct.unpack_from("<I", blob, offset)
    if zlib.crc32(payload) != stored_crc:
        raise VaultCorruption(f"record {meta.get('record_id')!r}: checksum mismatch")
    feature = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return VaultRecord(
        record_id=meta["record_id"],
        identity=meta["identity"],
        feature=feature,
        protection=meta.get("protection", {}),
        provenance=meta.get("provenance", {}),
    )


def vault_store(record: VaultRecord, vault: str | Path) -> str:
    vault = Path(vault)
    vault.mkdir(parents=True, exist_ok=True)
    _record_path(vault, record.record_id).write_bytes(encode_record(record))
    return record.record_id


def vault_load(vault: str | Path, record_id: str) -> VaultRecord:
    path = _record_path(Path(vault), record_id)
    if not path.is_file():
        raise VaultNotFound(f"no record {record_id!r} in vault {vault}")
    return decode_record(path.read_bytes())


def vault_ids(vault: str | Path) -> list[str]:
    vault = Path(vault)
    if not vault.is_dir():
        return []
    ids = []
    for path in sorted(vault.glob(f"*{RECORD_SUFFIX}")):
        # the authoritative id lives in the metadata, not the (sanitized) filename
        ids.append(decode_record(path.read_bytes()).record_id)
    return ids


def vault_load_all(vault: str | Path) -> list[VaultRecord]:
    vault = Path(vault)
    return [decode_record(p.read_bytes()) for p in sorted(vault.glob(f"*{RECORD_SUFFIX}"))]
