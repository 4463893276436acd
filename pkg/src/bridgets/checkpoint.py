"""Checkpoint files: a text header followed by a raw parameter block.

Layout::

    BRIDGETS-CKPT 1\\n
    <one line of JSON metadata>\\n
    <float64 little-endian values, concatenated in the order of metadata["blocks"]>

``metadata["blocks"]`` is a list of ``{"name": ..., "size": ...}`` entries.
The metadata also carries ``config_hash``, the SHA-256 of the canonical JSON
form of the configuration the parameters were trained with.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"BRIDGETS-CKPT 1\n"
_LE_F64 = np.dtype("<f8")


def config_hash(config):
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def atomic_write_bytes(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_checkpoint(path, blocks, metadata):
    """Write named parameter arrays (``dict name -> 1-D array``) and metadata."""
    meta = dict(metadata)
    meta["blocks"] = [{"name": k, "size": int(np.asarray(v).size)} for k, v in blocks.items()]
    header = json.dumps(meta, sort_keys=True, separators=(",", ":"), default=str)
    if "\n" in header:
        raise ValueError("metadata must serialise to one line")
    body = b"".join(np.ascontiguousarray(v, dtype=_LE_F64).ravel().tobytes() for v in blocks.values())
    atomic_write_bytes(path, MAGIC + header.encode("utf-8") + b"\n" + body)


def load_checkpoint(path, expect_hash=None):
    """Return ``(blocks, metadata)``; raise if the file or config hash is off."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not a bridgets checkpoint")
    nl = raw.index(b"\n", len(MAGIC))
    meta = json.loads(raw[len(MAGIC):nl].decode("utf-8"))
    body = raw[nl + 1:]
    total = sum(b["size"] for b in meta["blocks"])
    if len(body) != 8 * total:
        raise DataError(f"{path}: parameter block has {len(body) // 8} values, header says {total}")
    flat = np.frombuffer(body, dtype=_LE_F64).astype(np.float64)
    blocks, off = {}, 0
    for b in meta["blocks"]:
        blocks[b["name"]] = flat[off:off + b["size"]].copy()
        off += b["size"]
    if expect_hash is not None and meta.get("config_hash") != expect_hash:
        raise ConfigError(
            f"{path}: config hash {meta.get('config_hash')} does not match current config {expect_hash}"
        )
    return blocks, meta
