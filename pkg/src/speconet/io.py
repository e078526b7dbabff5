"""
Binary field files, model checkpoints and CSV tables.

Field file layout (little-endian)::

    b"SPFD" | version u32 | dim u32 | kind code u8 * dim | size u32 * dim
    | components u32 | complex flag u8 | time f64 | payload f64 ...

Checkpoint layout (little-endian)::

    b"SPON" | version u32 | header length u64 | UTF-8 JSON header
    | parameter blobs f64 ... | blake2b-64 digest of everything before it
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import BasisKind
from .network import ConvHead
from .trainer import BlockParams, NetConfig, SpecONetModel

FIELD_MAGIC = b"SPFD"
FIELD_VERSION = 1
CHECKPOINT_MAGIC = b"SPON"
CHECKPOINT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class DataIntegrityError(ValueError):
    """A file is truncated, has a bad magic or version, or fails its checksum."""


# ---------------------------------------------------------------------------
# Field files
# ---------------------------------------------------------------------------


@dataclass
class FieldFile:
    kinds: tuple  # BasisKind per axis
    data: np.ndarray  # (components, *sizes), float64 or complex128
    time: float = 0.0

    @property
    def dim(self) -> int:
        return len(self.kinds)


def write_field(path, field: FieldFile) -> None:
    data = np.asarray(field.data)
    if data.ndim != field.dim + 1:
        raise ValueError(f"expected data of rank {field.dim + 1}, got shape {data.shape}")
    is_complex = np.iscomplexobj(data)
    head = FIELD_MAGIC + struct.pack("<II", FIELD_VERSION, field.dim)
    head += bytes(k.code for k in field.kinds)
    head += struct.pack(f"<{field.dim}I", *data.shape[1:])
    head += struct.pack("<IBd", data.shape[0], int(is_complex), float(field.time))
    if is_complex:
        payload = np.ascontiguousarray(data, dtype=np.complex128).view(np.float64)
    else:
        payload = np.ascontiguousarray(data, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(payload.astype(_LE_F64, copy=False).tobytes())


def read_field(path) -> FieldFile:
    raw = Path(path).read_bytes()
    if raw[:4] != FIELD_MAGIC:
        raise DataIntegrityError(f"{path}: not a field file")
    try:
        version, dim = struct.unpack_from("<II", raw, 4)
        if version != FIELD_VERSION:
            raise DataIntegrityError(f"{path}: unsupported field file version {version}")
        off = 12
        kinds = tuple(BasisKind.from_code(c) for c in raw[off:off + dim])
        off += dim
        sizes = struct.unpack_from(f"<{dim}I", raw, off)
        off += 4 * dim
        comps, is_complex, t = struct.unpack_from("<IBd", raw, off)
        off += struct.calcsize("<IBd")
    except (struct.error, ValueError) as exc:
        raise DataIntegrityError(f"{path}: malformed header ({exc})") from exc
    count = comps * int(np.prod(sizes)) * (2 if is_complex else 1)
    if len(raw) - off != 8 * count:
        raise DataIntegrityError(f"{path}: payload has {len(raw) - off} bytes, expected {8 * count}")
    vals = np.frombuffer(raw, dtype=_LE_F64, count=count, offset=off).astype(np.float64)
    if is_complex:
        vals = vals.view(np.complex128)
    return FieldFile(kinds, vals.reshape((comps,) + tuple(sizes)), t)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _model_blobs(model: SpecONetModel):
    blobs, blocks = [], []
    for blk in model.blocks:
        entry = {"steps": list(blk.steps), "u_scale": blk.net_u.input_scale, "phi_scales": []}
        for a in (blk.net_u.kernel, blk.net_u.bias, blk.net_u.heads):
            blobs.append(a)
        for ph in blk.net_phi:
            entry["phi_scales"].append(ph.input_scale)
            blobs.extend((ph.kernel, ph.bias, ph.heads))
        blocks.append(entry)
    return blobs, blocks


def write_checkpoint(path, model: SpecONetModel, config: dict | None = None,
                     prng: str = "") -> None:
    blobs, blocks = _model_blobs(model)
    header = {
        "net": vars(model.net),
        "seed": model.seed,
        "meta": model.meta,
        "config": config or {},
        "prng": prng,
        "blocks": blocks,
        "shapes": [list(b.shape) for b in blobs],
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(text)) + text
    body += b"".join(np.ascontiguousarray(b, dtype=_LE_F64).tobytes() for b in blobs)
    digest = hashlib.blake2b(body, digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)


def read_checkpoint(path) -> tuple[SpecONetModel, dict]:
    """Model and parsed header. Raises DataIntegrityError on any mismatch."""
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataIntegrityError(f"{path}: not a checkpoint")
    body, digest = raw[:-8], raw[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise DataIntegrityError(f"{path}: checksum mismatch")
    version, n = struct.unpack_from("<IQ", body, 4)
    if version != CHECKPOINT_VERSION:
        raise DataIntegrityError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(body[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataIntegrityError(f"{path}: unreadable header") from exc
    shapes = [tuple(s) for s in header["shapes"]]
    need = sum(int(np.prod(s)) for s in shapes)
    off = 16 + n
    if len(body) - off != 8 * need:
        raise DataIntegrityError(f"{path}: blob lengths do not match header shapes")
    arrs = []
    for s in shapes:
        k = int(np.prod(s))
        arrs.append(np.frombuffer(body, dtype=_LE_F64, count=k, offset=off).astype(np.float64).reshape(s))
        off += 8 * k
    it = iter(arrs)
    blocks = []
    for e in header["blocks"]:
        net_u = ConvHead(next(it), next(it), next(it), e["u_scale"])
        phis = [ConvHead(next(it), next(it), next(it), s) for s in e["phi_scales"]]
        blocks.append(BlockParams(e["steps"], net_u, phis))
    model = SpecONetModel(NetConfig(**header["net"]), blocks, header["seed"], header["meta"])
    return model, header


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    """Comma-separated, header row, '.' decimals, LF line endings."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
