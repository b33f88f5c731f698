"""Bit-exact serialization of quantized tensors and length-prefixed framing.

Packed tensor layout (all little-endian):

    header, 16 bytes:
        u32 tensor_id | u32 step | u8 role_axis | u8 ndim | 3 x u16 dims
        role_axis packs the role tag in the low nibble and the quant axis
        in the high nibble; unused dims are zero (ndim <= 3, dims < 65536)
    per-channel records (quant roles only), 9 bytes each, C = dims[axis]:
        u8 wire_bits | f32 zmin | f32 delta
    payload:
        channel-major bit-packed indices, little-endian bit order within
        each byte, every channel's stream padded to a byte boundary;
        raw_f32 role carries plain f32 values instead
    u32 crc32 over header + records + payload

Frames: u32 length prefix (body size), u8 type tag, body bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

HEADER_SIZE = 16
RECORD_SIZE = 9
CRC_SIZE = 4

ROLES = ("fwd_act", "bwd_grad", "lora_weights", "raw_f32")

FRAME_TYPES = {
    "HELLO": 1,
    "HELLO_ACK": 2,
    "FWD_ACT": 3,
    "BWD_GRAD": 4,
    "LORA_SYNC": 5,
    "METRICS": 6,
    "BYE": 7,
    "ERROR": 8,
}
FRAME_NAMES = {v: k for k, v in FRAME_TYPES.items()}


class WireError(ValueError):
    pass


class IntegrityError(WireError):
    """Checksum failure."""


class FramingError(WireError):
    """Truncated or malformed stream."""


class ProtocolError(RuntimeError):
    pass


@dataclass
class PackMeta:
    tensor_id: int
    step: int
    role: str
    shape: tuple
    axis: int = -1  # quant axis; ignored for raw_f32

    def __post_init__(self):
        if self.role not in ROLES:
            raise WireError(f"unknown role {self.role!r}")
        if len(self.shape) > 3:
            raise WireError(f"wire supports up to 3 dims, got shape {self.shape}")
        if any(d >= 1 << 16 or d < 1 for d in self.shape):
            raise WireError(f"dims must fit u16, got {self.shape}")
        self.axis = self.axis % max(len(self.shape), 1)


@dataclass
class Unpacked:
    meta: PackMeta
    x_hat: np.ndarray
    indices: Optional[np.ndarray]
    wire_bits: Optional[np.ndarray]
    zmin: Optional[np.ndarray]
    delta: Optional[np.ndarray]


def wire_bits_of(bits) -> np.ndarray:
    """Integer on-wire widths: ceil of the effective bits, jitter-guarded."""
    b = np.asarray(bits, dtype=np.float64)
    if (b < 1 - 1e-6).any() or (b > 16 + 1e-6).any():
        raise WireError(f"bits outside [1, 16]: {b.min()}..{b.max()}")
    wb = np.ceil(b - 1e-6).astype(np.int64)
    return np.clip(wb, 1, 16)


def predicted_size(shape, axis: int, bits=None, role: str = "fwd_act") -> int:
    """Exact byte size of a packed tensor; the accounting the metrics report."""
    numel = int(np.prod(shape))
    if role == "raw_f32":
        return HEADER_SIZE + 4 * numel + CRC_SIZE
    axis = axis % len(shape)
    c = shape[axis]
    t = numel // c
    wb = wire_bits_of(bits)
    if wb.ndim == 0:
        wb = np.full(c, int(wb))
    if wb.shape != (c,):
        raise WireError(f"need one wire width per channel; got {wb.shape} for C={c}")
    payload = int(sum((t * int(w) + 7) // 8 for w in wb))
    return HEADER_SIZE + RECORD_SIZE * c + payload + CRC_SIZE


def _pack_header(meta: PackMeta) -> bytes:
    dims = list(meta.shape) + [0] * (3 - len(meta.shape))
    role_axis = ROLES.index(meta.role) | (meta.axis << 4)
    return struct.pack("<IIBB3H", meta.tensor_id, meta.step, role_axis, len(meta.shape), *dims)


def _unpack_header(raw: bytes) -> PackMeta:
    if len(raw) < HEADER_SIZE:
        raise FramingError(f"header truncated: {len(raw)} bytes")
    tensor_id, step, role_axis, ndim, d0, d1, d2 = struct.unpack_from("<IIBB3H", raw, 0)
    role_idx = role_axis & 0x0F
    axis = role_axis >> 4
    if role_idx >= len(ROLES):
        raise FramingError(f"unknown role tag {role_idx}")
    shape = (d0, d1, d2)[:ndim]
    if ndim > 3 or any(d == 0 for d in shape):
        raise FramingError(f"bad dims {shape}")
    return PackMeta(tensor_id=tensor_id, step=step, role=ROLES[role_idx], shape=shape, axis=axis)


def _pack_channel(idx: np.ndarray, wb: int) -> bytes:
    bits = ((idx[:, None].astype(np.uint16) >> np.arange(wb, dtype=np.uint16)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def _unpack_channel(buf: bytes, wb: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    need = count * wb
    if bits.size < need:
        raise FramingError("channel payload truncated")
    weights = (np.uint32(1) << np.arange(wb, dtype=np.uint32)).astype(np.uint32)
    vals = (bits[:need].reshape(count, wb).astype(np.uint32) * weights).sum(axis=1)
    return vals.astype(np.uint16)


def pack(indices: np.ndarray, bits, zmin: np.ndarray, delta: np.ndarray, meta: PackMeta) -> bytes:
    """Serialize already-quantized indices; never re-rounds."""
    if meta.role == "raw_f32":
        raise WireError("pack() is for quantized roles; use pack_raw()")
    if tuple(indices.shape) != tuple(meta.shape):
        raise WireError(f"indices shape {indices.shape} != meta shape {meta.shape}")
    wb = wire_bits_of(bits)
    c = meta.shape[meta.axis]
    if wb.ndim == 0:
        wb = np.full(c, int(wb))
    zmin = np.asarray(zmin, dtype="<f4")
    delta = np.asarray(delta, dtype="<f4")
    if not (wb.shape == zmin.shape == delta.shape == (c,)):
        raise WireError("per-channel metadata must have one entry per channel")

    flat = np.moveaxis(np.asarray(indices, dtype=np.uint16), meta.axis, -1).reshape(-1, c)
    limit = np.uint32(1) << wb.astype(np.uint32)
    if (flat.astype(np.uint32) >= limit[None, :]).any():
        raise WireError("index does not fit its wire width")

    parts = [_pack_header(meta)]
    for i in range(c):
        parts.append(struct.pack("<B", int(wb[i])) + zmin[i].tobytes() + delta[i].tobytes())
    for i in range(c):
        parts.append(_pack_channel(flat[:, i], int(wb[i])))
    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    out = body + struct.pack("<I", crc)
    assert len(out) == predicted_size(meta.shape, meta.axis, wb)
    return out


def pack_raw(x: np.ndarray, meta: PackMeta) -> bytes:
    if meta.role != "raw_f32":
        raise WireError("pack_raw() needs role raw_f32")
    if tuple(x.shape) != tuple(meta.shape):
        raise WireError(f"array shape {x.shape} != meta shape {meta.shape}")
    body = _pack_header(meta) + np.ascontiguousarray(x, dtype="<f4").tobytes()
    out = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    assert len(out) == predicted_size(meta.shape, 0, role="raw_f32")
    return out


def unpack(raw: bytes) -> Unpacked:
    """Verify the checksum, then reconstruct x_hat = zmin + n * delta per channel."""
    if len(raw) < HEADER_SIZE + CRC_SIZE:
        raise FramingError(f"stream too short: {len(raw)} bytes")
    (crc_stored,) = struct.unpack_from("<I", raw, len(raw) - CRC_SIZE)
    if zlib.crc32(raw[:-CRC_SIZE]) & 0xFFFFFFFF != crc_stored:
        raise IntegrityError("crc32 mismatch")
    meta = _unpack_header(raw)
    numel = int(np.prod(meta.shape))

    if meta.role == "raw_f32":
        expect = HEADER_SIZE + 4 * numel + CRC_SIZE
        if len(raw) != expect:
            raise FramingError(f"raw payload is {len(raw)} bytes, expected {expect}")
        x = np.frombuffer(raw, dtype="<f4", count=numel, offset=HEADER_SIZE).reshape(meta.shape)
        return Unpacked(meta=meta, x_hat=x.copy(), indices=None, wire_bits=None, zmin=None, delta=None)

    c = meta.shape[meta.axis]
    t = numel // c
    off = HEADER_SIZE
    wb = np.zeros(c, dtype=np.int64)
    zmin = np.zeros(c, dtype=np.float32)
    delta = np.zeros(c, dtype=np.float32)
    if len(raw) < off + RECORD_SIZE * c + CRC_SIZE:
        raise FramingError("records truncated")
    for i in range(c):
        wb[i] = raw[off]
        zmin[i], delta[i] = struct.unpack_from("<ff", raw, off + 1)
        off += RECORD_SIZE
    if (wb < 1).any() or (wb > 16).any():
        raise FramingError("record wire bits outside [1, 16]")

    flat = np.zeros((t, c), dtype=np.uint16)
    for i in range(c):
        nbytes = (t * int(wb[i]) + 7) // 8
        if off + nbytes > len(raw) - CRC_SIZE:
            raise FramingError("payload truncated")
        flat[:, i] = _unpack_channel(raw[off : off + nbytes], int(wb[i]), t)
        off += nbytes
    if off != len(raw) - CRC_SIZE:
        raise FramingError("trailing bytes after payload")

    x_hat = zmin[None, :] + flat.astype(np.float32) * delta[None, :]
    lead = tuple(d for k, d in enumerate(meta.shape) if k != meta.axis)
    x_hat = np.moveaxis(x_hat.reshape(lead + (c,)), -1, meta.axis)
    indices = np.moveaxis(flat.reshape(lead + (c,)), -1, meta.axis)
    return Unpacked(
        meta=meta,
        x_hat=np.ascontiguousarray(x_hat, dtype=np.float32),
        indices=np.ascontiguousarray(indices),
        wire_bits=wb,
        zmin=zmin,
        delta=delta,
    )


# ---------------------------------------------------------------------------
# framing


class FramedSocket:
    """Length-prefixed frames over a stream socket, with byte counters."""

    def __init__(self, sock):
        self.sock = sock
        self.bytes_tx = 0
        self.bytes_rx = 0

    def send_frame(self, ftype: str, body: bytes) -> int:
        tag = FRAME_TYPES.get(ftype)
        if tag is None:
            raise ProtocolError(f"unknown frame type {ftype!r}")
        frame = struct.pack("<IB", len(body), tag) + body
        self.sock.sendall(frame)
        self.bytes_tx += len(frame)
        return len(frame)

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            chunk = self.sock.recv(n - got)
            if not chunk:
                raise FramingError("connection closed mid-frame")
            chunks.append(chunk)
            got += len(chunk)
        self.bytes_rx += n
        return b"".join(chunks)

    def recv_frame(self) -> tuple[str, bytes]:
        head = self._recv_exact(5)
        length, tag = struct.unpack("<IB", head)
        name = FRAME_NAMES.get(tag)
        if name is None:
            raise ProtocolError(f"unknown frame tag {tag}")
        body = self._recv_exact(length) if length else b""
        return name, body

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass
