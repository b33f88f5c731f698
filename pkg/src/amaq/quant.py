"""Activation quantizers.

Fixed-bit fake quantization at tensor/channel/group granularity, the
delta-compression baseline that quantizes changes against a cached
reconstruction, and the adaptive quantizer whose per-channel bit-widths are
driven by learnable gating logits through a sigmoid:

    b_i = b_min + (b_max - b_min) * sigmoid(alpha * q_i)

All quantizers share one affine grid: per quant unit, s = 2^b - 1 levels
(real-valued, so fractional bit-widths stay meaningful), delta = range / s,
index n = clamp(round((x - zmin)/delta), 0, floor(s)), x_hat = zmin + n*delta.
Rounding is half-away-from-zero so both ends of a socket agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN2 = float(np.log(2.0))

GRANULARITIES = ("tensor", "channel", "group")
CLIP_MODES = ("mean_gate", "per_element")


class QuantError(ValueError):
    pass


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


def sigmoid_prime(z):
    s = sigmoid(z)
    return s * (1.0 - s)


def inv_sigmoid(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise QuantError(f"logit undefined for p={p}")
    return float(np.log(p / (1.0 - p)))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def max_index(bits) -> np.ndarray:
    """Top index floor(2^b - 1), guarded so near-integer level counts don't floor down.

    The guard is relative: float32 storage of the gating logits perturbs the
    level count by a few ulp, which must not cost a whole level.
    """
    s = np.power(2.0, np.asarray(bits, dtype=np.float64)) - 1.0
    return np.floor(s + np.maximum(1e-9, s * 1e-6))


# ---------------------------------------------------------------------------
# gating parameters


@dataclass
class GatingParams:
    """Learnable per-channel (or per-token) bit-width logits for one quant site."""

    q: Tensor
    alpha: float
    b_min: float
    b_max: float
    target_bits: float
    axis: str = "channel"
    clip_enabled: bool = True
    clip_mode: str = "mean_gate"

    def __post_init__(self):
        if not (1 <= self.b_min < self.b_max <= 16):
            raise QuantError(f"bit range [{self.b_min}, {self.b_max}] outside [1, 16]")
        if not (self.b_min <= self.target_bits <= self.b_max):
            raise QuantError(f"target {self.target_bits} outside [{self.b_min}, {self.b_max}]")
        if self.alpha <= 0:
            raise QuantError(f"alpha must be positive, got {self.alpha}")
        if self.axis not in ("channel", "token"):
            raise QuantError(f"unknown axis {self.axis!r}")
        if self.clip_mode not in CLIP_MODES:
            raise QuantError(f"unknown clip_mode {self.clip_mode!r}")
        if self.q.ndim != 1:
            raise QuantError("gating vector must be 1-D")

    def __len__(self):
        return self.q.size


def init_gating(
    b_init: float,
    b_min: float,
    b_max: float,
    alpha: float,
    length: int,
    axis: str = "channel",
    target_bits: Optional[float] = None,
    clip_enabled: bool = True,
    clip_mode: str = "mean_gate",
) -> GatingParams:
    """Gating whose effective bit-width is exactly b_init at step 0."""
    if not (b_min < b_init < b_max):
        raise QuantError(f"b_init {b_init} must lie strictly inside ({b_min}, {b_max})")
    q0 = inv_sigmoid((b_init - b_min) / (b_max - b_min)) / alpha
    q = Tensor(np.full(length, q0, dtype=np.float32), requires_grad=True, name="gating_q")
    return GatingParams(
        q=q,
        alpha=alpha,
        b_min=b_min,
        b_max=b_max,
        target_bits=b_init if target_bits is None else target_bits,
        axis=axis,
        clip_enabled=clip_enabled,
        clip_mode=clip_mode,
    )


def effective_bits(gp: GatingParams) -> np.ndarray:
    """b_i = b_min + (b_max - b_min) * sigmoid(alpha * q_i), strictly inside the range."""
    return (gp.b_min + (gp.b_max - gp.b_min) * sigmoid(gp.alpha * gp.q.data.astype(np.float64))).astype(
        np.float64
    )


def mean_bits(gp: GatingParams) -> float:
    return float(effective_bits(gp).mean())


def bits_loss(gp: GatingParams) -> Tensor:
    """Mean of sigmoid(alpha*q_i)^2 as a scalar graph node.

    With the mean clip gate enabled, the value still flows but its gradient
    to q is exactly zero once the mean effective bit-width is at or below
    the target; per-channel differences are preserved. The per-element
    alternative clips each q_i at the logit of the target instead.
    """
    n = len(gp)
    a = gp.alpha
    if gp.clip_enabled and gp.clip_mode == "per_element":
        q_lo = inv_sigmoid((gp.target_bits - gp.b_min) / (gp.b_max - gp.b_min)) / a
    else:
        q_lo = None

    def fwd(q):
        if q_lo is not None:
            q = np.maximum(q, q_lo)
        s = sigmoid(a * q)
        return np.float32((s * s).mean())

    gate_active = gp.clip_enabled and gp.clip_mode == "mean_gate" and mean_bits(gp) <= gp.target_bits

    def bwd(g):
        qd = gp.q.data.astype(np.float64)
        if gate_active:
            return (np.zeros_like(gp.q.data),)
        if q_lo is not None:
            live = qd >= q_lo
            qd = np.maximum(qd, q_lo)
        else:
            live = np.ones_like(qd, dtype=bool)
        grad = (2.0 / n) * sigmoid(a * qd) * sigmoid_prime(a * qd) * a
        grad = np.where(live, grad, 0.0)
        return ((float(g) * grad).astype(np.float32),)

    return ad.custom_op(fwd, bwd, (gp.q,), name="bits_loss")


# ---------------------------------------------------------------------------
# core quantization grid


@dataclass
class FakeQuantResult:
    """Dequantized tensor plus everything the wire and the backward need.

    zmin/delta/bits are per-channel vectors along `axis` (tensor- and
    group-granularity stats are expanded to per-channel form so one wire
    layout covers every mode). For the delta-compression baseline these
    describe the encoded change, not the absolute activation.
    """

    x_hat: Tensor
    delta: np.ndarray
    zmin: np.ndarray
    bits: np.ndarray
    residual: np.ndarray
    indices: np.ndarray
    axis: int


@dataclass
class _Grid:
    indices: np.ndarray  # original layout, uint16
    x_hat: np.ndarray
    residual: np.ndarray
    zmin: np.ndarray  # per channel
    zmax: np.ndarray
    delta: np.ndarray
    bits: np.ndarray
    axis: int


def _normalize_axis(x_ndim: int, axis: str) -> int:
    if axis == "channel":
        return x_ndim - 1
    if axis == "token":
        if x_ndim != 3:
            raise QuantError("token-axis quantization needs (batch, seq, channels) input")
        return 1
    raise QuantError(f"unknown axis {axis!r}")


def _unit_of_channel(c: int, granularity: str, group_size: Optional[int]) -> np.ndarray:
    if granularity == "tensor":
        return np.zeros(c, dtype=np.int64)
    if granularity == "channel":
        return np.arange(c, dtype=np.int64)
    if granularity == "group":
        if not group_size or group_size < 1:
            raise QuantError("group granularity needs a positive group size")
        return np.arange(c, dtype=np.int64) // int(group_size)
    raise QuantError(f"unknown granularity {granularity!r}")


def quantize_grid(
    x: np.ndarray,
    bits,
    granularity: str = "channel",
    axis: int = -1,
    group_size: Optional[int] = None,
) -> _Grid:
    """Quantize-dequantize a raw array; the pure forward used by every quantizer."""
    x = np.asarray(x, dtype=np.float32)
    if np.isnan(x).any():
        raise QuantError("NaN in quantizer input")
    axis = axis % x.ndim
    xm = np.moveaxis(x, axis, -1)
    c = xm.shape[-1]
    flat = xm.reshape(-1, c)

    unit = _unit_of_channel(c, granularity, group_size)
    n_units = int(unit.max()) + 1

    bits = np.asarray(bits, dtype=np.float64)
    if bits.ndim == 0:
        unit_bits = np.full(n_units, float(bits))
    elif bits.shape == (n_units,):
        unit_bits = bits.astype(np.float64)
    elif bits.shape == (c,) and granularity == "channel":
        unit_bits = bits.astype(np.float64)
    else:
        raise QuantError(f"bits shape {bits.shape} does not match {n_units} quant units")
    if (unit_bits < 1).any():
        raise QuantError("bit-widths below 1 are not representable")

    cmin = flat.min(axis=0) if flat.size else np.zeros(c, dtype=np.float32)
    cmax = flat.max(axis=0) if flat.size else np.zeros(c, dtype=np.float32)
    if granularity == "tensor":
        umin = np.full(n_units, cmin.min())
        umax = np.full(n_units, cmax.max())
    elif granularity == "channel":
        umin, umax = cmin, cmax
    else:
        starts = np.flatnonzero(np.diff(unit, prepend=-1))
        umin = np.minimum.reduceat(cmin, starts)
        umax = np.maximum.reduceat(cmax, starts)

    ch_bits = unit_bits[unit]
    zmin = umin[unit].astype(np.float32)
    zmax = umax[unit].astype(np.float32)
    s = np.power(2.0, ch_bits) - 1.0
    rng = (zmax - zmin).astype(np.float64)
    degenerate = rng == 0.0
    delta = np.where(degenerate, 1.0, rng / s).astype(np.float32)

    v = (flat - zmin) / delta
    n = np.clip(round_half_away(v), 0.0, max_index(ch_bits))
    # float32 multiply-add, exactly the arithmetic a wire receiver performs
    x_hat_flat = zmin + n.astype(np.float32) * delta
    residual = (n - v).astype(np.float32)

    back = lambda a: np.ascontiguousarray(np.moveaxis(a.reshape(xm.shape), -1, axis))
    return _Grid(
        indices=back(n).astype(np.uint16),
        x_hat=back(x_hat_flat),
        residual=back(residual),
        zmin=zmin,
        zmax=zmax,
        delta=delta,
        bits=ch_bits,
        axis=axis,
    )


# ---------------------------------------------------------------------------
# quantizers


def fake_quant(
    x: Tensor,
    bits,
    granularity: str = "channel",
    axis: str = "channel",
    group_size: Optional[int] = None,
) -> FakeQuantResult:
    """Fixed-bit fake quantization with identity (straight-through) backward."""
    axis_idx = _normalize_axis(x.ndim, axis)
    grid = quantize_grid(x.data, bits, granularity, axis_idx, group_size)
    x_hat = ad.custom_op(lambda _: grid.x_hat, lambda g: (g,), (x,), name="fake_quant")
    return FakeQuantResult(
        x_hat=x_hat,
        delta=grid.delta,
        zmin=grid.zmin,
        bits=grid.bits,
        residual=grid.residual,
        indices=grid.indices,
        axis=axis_idx,
    )


def _amaq_chain(gp: GatingParams, grid: _Grid, length: int) -> tuple[np.ndarray, np.ndarray]:
    """d(delta_i)/d(b_i) and d(b_i)/d(q_i) for the first `length` gating entries."""
    qd = gp.alpha * gp.q.data[:length].astype(np.float64)
    b = grid.bits
    s = np.power(2.0, b) - 1.0
    rng = (grid.zmax - grid.zmin).astype(np.float64)
    ddelta_db = -rng * LN2 * np.power(2.0, b) / (s * s)
    db_dq = (gp.b_max - gp.b_min) * gp.alpha * sigmoid_prime(qd)
    return ddelta_db, db_dq


def amaq_fake_quant(x: Tensor, gp: GatingParams) -> FakeQuantResult:
    """Adaptive quantizer: per-channel bits from the gating, with a custom backward.

    x passes straight through; the gating logits receive the chain
      sum_elem(upstream * (n - v)) * d(delta)/d(bits) * d(bits)/d(q)
    per channel, with batch min/max treated as constants.
    """
    axis_idx = _normalize_axis(x.ndim, gp.axis)
    length = x.shape[axis_idx]
    if len(gp) < length or (gp.axis == "channel" and len(gp) != length):
        raise QuantError(
            f"gating length {len(gp)} does not match quant axis of size {length}"
        )
    bits = effective_bits(gp)[:length]
    grid = quantize_grid(x.data, bits, "channel", axis_idx)
    ddelta_db, db_dq = _amaq_chain(gp, grid, length)

    def bwd(g):
        gm = np.moveaxis(g, axis_idx, -1).reshape(-1, length)
        rm = np.moveaxis(grid.residual, axis_idx, -1).reshape(-1, length)
        per_channel = (gm.astype(np.float64) * rm).sum(axis=0)
        gq = np.zeros(len(gp), dtype=np.float32)
        gq[:length] = (per_channel * ddelta_db * db_dq).astype(np.float32)
        return g, gq

    x_hat = ad.custom_op(lambda *_: grid.x_hat, bwd, (x, gp.q), name="amaq_fake_quant")
    return FakeQuantResult(
        x_hat=x_hat,
        delta=grid.delta,
        zmin=grid.zmin,
        bits=grid.bits,
        residual=grid.residual,
        indices=grid.indices,
        axis=axis_idx,
    )


def amaq_grads_reference(x: np.ndarray, gp: GatingParams, upstream: np.ndarray):
    """Element-looped closed form of the adaptive backward, for cross-checking."""
    axis_idx = _normalize_axis(x.ndim, gp.axis)
    length = x.shape[axis_idx]
    bits = effective_bits(gp)[:length]
    grid = quantize_grid(x, bits, "channel", axis_idx)

    gm = np.moveaxis(upstream, axis_idx, -1).reshape(-1, length).astype(np.float64)
    rm = np.moveaxis(grid.residual, axis_idx, -1).reshape(-1, length).astype(np.float64)
    gq = np.zeros(len(gp), dtype=np.float64)
    for i in range(length):
        b = float(grid.bits[i])
        s = 2.0**b - 1.0
        r = float(grid.zmax[i]) - float(grid.zmin[i])
        ddelta_db = -r * LN2 * (2.0**b) / (s * s)
        qi = gp.alpha * float(gp.q.data[i])
        db_dq = (gp.b_max - gp.b_min) * gp.alpha * float(sigmoid_prime(qi))
        acc = 0.0
        for k in range(gm.shape[0]):
            acc += gm[k, i] * rm[k, i]
        gq[i] = acc * ddelta_db * db_dq
    return upstream.astype(np.float32), gq.astype(np.float32)


# ---------------------------------------------------------------------------
# delta-compression baseline


class AqsgdCache:
    """Last reconstructed activation per (site, sample) key; missing keys read as zeros."""

    def __init__(self):
        self._store: dict = {}

    def get(self, key, shape) -> np.ndarray:
        prev = self._store.get(key)
        if prev is None:
            return np.zeros(shape, dtype=np.float32)
        if prev.shape != tuple(shape):
            raise QuantError(
                f"cache entry {key!r} has shape {prev.shape}, expected {tuple(shape)}"
            )
        return prev

    def put(self, key, value: np.ndarray):
        self._store[key] = np.asarray(value, dtype=np.float32).copy()

    def __len__(self):
        return len(self._store)


def aqsgd_fake_quant(
    x: Tensor,
    cache: AqsgdCache,
    key,
    bits,
    granularity: str = "channel",
    axis: str = "channel",
    group_size: Optional[int] = None,
) -> FakeQuantResult:
    """Quantize the change against the cached reconstruction, then refresh the cache."""
    axis_idx = _normalize_axis(x.ndim, axis)
    prev = cache.get(key, x.shape)
    grid = quantize_grid(x.data - prev, bits, granularity, axis_idx, group_size)
    x_hat_arr = (prev + grid.x_hat).astype(np.float32)
    cache.put(key, x_hat_arr)
    x_hat = ad.custom_op(lambda _: x_hat_arr, lambda g: (g,), (x,), name="aqsgd_fake_quant")
    return FakeQuantResult(
        x_hat=x_hat,
        delta=grid.delta,
        zmin=grid.zmin,
        bits=grid.bits,
        residual=grid.residual,
        indices=grid.indices,
        axis=axis_idx,
    )
