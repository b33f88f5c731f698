"""Quant sites: one per boundary position, applied to the activation leaving
a stage and the gradient coming back into it.

The forward direction runs the configured quantizer (adaptive bits flow
fractionally so the gating can learn). The backward direction quantizes the
upstream gradient at the integer on-wire widths via an identity-forward node,
so local training and the socket deployment see exactly the same numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import quant, wire
from .autodiff import Tensor


@dataclass
class QuantConfig:
    mode: str = "none"  # none | fixed | aqsgd | amaq
    bits: float = 4.0  # fixed / aqsgd
    granularity: str = "channel"  # fixed: tensor | channel | group
    group_size: Optional[int] = None
    b_min: float = 1.0
    b_max: float = 16.0
    b_init: float = 8.0
    target: float = 4.0
    alpha: float = 1.0
    clip: bool = True
    clip_mode: str = "mean_gate"
    axis: str = "channel"  # channel | token
    sites: str = "boundary_only"  # boundary_only | all_layers

    def __post_init__(self):
        if self.mode not in ("none", "fixed", "aqsgd", "amaq"):
            raise ValueError(f"unknown quant mode {self.mode!r}")
        if self.mode == "fixed" and self.granularity not in quant.GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.sites not in ("boundary_only", "all_layers"):
            raise ValueError(f"unknown sites value {self.sites!r}")


class StepTraffic:
    """Per-step byte accounting, split by site and direction."""

    def __init__(self):
        self.act_bytes: dict[str, int] = {}
        self.grad_bytes: dict[str, int] = {}

    def add_act(self, site: str, n: int):
        self.act_bytes[site] = self.act_bytes.get(site, 0) + n

    def add_grad(self, site: str, n: int):
        self.grad_bytes[site] = self.grad_bytes.get(site, 0) + n


class QuantSite:
    """One quantization point; owns its gating and its delta cache."""

    def __init__(
        self,
        name: str,
        position: int,
        cfg: QuantConfig,
        channels: int,
        max_seq_len: int,
        crosses_wire: bool,
        owner_stage: str,
    ):
        self.name = name
        self.position = position
        self.cfg = cfg
        self.crosses_wire = crosses_wire
        self.owner_stage = owner_stage
        self.gating: Optional[quant.GatingParams] = None
        self.act_cache = quant.AqsgdCache()
        self.peer_cache = quant.AqsgdCache()  # receiver-side mirror in split mode
        self.last_range: tuple[float, float] = (0.0, 0.0)
        if cfg.mode == "amaq":
            length = max_seq_len if cfg.axis == "token" else channels
            self.gating = quant.init_gating(
                b_init=cfg.b_init,
                b_min=cfg.b_min,
                b_max=cfg.b_max,
                alpha=cfg.alpha,
                length=length,
                axis=cfg.axis,
                target_bits=cfg.target,
                clip_enabled=cfg.clip,
                clip_mode=cfg.clip_mode,
            )

    # --- reporting -----------------------------------------------------------

    def mean_bits(self) -> float:
        if self.gating is not None:
            return quant.mean_bits(self.gating)
        if self.cfg.mode == "none":
            return 32.0  # raw f32 on the wire
        return float(self.cfg.bits)

    def bits_loss_value(self) -> float:
        if self.gating is None:
            return 0.0
        s = quant.sigmoid(self.gating.alpha * self.gating.q.data.astype(np.float64))
        return float((s * s).mean())

    def reached_target(self) -> bool:
        if self.gating is None:
            return True
        return quant.mean_bits(self.gating) <= self.gating.target_bits

    # --- wire widths -----------------------------------------------------------

    def _axis_index(self, ndim: int) -> int:
        return quant._normalize_axis(ndim, self.cfg.axis)

    def act_wire_bits(self, shape) -> np.ndarray:
        """Per-channel integer widths for the activation crossing this site."""
        axis = self._axis_index(len(shape))
        c = shape[axis]
        if self.cfg.mode == "amaq":
            return wire.wire_bits_of(quant.effective_bits(self.gating)[:c])
        return wire.wire_bits_of(np.full(c, float(self.cfg.bits)))

    # --- forward path ---------------------------------------------------------

    def apply_forward(
        self,
        x: Tensor,
        step: int,
        sample_key,
        traffic: Optional[StepTraffic] = None,
        eval_mode: bool = False,
        wire_mode: bool = False,
    ) -> tuple[Tensor, Optional[quant.FakeQuantResult]]:
        """Quantize an outbound activation and hook the returning gradient.

        With wire_mode the physical socket performs the gradient-direction
        quantization and byte accounting for wire-crossing sites, so the
        grad node is skipped there; internal sites behave identically in
        both deployments.
        """
        cfg = self.cfg
        skip_grad_node = eval_mode or (wire_mode and self.crosses_wire)
        count_here = traffic is not None and self.crosses_wire and not wire_mode
        if cfg.mode == "none":
            if count_here:
                traffic.add_act(self.name, wire.predicted_size(x.shape, 0, role="raw_f32"))
            if not skip_grad_node:
                x = self._grad_accounting_node(x, traffic if not wire_mode else None)
            return x, None

        if cfg.mode == "fixed":
            res = quant.fake_quant(x, cfg.bits, cfg.granularity, cfg.axis, cfg.group_size)
        elif cfg.mode == "aqsgd":
            if eval_mode:
                res = quant.fake_quant(x, cfg.bits, cfg.granularity, cfg.axis, cfg.group_size)
            else:
                res = quant.aqsgd_fake_quant(
                    x, self.act_cache, sample_key, cfg.bits, cfg.granularity, cfg.axis, cfg.group_size
                )
        else:  # amaq
            res = quant.amaq_fake_quant(x, self.gating)

        self.last_range = (float(res.zmin.min()), float((res.zmin + res.delta).max()))
        if count_here:
            traffic.add_act(
                self.name, wire.predicted_size(x.shape, res.axis, bits=wire.wire_bits_of(res.bits))
            )
        out = res.x_hat
        if not skip_grad_node:
            out = self._grad_quant_node(out, traffic if not wire_mode else None)
        return out, res

    # --- backward path ----------------------------------------------------------

    def grad_wire_parts(self, g: np.ndarray, wb_override=None):
        """Quantization grid and integer widths for a boundary gradient.

        Split endpoints pass the widths echoed from this step's activation
        frame so both sides of the socket agree even though only the owner
        holds the live gating.
        """
        axis = self._axis_index(g.ndim)
        wb = self.act_wire_bits(g.shape) if wb_override is None else np.asarray(wb_override)
        granularity = self.cfg.granularity if self.cfg.mode == "fixed" else "channel"
        grid = quant.quantize_grid(g, wb.astype(np.float64), granularity, axis, self.cfg.group_size)
        return grid, wb

    def quantize_gradient(self, g: np.ndarray) -> tuple[np.ndarray, int]:
        """Quantize a boundary gradient at integer on-wire widths.

        Returns the reconstructed gradient and its packed byte size. Mode
        none passes through at raw f32 size.
        """
        if self.cfg.mode == "none":
            return g, wire.predicted_size(g.shape, 0, role="raw_f32")
        grid, wb = self.grad_wire_parts(g)
        size = wire.predicted_size(g.shape, grid.axis, bits=wb)
        return grid.x_hat, size

    def receive_act(self, up, sample_key) -> np.ndarray:
        """Reconstruct a received activation; the delta baseline folds in the
        receiver-side cache mirror."""
        if self.cfg.mode == "aqsgd":
            prev = self.peer_cache.get(sample_key, up.x_hat.shape)
            x = (prev + up.x_hat).astype(np.float32)
            self.peer_cache.put(sample_key, x)
            return x
        return up.x_hat

    def _grad_quant_node(self, x_hat: Tensor, traffic: Optional[StepTraffic]) -> Tensor:
        def bwd(g):
            gq, size = self.quantize_gradient(g)
            if traffic is not None and self.crosses_wire:
                traffic.add_grad(self.name, size)
            return (gq.astype(np.float32),)

        return ad.custom_op(lambda v: v, bwd, (x_hat,), name=f"{self.name}.grad_quant")

    def _grad_accounting_node(self, x: Tensor, traffic: Optional[StepTraffic]) -> Tensor:
        def bwd(g):
            if traffic is not None and self.crosses_wire:
                traffic.add_grad(self.name, wire.predicted_size(g.shape, 0, role="raw_f32"))
            return (g,)

        return ad.custom_op(lambda v: v, bwd, (x,), name=f"{self.name}.grad_passthrough")


def build_sites(model_config, qcfg: QuantConfig) -> dict[int, QuantSite]:
    """One site per boundary position of the model's site plan."""
    fe, bs = model_config.split
    sites = {}
    for k in model_config.site_positions():
        sites[k] = QuantSite(
            name=f"site{k}",
            position=k,
            cfg=qcfg,
            channels=model_config.d_model,
            max_seq_len=model_config.max_seq_len,
            crosses_wire=k in (fe, bs),
            owner_stage=model_config.position_owner(k),
        )
    return sites
