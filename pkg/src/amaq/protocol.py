"""Client/server split training over a framed TCP connection.

Lockstep per micro-batch: the client sends the front activation, the server
runs the middle stage and returns its activation; the client computes the
loss, returns the boundary gradient, and the server answers with the
gradient at the front boundary plus its metrics. Both sides then step their
own optimizers with one agreed gradient-clip scale. Activations and
gradients cross the wire as bit-packed tensors; raw f32 when quantization
is off.
"""

from __future__ import annotations

import json
import logging
import socket
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import wire
from .autodiff import Tensor
from .harness import CLIENT_STAGES, MetricsWriter, NanAbort, RunMetricsRow, Session
from .models import decode_arrays, encode_arrays, save_checkpoint
from .optim import clip_scale
from .sites import StepTraffic
from .wire import FramedSocket, ProtocolError

log = logging.getLogger("amaq.protocol")

PROTOCOL_VERSION = 1
SOCKET_TIMEOUT = 120.0


def _hello_payload(session: Session) -> dict:
    return {
        "version": PROTOCOL_VERSION,
        "digest": session.digest,
        "quant_mode": session.quant_cfg.mode,
        "seed": session.optim_cfg.seed,
        "steps": session.optim_cfg.steps,
    }


def _check_hello(mine: dict, theirs: dict) -> Optional[str]:
    for key in ("version", "digest", "quant_mode", "seed", "steps"):
        if mine.get(key) != theirs.get(key):
            return f"{key} mismatch: ours={mine.get(key)!r} theirs={theirs.get(key)!r}"
    return None


def _send_json(conn: FramedSocket, ftype: str, obj: dict):
    conn.send_frame(ftype, json.dumps(obj).encode())


def _expect(conn: FramedSocket, ftype: str) -> bytes:
    name, body = conn.recv_frame()
    if name == "ERROR":
        raise ProtocolError(f"peer error: {body.decode(errors='replace')}")
    if name != ftype:
        raise ProtocolError(f"expected {ftype}, got {name}")
    return body


def _pack_site_tensor(session: Session, position: int, role: str, step: int, out, res) -> bytes:
    """Serialize a boundary activation from a site hook capture."""
    site = session.sites[position]
    if site.cfg.mode == "none":
        meta = wire.PackMeta(tensor_id=position, step=step, role="raw_f32", shape=out.shape)
        return wire.pack_raw(out.data, meta)
    meta = wire.PackMeta(
        tensor_id=position, step=step, role=role, shape=tuple(res.indices.shape), axis=res.axis
    )
    return wire.pack(res.indices, wire.wire_bits_of(res.bits), res.zmin, res.delta, meta)


def _pack_gradient(session: Session, position: int, step: int, g: np.ndarray, wb_echo=None) -> bytes:
    site = session.sites[position]
    if site.cfg.mode == "none":
        meta = wire.PackMeta(tensor_id=position, step=step, role="raw_f32", shape=g.shape)
        return wire.pack_raw(g, meta)
    grid, wb = site.grad_wire_parts(g, wb_override=wb_echo)
    meta = wire.PackMeta(
        tensor_id=position, step=step, role="bwd_grad", shape=tuple(g.shape), axis=grid.axis
    )
    return wire.pack(grid.indices, wb, grid.zmin, grid.delta, meta)


def _unpack_act(session: Session, body: bytes, step: int, sample_key):
    """Returns (position, reconstructed activation, per-channel wire widths)."""
    up = wire.unpack(body)
    if up.meta.step != step:
        raise ProtocolError(f"step skew: frame {up.meta.step}, local {step}")
    position = up.meta.tensor_id
    x = session.sites[position].receive_act(up, sample_key)
    return position, x, up.wire_bits


def _unpack_grad(body: bytes, step: int) -> tuple[int, np.ndarray]:
    up = wire.unpack(body)
    if up.meta.step != step:
        raise ProtocolError(f"step skew: frame {up.meta.step}, local {step}")
    return up.meta.tensor_id, up.x_hat


class _Endpoint:
    def __init__(self, session: Session, out_dir=None):
        self.session = session
        self.out_dir = Path(out_dir) if out_dir else None
        self.writer = MetricsWriter(self.out_dir, session.digest, background=True) if self.out_dir else None
        self.rows: list[RunMetricsRow] = []

    def _finish(self):
        if self.writer:
            self.writer.close()
            self.writer = None
        if self.out_dir:
            save_checkpoint(
                self.out_dir / "model.ckpt", self.session.digest, self.session.checkpoint_arrays()
            )

    def _record(self, rows):
        self.rows.extend(rows)
        if self.writer:
            self.writer.write_rows(rows)


class ServerEndpoint(_Endpoint):
    """Owns the middle stage; serves exactly one training session."""

    def __init__(self, session: Session, listen_addr=("127.0.0.1", 0), out_dir=None):
        super().__init__(session, out_dir)
        self._listener = socket.create_server(listen_addr)
        self._listener.settimeout(SOCKET_TIMEOUT)
        self.port = self._listener.getsockname()[1]

    def run(self) -> int:
        s = self.session
        opt = s.make_optimizer(("server_middle",))
        conn_sock, _ = self._listener.accept()
        conn_sock.settimeout(SOCKET_TIMEOUT)
        conn = FramedSocket(conn_sock)
        try:
            mine = _hello_payload(s)
            theirs = json.loads(_expect(conn, "HELLO").decode())
            problem = _check_hello(mine, theirs)
            if problem:
                _send_json(conn, "ERROR", {"reason": problem})
                raise ProtocolError(problem)
            _send_json(conn, "HELLO_ACK", mine)

            middle = s.partitions["server_middle"]
            my_sites = s.sites_of(("server_middle",))
            for step in range(s.optim_cfg.steps):
                sample_key = step % s.task.batches_per_epoch
                ad.tape_reset()
                opt.zero_grad()
                traffic = StepTraffic()

                act_body = _expect(conn, "FWD_ACT")
                pos_in, x_arr, wb_in = _unpack_act(s, act_body, step, sample_key)
                traffic.add_act(f"site{pos_in}", len(act_body))
                x_in = Tensor(x_arr, requires_grad=True)
                capture: dict = {}
                hook = s.site_hook(step, None, wire_mode=True, capture=capture)
                out = middle.forward(x_in, hook)
                fe, bs = s.model_cfg.split
                cap_out, cap_res = capture.get(bs, (out, None))
                body = _pack_site_tensor(s, bs, "fwd_act", step, cap_out, cap_res)
                traffic.add_act(f"site{bs}", len(body))
                conn.send_frame("FWD_ACT", body)

                grad_body = _expect(conn, "BWD_GRAD")
                traffic.add_grad(f"site{bs}", len(grad_body))
                gpos, g_out = _unpack_grad(grad_body, step)
                if gpos != bs:
                    raise ProtocolError(f"gradient for site {gpos}, expected {bs}")
                ad.backward(cap_out, grad=g_out)
                penalty = s.bits_penalty(("server_middle",))
                if penalty is not None and s.beta > 0:
                    ad.backward(ad.mul(penalty, s.beta))

                g_front = x_in.grad
                if g_front is None:
                    g_front = np.zeros_like(x_arr)
                gfront_body = _pack_gradient(s, pos_in, step, g_front, wb_echo=wb_in)
                traffic.add_grad(f"site{pos_in}", len(gfront_body))
                conn.send_frame("BWD_GRAD", gfront_body)

                _send_json(
                    conn,
                    "METRICS",
                    {
                        "step": step,
                        "grad_norm_sq": s.model_grad_norm_sq(("server_middle",)),
                        "reached": all(site.reached_target() for site in my_sites),
                    },
                )
                ctl = json.loads(_expect(conn, "METRICS").decode())
                if ctl["step"] != step:
                    raise ProtocolError("metrics step skew")
                opt.step({"model": ctl["clip_scale"]})
                if ctl.get("decay"):
                    s.maybe_decay(opt, True)
                # post-step gating stats, so both transcripts agree
                _send_json(
                    conn,
                    "METRICS",
                    {
                        "step": step,
                        "sites": {
                            site.name: {
                                "mean_bits": site.mean_bits(),
                                "bits_loss": site.bits_loss_value(),
                            }
                            for site in my_sites
                        },
                    },
                )
                self._record(
                    s.metrics_rows(
                        step,
                        ctl.get("task_loss", float("nan")),
                        traffic,
                        0.0,
                        stages=("server_middle",),
                        viewpoint=("server_middle",),
                    )
                )

            name, _ = conn.recv_frame()
            if name != "BYE":
                raise ProtocolError(f"expected BYE, got {name}")
            sync = {n: p.data for n, p in s.partitions["server_middle"].trainable_params().items()}
            conn.send_frame("LORA_SYNC", encode_arrays(sync))
            conn.send_frame("BYE", b"")
            return 0
        finally:
            self._finish()
            conn.close()
            self._listener.close()


class ClientEndpoint(_Endpoint):
    """Owns the front and back stages, the data, and the loss."""

    def __init__(self, session: Session, connect_addr, out_dir=None):
        super().__init__(session, out_dir)
        self.connect_addr = connect_addr
        self.final_sync: Optional[dict] = None

    def run(self) -> int:
        s = self.session
        opt = s.make_optimizer(CLIENT_STAGES)
        conn_sock = socket.create_connection(self.connect_addr, timeout=SOCKET_TIMEOUT)
        conn = FramedSocket(conn_sock)
        try:
            mine = _hello_payload(s)
            _send_json(conn, "HELLO", mine)
            theirs = json.loads(_expect(conn, "HELLO_ACK").decode())
            problem = _check_hello(mine, theirs)
            if problem:
                _send_json(conn, "ERROR", {"reason": problem})
                raise ProtocolError(problem)

            front = s.partitions["client_front"]
            back = s.partitions["client_back"]
            fe, bs = s.model_cfg.split
            for step in range(s.optim_cfg.steps):
                t0 = time.perf_counter()
                sample_key = step % s.task.batches_per_epoch
                batch = s.task.train_batch(step)
                ad.tape_reset()
                opt.zero_grad()
                traffic = StepTraffic()

                capture: dict = {}
                hook = s.site_hook(step, None, wire_mode=True, capture=capture)
                front_out = front.forward(batch.inputs, hook)
                cap_out, cap_res = capture.get(fe, (front_out, None))
                body = _pack_site_tensor(s, fe, "fwd_act", step, cap_out, cap_res)
                traffic.add_act(f"site{fe}", len(body))
                conn.send_frame("FWD_ACT", body)

                act_body = _expect(conn, "FWD_ACT")
                traffic.add_act(f"site{bs}", len(act_body))
                pos_mid, x_arr, wb_mid = _unpack_act(s, act_body, step, sample_key)
                x_mid = Tensor(x_arr, requires_grad=True)
                logits = back.forward(x_mid, hook)

                task_loss = s.task_loss(logits, batch)
                total = task_loss
                penalty = s.bits_penalty(CLIENT_STAGES)
                if penalty is not None and s.beta > 0:
                    total = ad.add(total, ad.mul(penalty, s.beta))
                loss_val = float(task_loss.data)
                if not np.isfinite(total.data).all():
                    raise NanAbort(step, s.nan_diagnostics(step, loss_val))
                ad.backward(total)

                g_mid = x_mid.grad
                if g_mid is None:
                    g_mid = np.zeros_like(x_arr)
                grad_body = _pack_gradient(s, bs, step, g_mid, wb_echo=wb_mid)
                traffic.add_grad(f"site{bs}", len(grad_body))
                conn.send_frame("BWD_GRAD", grad_body)

                gb = _expect(conn, "BWD_GRAD")
                traffic.add_grad(f"site{fe}", len(gb))
                gpos, g_front = _unpack_grad(gb, step)
                if gpos != fe:
                    raise ProtocolError(f"gradient for site {gpos}, expected {fe}")
                ad.backward(cap_out, grad=g_front)

                server = json.loads(_expect(conn, "METRICS").decode())
                if server["step"] != step:
                    raise ProtocolError("metrics step skew")
                norm_sq = s.model_grad_norm_sq(CLIENT_STAGES) + server["grad_norm_sq"]
                scale = clip_scale(norm_sq, s.optim_cfg.clip_norm)
                opt.step({"model": scale})

                reached = s.all_reached_target(CLIENT_STAGES) and server["reached"]
                decayed = s.maybe_decay(opt, reached)
                _send_json(
                    conn,
                    "METRICS",
                    {"step": step, "clip_scale": scale, "decay": decayed, "task_loss": loss_val},
                )
                stats = json.loads(_expect(conn, "METRICS").decode())
                if stats["step"] != step:
                    raise ProtocolError("stats step skew")

                wall_ms = (time.perf_counter() - t0) * 1000.0
                rows = s.metrics_rows(step, loss_val, traffic, wall_ms)
                # fold the server-owned sites' post-step gating stats into the client view
                for row in rows:
                    remote = stats["sites"].get(row.site)
                    if remote is not None:
                        row.mean_bits = remote["mean_bits"]
                        row.bits_loss = remote["bits_loss"]
                self._record(rows)

            conn.send_frame("BYE", b"")
            sync_body = _expect(conn, "LORA_SYNC")
            self.final_sync = decode_arrays(sync_body)
            self._apply_sync(self.final_sync)
            name, _ = conn.recv_frame()
            if name != "BYE":
                raise ProtocolError(f"expected closing BYE, got {name}")
            return 0
        finally:
            self._finish()
            conn.close()

    def _apply_sync(self, arrays: dict):
        """Overwrite local middle-stage trainables with the server's weights."""
        params = dict(self.session.partitions["server_middle"].trainable_params())
        for name, arr in arrays.items():
            if name not in params:
                raise ProtocolError(f"unexpected synced parameter {name!r}")
            if params[name].data.shape != arr.shape:
                raise ProtocolError(f"synced parameter {name!r} has shape {arr.shape}")
            params[name].data = arr.astype(np.float32)


def run_server(session: Session, listen_addr=("127.0.0.1", 0), out_dir=None) -> int:
    return ServerEndpoint(session, listen_addr, out_dir).run()


def run_client(session: Session, connect_addr, out_dir=None) -> int:
    return ClientEndpoint(session, connect_addr, out_dir).run()
