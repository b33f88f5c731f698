"""Operator CLI: local training, the two distributed roles, micro-benchmarks,
gradient checks, and metrics export.

Exit codes: 0 success, 2 config error, 3 protocol error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_NUMERIC = 4

log = logging.getLogger("amaq")


def _setup_logging():
    level = os.environ.get("AMAQ_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(name)s %(message)s")


def _common_overrides(args) -> list[str]:
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"optim.seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"out_dir={json.dumps(args.out)}")
    if getattr(args, "listen", None):
        overrides.append(f"network.listen={json.dumps(args.listen)}")
    if getattr(args, "connect", None):
        overrides.append(f"network.connect={json.dumps(args.connect)}")
    return overrides


def _load(args):
    from .config import load_config

    return load_config(args.config, _common_overrides(args))


def _install_signal_checkpoint():
    def handler(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, handler)


def cmd_train(args) -> int:
    from .config import ConfigError, build_session
    from .harness import LocalTrainer, NanAbort, evaluate

    try:
        doc = _load(args)
        session = build_session(doc)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG

    out_dir = doc.get("out_dir")
    trainer = LocalTrainer(session, out_dir=out_dir)
    _install_signal_checkpoint()
    try:
        try:
            trainer.run()
        except KeyboardInterrupt:
            log.warning("interrupted; checkpoint retained at the last completed step")
            return EXIT_OK
    except NanAbort as e:
        log.error("numerical abort: %s", e)
        return EXIT_NUMERIC
    metric = session.task.spec.metric
    value = evaluate(session)
    log.info("final %s: %.6g", metric, value)
    print(f"{metric}={value:.6g}")
    return EXIT_OK


def _run_endpoint(args, role: str) -> int:
    from .config import ConfigError, build_session, parse_addr
    from .harness import NanAbort, evaluate
    from .protocol import ClientEndpoint, ServerEndpoint
    from .wire import FramingError, ProtocolError

    try:
        doc = _load(args)
        session = build_session(doc)
        addr = parse_addr(doc["network"]["listen" if role == "server" else "connect"])
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG

    out_dir = doc.get("out_dir")
    _install_signal_checkpoint()
    try:
        if role == "server":
            ep = ServerEndpoint(session, addr, out_dir=out_dir)
            log.info("listening on port %d", ep.port)
            ep.run()
        else:
            ep = ClientEndpoint(session, addr, out_dir=out_dir)
            ep.run()
            metric = session.task.spec.metric
            value = evaluate(session)
            log.info("final %s: %.6g", metric, value)
            print(f"{metric}={value:.6g}")
    except NanAbort as e:
        log.error("numerical abort: %s", e)
        return EXIT_NUMERIC
    except (ProtocolError, FramingError, OSError) as e:
        log.error("protocol error: %s", e)
        return EXIT_PROTOCOL
    return EXIT_OK


def cmd_serve(args) -> int:
    return _run_endpoint(args, "server")


def cmd_connect(args) -> int:
    return _run_endpoint(args, "client")


def cmd_bench_pack(args) -> int:
    from . import wire

    try:
        dims = tuple(int(d) for d in args.shape.lower().split("x"))
    except ValueError:
        log.error("config error: shape must look like 16x8")
        return EXIT_CONFIG
    if len(dims) < 2 or len(dims) > 3:
        log.error("config error: shape needs 2 or 3 dims")
        return EXIT_CONFIG
    bits = float(args.bits)
    axis = len(dims) - 1
    c = dims[axis]
    rng = np.random.default_rng(0)
    wb = wire.wire_bits_of(np.full(c, bits))
    idx = rng.integers(0, 1 << int(wb[0]), size=dims).astype(np.uint16)
    zmin = rng.normal(size=c).astype(np.float32)
    delta = np.abs(rng.normal(size=c)).astype(np.float32) + 1e-3
    meta = wire.PackMeta(tensor_id=0, step=0, role="fwd_act", shape=dims, axis=axis)

    predicted = wire.predicted_size(dims, axis, np.full(c, bits))
    blob = wire.pack(idx, np.full(c, bits), zmin, delta, meta)
    raw_bytes = wire.predicted_size(dims, axis, role="raw_f32")

    t0 = time.perf_counter()
    for _ in range(args.iters):
        blob = wire.pack(idx, np.full(c, bits), zmin, delta, meta)
    pack_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    for _ in range(args.iters):
        wire.unpack(blob)
    unpack_s = time.perf_counter() - t0

    mb = len(blob) * args.iters / 1e6
    print(f"shape={args.shape} bits={bits} wire_bits={int(wb[0])}")
    print(f"predicted_bytes={predicted} measured_bytes={len(blob)} raw_f32_bytes={raw_bytes}")
    print(f"pack_throughput_mb_s={mb / pack_s:.2f} unpack_throughput_mb_s={mb / unpack_s:.2f}")
    return EXIT_OK if predicted == len(blob) else EXIT_PROTOCOL


def cmd_grad_check(args) -> int:
    from .gradcheck import run_all

    rows = run_all()
    ok = True
    for name, passed, detail in rows:
        print(f"{name}: {'PASS' if passed else 'FAIL'} ({detail})")
        ok &= passed
    return EXIT_OK if ok else 1


def cmd_export(args) -> int:
    from .harness import CSV_HEADER, RunMetricsRow

    run_dir = Path(args.run)
    csv_path = run_dir / "metrics.csv"
    jsonl_path = run_dir / "metrics.jsonl"
    digest = ""
    rows = []
    if csv_path.exists():
        for line in csv_path.read_text().splitlines():
            if line.startswith("# config_digest="):
                digest = line.split("=", 1)[1]
                continue
            if not line or line.startswith("step,"):
                continue
            rows.append(RunMetricsRow.from_csv(line))
    elif jsonl_path.exists():
        for line in jsonl_path.read_text().splitlines():
            if line:
                rows.append(RunMetricsRow(**json.loads(line)))
    else:
        log.error("no metrics found under %s", run_dir)
        return EXIT_CONFIG

    rows.sort(key=lambda r: (r.step, r.site))
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        path = out_dir / "export.csv"
        with open(path, "w") as f:
            if digest:
                f.write(f"# config_digest={digest}\n")
            f.write(CSV_HEADER + "\n")
            for r in rows:
                f.write(r.to_csv() + "\n")
    else:
        path = out_dir / "export.jsonl"
        with open(path, "w") as f:
            for r in rows:
                f.write(json.dumps(r.__dict__) + "\n")
    print(str(path))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amaq", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override optim.seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--override", action="append", metavar="K=V", help="dotted config override")

    sp = sub.add_parser("train", help="single-process training run")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("serve", help="host the middle stage for one session")
    common(sp)
    sp.add_argument("--listen", default=None, help="host:port to bind")
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("connect", help="drive training against a serving peer")
    common(sp)
    sp.add_argument("--connect", default=None, help="host:port of the server")
    sp.set_defaults(fn=cmd_connect)

    sp = sub.add_parser("bench-pack", help="predicted vs measured packed sizes and throughput")
    sp.add_argument("--shape", default="16x8", help="TxC or BxTxC")
    sp.add_argument("--bits", default="4", help="bit-width (fractional allowed)")
    sp.add_argument("--iters", type=int, default=100)
    sp.set_defaults(fn=cmd_bench_pack)

    sp = sub.add_parser("grad-check", help="run the gradient oracle suites")
    sp.set_defaults(fn=cmd_grad_check)

    sp = sub.add_parser("export", help="re-export run metrics sorted by (step, site)")
    sp.add_argument("--run", required=True, help="run directory")
    sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    sp.add_argument("--out", default=None, help="destination directory (default: run dir)")
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # anything unmapped is a hard failure
        log.error("unhandled error: %s", e, exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
