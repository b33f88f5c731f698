"""Training and evaluation engine.

One Session owns the model partitions, quant sites, task, and optimizer
state for an endpoint; the LocalTrainer drives all three stages in-process,
and the socket endpoints drive their own subsets through the same helpers so
local and split runs share every numeric code path.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import quant
from .models import Model, ModelConfig, save_checkpoint
from .optim import GroupOptimizer, OptimConfig, clip_scale
from .sites import QuantConfig, QuantSite, StepTraffic, build_sites
from .tasks import Task, TaskSpec
from .autodiff import Tensor

CSV_HEADER = "step,task_loss,bits_loss,site,mean_bits,bytes_tx,bytes_rx,wall_ms"

CLIENT_STAGES = ("client_front", "client_back")


@dataclass
class RunMetricsRow:
    step: int
    task_loss: float
    bits_loss: float
    site: str
    mean_bits: float
    bytes_tx: int
    bytes_rx: int
    wall_ms: float

    def to_csv(self) -> str:
        return (
            f"{self.step},{self.task_loss!r},{self.bits_loss!r},{self.site},"
            f"{self.mean_bits!r},{self.bytes_tx},{self.bytes_rx},{self.wall_ms:.3f}"
        )

    @classmethod
    def from_csv(cls, line: str) -> "RunMetricsRow":
        parts = line.strip().split(",")
        if len(parts) != 8:
            raise ValueError(f"bad metrics row: {line!r}")
        return cls(
            step=int(parts[0]),
            task_loss=float(parts[1]),
            bits_loss=float(parts[2]),
            site=parts[3],
            mean_bits=float(parts[4]),
            bytes_tx=int(parts[5]),
            bytes_rx=int(parts[6]),
            wall_ms=float(parts[7]),
        )


class NanAbort(RuntimeError):
    """Loss went non-finite; carries the per-site diagnostic dump."""

    def __init__(self, step: int, diagnostics: dict):
        self.step = step
        self.diagnostics = diagnostics
        super().__init__(f"non-finite loss at step {step}: {json.dumps(diagnostics)}")


class MetricsWriter:
    """CSV plus JSONL mirror. The optional flusher thread keeps file I/O off
    the caller's loop; the queue never blocks the producer (inline fallback)."""

    def __init__(self, out_dir, digest: str, background: bool = False):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._csv = open(self.out_dir / "metrics.csv", "w")
        self._jsonl = open(self.out_dir / "metrics.jsonl", "w")
        self._csv.write(f"# config_digest={digest}\n{CSV_HEADER}\n")
        self._lock = threading.Lock()
        self._queue: Optional[queue.Queue] = None
        self._thread = None
        if background:
            self._queue = queue.Queue(maxsize=10000)
            self._thread = threading.Thread(target=self._drain, daemon=True)
            self._thread.start()

    def _emit(self, rows):
        with self._lock:
            for row in rows:
                self._csv.write(row.to_csv() + "\n")
                self._jsonl.write(json.dumps(asdict(row)) + "\n")

    def _drain(self):
        while True:
            rows = self._queue.get()
            if rows is None:
                return
            self._emit(rows)

    def write_rows(self, rows):
        if self._queue is None:
            self._emit(rows)
            return
        try:
            self._queue.put_nowait(list(rows))
        except queue.Full:  # never block the protocol loop; write inline instead
            self._emit(rows)

    def close(self):
        if self._queue is not None:
            self._queue.put(None)
            self._thread.join()
        with self._lock:
            self._csv.close()
            self._jsonl.close()


class Session:
    """Deterministic bundle of model, sites, task, and optimizer for one run."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        task_spec: TaskSpec,
        optim_cfg: OptimConfig,
        quant_cfg: QuantConfig,
        digest: str = "",
    ):
        self.model_cfg = model_cfg
        self.optim_cfg = optim_cfg
        self.quant_cfg = quant_cfg
        self.digest = digest
        self.task = Task(task_spec)
        self.model = Model(model_cfg, optim_cfg.seed)
        front, middle, back = self.model.partition()
        self.partitions = {"client_front": front, "server_middle": middle, "client_back": back}
        self.sites = build_sites(model_cfg, quant_cfg)
        self.beta = optim_cfg.beta
        self.bits_lr = optim_cfg.bits_lr
        self._decayed = False
        self.n_amaq_sites = sum(1 for s in self.sites.values() if s.gating is not None)

    # --- construction helpers -------------------------------------------------

    def make_optimizer(self, stages) -> GroupOptimizer:
        opt = GroupOptimizer(self.optim_cfg)
        model_params = []
        for stage in stages:
            model_params.extend(self.partitions[stage].trainable_params().values())
        gating_params = [
            s.gating.q for s in self.sites_of(stages) if s.gating is not None
        ]
        opt.add_group("model", model_params, self.optim_cfg.model_lr, self.optim_cfg.weight_decay)
        opt.add_group("gating", gating_params, self.bits_lr, 0.0)  # no decay on bit logits
        return opt

    def sites_of(self, stages) -> list[QuantSite]:
        return [s for _, s in sorted(self.sites.items()) if s.owner_stage in stages]

    def site_hook(
        self,
        step: int,
        traffic: Optional[StepTraffic],
        eval_mode: bool = False,
        wire_mode: bool = False,
        capture: Optional[dict] = None,
    ):
        sample_key = step % self.task.batches_per_epoch

        def hook(position: int, x: Tensor) -> Tensor:
            site = self.sites.get(position)
            if site is None:
                return x
            out, res = site.apply_forward(x, step, sample_key, traffic, eval_mode, wire_mode)
            if capture is not None:
                capture[position] = (out, res)
            return out

        return hook

    # --- loss assembly ----------------------------------------------------------

    def task_loss(self, logits: Tensor, batch) -> Tensor:
        return ad.cross_entropy(logits, batch.targets, batch.mask)

    def bits_penalty(self, stages) -> Optional[Tensor]:
        """Sum of this endpoint's site bit losses over the global site count."""
        terms = [quant.bits_loss(s.gating) for s in self.sites_of(stages) if s.gating is not None]
        if not terms or self.n_amaq_sites == 0:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.mul(total, 1.0 / self.n_amaq_sites)

    def nan_diagnostics(self, step: int, task_loss: float) -> dict:
        return {
            "task_loss": task_loss,
            "sites": {
                s.name: {"mean_bits": s.mean_bits(), "act_range": list(s.last_range)}
                for s in self.sites.values()
            },
        }

    # --- per-step state -----------------------------------------------------------

    def model_grad_norm_sq(self, stages) -> float:
        total = 0.0
        for stage in stages:
            part = 0.0
            for p in self.partitions[stage].trainable_params().values():
                if p.grad is not None:
                    g = p.grad.astype(np.float64).reshape(-1)
                    part += float(g @ g)
            total += part
        return total

    def all_reached_target(self, stages=None) -> bool:
        sites = self.sites_of(stages) if stages else list(self.sites.values())
        return all(s.reached_target() for s in sites)

    def maybe_decay(self, optimizer: GroupOptimizer, all_reached: bool) -> bool:
        """Appendix-style schedule: shrink (bits_lr, beta) once the target is hit."""
        if self._decayed or self.optim_cfg.schedule_decay is None or not all_reached:
            return False
        self.bits_lr *= self.optim_cfg.schedule_decay
        self.beta *= self.optim_cfg.schedule_decay
        optimizer.set_lr("gating", self.bits_lr)
        self._decayed = True
        return True

    def metrics_rows(
        self,
        step: int,
        task_loss: float,
        traffic: StepTraffic,
        wall_ms: float,
        stages=None,
        viewpoint=CLIENT_STAGES,
    ) -> list[RunMetricsRow]:
        rows = []
        for site in self.sites_of(stages) if stages else [s for _, s in sorted(self.sites.items())]:
            act = traffic.act_bytes.get(site.name, 0)
            grad = traffic.grad_bytes.get(site.name, 0)
            # the stage that owns a site sends its activation and receives the
            # returning gradient; tx/rx are relative to the reporting endpoint
            if site.owner_stage in viewpoint:
                tx, rx = act, grad
            else:
                tx, rx = grad, act
            rows.append(
                RunMetricsRow(
                    step=step,
                    task_loss=task_loss,
                    bits_loss=site.bits_loss_value(),
                    site=site.name,
                    mean_bits=site.mean_bits(),
                    bytes_tx=tx,
                    bytes_rx=rx,
                    wall_ms=wall_ms,
                )
            )
        return rows

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = {n: p.data for n, p in self.model.named_params()}
        for site in self.sites.values():
            if site.gating is not None:
                arrays[f"sites.{site.name}.q"] = site.gating.q.data
        return arrays


class LocalTrainer:
    """Single-process training over the three composed stages."""

    def __init__(self, session: Session, out_dir=None, log_every: int = 0):
        self.session = session
        self.out_dir = Path(out_dir) if out_dir else None
        self.writer = (
            MetricsWriter(self.out_dir, session.digest) if self.out_dir else None
        )
        self.log_every = log_every
        self.optimizer = session.make_optimizer(
            ("client_front", "server_middle", "client_back")
        )
        self.rows: list[RunMetricsRow] = []

    def train_step(self, step: int) -> list[RunMetricsRow]:
        s = self.session
        batch = s.task.train_batch(step)
        ad.tape_reset()
        self.optimizer.zero_grad()
        traffic = StepTraffic()
        hook = s.site_hook(step, traffic)

        x = s.partitions["client_front"].forward(batch.inputs, hook)
        x = s.partitions["server_middle"].forward(x, hook)
        logits = s.partitions["client_back"].forward(x, hook)

        task_loss = s.task_loss(logits, batch)
        total = task_loss
        penalty = s.bits_penalty(("client_front", "server_middle", "client_back"))
        if penalty is not None and s.beta > 0:
            total = ad.add(total, ad.mul(penalty, s.beta))

        loss_val = float(task_loss.data)
        if not np.isfinite(total.data).all():
            raise NanAbort(step, s.nan_diagnostics(step, loss_val))
        t0 = time.perf_counter()
        ad.backward(total)

        # global-norm clip over the model group only, summed per stage so the
        # split deployment reproduces the same arithmetic
        client = s.model_grad_norm_sq(CLIENT_STAGES)
        server = s.model_grad_norm_sq(("server_middle",))
        scale = clip_scale(client + server, s.optim_cfg.clip_norm)
        self.optimizer.step({"model": scale})
        s.maybe_decay(self.optimizer, s.all_reached_target())
        wall_ms = (time.perf_counter() - t0) * 1000.0

        rows = s.metrics_rows(step, loss_val, traffic, wall_ms)
        self.rows.extend(rows)
        if self.writer:
            self.writer.write_rows(rows)
        return rows

    def run(self, steps: Optional[int] = None) -> list[RunMetricsRow]:
        steps = steps if steps is not None else self.session.optim_cfg.steps
        try:
            for step in range(steps):
                self.train_step(step)
        finally:
            self.finish()
        return self.rows

    def finish(self):
        if self.writer:
            self.writer.close()
            self.writer = None
        if self.out_dir:
            save_checkpoint(
                self.out_dir / "model.ckpt", self.session.digest, self.session.checkpoint_arrays()
            )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(session: Session, metric: Optional[str] = None) -> float:
    """Run the eval split through the quantized forward path.

    ppl = exp(mean masked token NLL); exact_match = fraction of sequences
    with every masked position predicted correctly; accuracy for the
    classifier task. The delta baseline evaluates through its plain
    fixed-bit analog (there is no reference stream at eval time).
    """
    s = session
    metric = metric or s.task.spec.metric
    nll_sum, mask_sum = 0.0, 0.0
    em_hits, seqs = 0, 0
    correct, count = 0, 0
    with ad.no_grad():
        hook = s.site_hook(0, None, eval_mode=True)
        for batch in s.task.eval_batches():
            x = s.partitions["client_front"].forward(batch.inputs, hook)
            x = s.partitions["server_middle"].forward(x, hook)
            logits = s.partitions["client_back"].forward(x, hook).data

            if metric == "accuracy":
                pred = logits.argmax(axis=-1)
                correct += int((pred == batch.targets).sum())
                count += batch.targets.shape[0]
                continue

            v = logits.shape[-1]
            flat = logits.reshape(-1, v)
            m = flat.max(axis=-1, keepdims=True)
            lse = (m + np.log(np.exp(flat - m).sum(axis=-1, keepdims=True))).reshape(-1)
            tflat = batch.targets.reshape(-1)
            nll = lse - flat[np.arange(flat.shape[0]), tflat]
            mask = (
                np.ones_like(nll)
                if batch.mask is None
                else batch.mask.reshape(-1).astype(np.float64)
            )
            nll_sum += float((nll * mask).sum())
            mask_sum += float(mask.sum())

            pred = logits.argmax(axis=-1)
            hit = (pred == batch.targets) | (
                (batch.mask == 0) if batch.mask is not None else False
            )
            em_hits += int(hit.all(axis=-1).sum())
            seqs += batch.targets.shape[0]

    if metric == "accuracy":
        return correct / max(count, 1)
    if metric == "ppl":
        return float(np.exp(nll_sum / max(mask_sum, 1.0)))
    if metric == "exact_match":
        return em_hits / max(seqs, 1)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# trajectory checking


def bit_trajectory_guard(
    rows, target: float, band: float = 0.1, sites: Optional[set] = None
) -> tuple[bool, list[str]]:
    """Once a site's mean bits reach the target, they must hold within the band."""
    by_site: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        if sites is not None and r.site not in sites:
            continue
        by_site.setdefault(r.site, []).append((r.step, r.mean_bits))
    violations = []
    for site, hist in by_site.items():
        hist.sort()
        reached_at = next((i for i, (_, b) in enumerate(hist) if b <= target), None)
        if reached_at is None:
            violations.append(f"{site}: never reached target {target}")
            continue
        for step, b in hist[reached_at:]:
            if not (target - band <= b <= target + band):
                violations.append(f"{site}: step {step} mean_bits {b:.4f} outside ±{band}")
                break
    return (not violations), violations


def time_to_target(rows, target: float) -> Optional[int]:
    """First step at which every adaptive site's mean bits is at or below target."""
    by_step: dict[int, list[float]] = {}
    for r in rows:
        by_step.setdefault(r.step, []).append(r.mean_bits)
    for step in sorted(by_step):
        if all(b <= target for b in by_step[step]):
            return step
    return None
