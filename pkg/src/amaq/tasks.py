"""Desk-scale training tasks: character LM, modular addition, sequence copy,
and a linearly separable classification set for the MLP path.

Every task is generated deterministically from its seed, train and eval
splits are disjoint, and batch order is fixed across epochs (the
delta-compression baseline keys its cache on the batch index).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

TASKS = ("char_lm", "modular_add", "copy_seq", "synth_classify")

_CORPUS = """
The river keeps its own ledger. Every spring it writes a new line in silt
along the banks, and every autumn it collects the debt in fallen leaves.
People who live beside it learn to read the entries: a pale stripe on the
rocks for a dry year, a dark one for a flood. The miller knew the whole
history by heart and would recite it to anyone who waited long enough for
flour. Grain in, stories out, that was the trade.

Engineers have a similar habit. A machine that hums in the morning and
rattles after lunch is telling you about heat, about a bearing that grew
tired, about the oil that thinned. Nobody writes these reports down, but
the careful ones hear them anyway. Maintenance is mostly the art of
listening before the noise becomes expensive.

In the workshop at the edge of town there were three lathes, two of them
older than the man who ran them. He kept a notebook of sounds. Squeal on
startup meant the belt; a soft knock at speed meant the chuck; silence
where a whirr should be meant trouble worth stopping for. Apprentices
thought the notebook was a joke until the day it saved a casting worth a
month of wages. After that they started notebooks of their own.

The weather on the coast turns in minutes. Fishermen watch the birds, the
pressure glass, and the color of the water over the sandbar, and they weigh
the three against each other like judges hearing testimony. No single sign
is trusted alone. The sea rewards the ones who cross-check and is patient
with nobody.

A library is a slow machine for moving sentences between generations. The
cogs are made of paper and the lubricant is curiosity. When a reader finds
a margin note from fifty years ago agreeing with their own suspicion, the
machine has completed one full revolution, and it starts another without
ceremony.

Bread rises on its own schedule. You can warm the kitchen, you can wait,
you can tap the bowl and guess, but the dough decides. Bakers say the
second proof is a negotiation: push too fast and the crumb turns dense,
wait too long and the loaf forgets its shape. Most good work is like that,
a schedule agreed between the worker and the material.

Maps lie a little so they can tell the truth. A coastline drawn at full
detail would fill the page with noise; the cartographer chooses which bays
matter and lets the rest smooth away. The skill is knowing what the
traveler needs, which is never everything, and drawing exactly that much.
The best maps are honest about what they left out.

Clocks in the old station never quite agreed. The one above the ticket
window ran proud by a minute, the platform clock lagged, and the
stationmaster kept a pocket watch he trusted over both. Trains still left
on time, more or less, because everyone knew the offsets by heart. Systems
survive their errors when the errors are steady enough to learn.
"""


@dataclass
class TaskSpec:
    name: str
    seed: int = 0
    train_size: int = 512
    eval_size: int = 64
    seq_len: int = 32
    batch_size: int = 16
    metric: str = ""  # default chosen per task
    d_in: int = 16  # synth_classify input width

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; known: {TASKS}")
        if not self.metric:
            self.metric = {
                "char_lm": "ppl",
                "modular_add": "exact_match",
                "copy_seq": "exact_match",
                "synth_classify": "accuracy",
            }[self.name]
        if self.train_size < self.batch_size:
            raise ValueError("train_size smaller than batch_size")


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    mask: Optional[np.ndarray]


class Task:
    """Materialized dataset with a fixed batch order."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        build = {
            "char_lm": self._build_char_lm,
            "modular_add": self._build_modular_add,
            "copy_seq": self._build_copy_seq,
            "synth_classify": self._build_synth_classify,
        }[spec.name]
        build(rng)
        self.batches_per_epoch = spec.train_size // spec.batch_size

    # --- builders -----------------------------------------------------------

    def _build_char_lm(self, rng):
        text = " ".join(_CORPUS.split())
        chars = sorted(set(text))
        self.vocab_size = len(chars)
        lut = {c: i for i, c in enumerate(chars)}
        data = np.array([lut[c] for c in text], dtype=np.int64)
        t = self.spec.seq_len
        cut = int(len(data) * 0.85)
        if cut <= t + 1 or len(data) - cut <= t + 1:
            raise ValueError("seq_len too long for the embedded corpus")

        def windows(lo, hi, count):
            starts = rng.integers(lo, hi - t - 1, size=count)
            seqs = np.stack([data[s : s + t + 1] for s in starts])
            return Batch(seqs[:, :-1], seqs[:, 1:], np.ones((count, t), dtype=np.float32))

        self._train = windows(0, cut, self.spec.train_size)
        self._eval = windows(cut, len(data), self.spec.eval_size)

    def _build_modular_add(self, rng):
        m = 23
        self.vocab_size = m
        total = self.spec.train_size + self.spec.eval_size
        if total > m * m:
            raise ValueError(f"modular_add supports at most {m*m} distinct samples")
        pairs = rng.permutation(m * m)[:total]
        a, b = pairs // m, pairs % m
        c = (a + b) % m
        inputs = np.stack([a, b], axis=1)
        targets = np.stack([b, c], axis=1)
        mask = np.repeat(np.array([[0.0, 1.0]], dtype=np.float32), total, axis=0)
        ts = self.spec.train_size
        self._train = Batch(inputs[:ts], targets[:ts], mask[:ts])
        self._eval = Batch(inputs[ts:], targets[ts:], mask[ts:])

    def _build_copy_seq(self, rng):
        alphabet = 12
        sep = alphabet
        self.vocab_size = alphabet + 1
        src_len = max((self.spec.seq_len - 1) // 2, 2)
        total = self.spec.train_size + self.spec.eval_size
        seen = set()
        srcs = []
        while len(srcs) < total:
            cand = rng.integers(0, alphabet, size=src_len)
            key = tuple(cand)
            if key not in seen:
                seen.add(key)
                srcs.append(cand)
        srcs = np.stack(srcs)
        seq = np.concatenate([srcs, np.full((total, 1), sep), srcs], axis=1)
        inputs, targets = seq[:, :-1], seq[:, 1:]
        mask = np.zeros_like(inputs, dtype=np.float32)
        mask[:, src_len:] = 1.0  # the copied region, starting at the separator's target
        ts = self.spec.train_size
        self._train = Batch(inputs[:ts], targets[:ts], mask[:ts])
        self._eval = Batch(inputs[ts:], targets[ts:], mask[ts:])

    def _build_synth_classify(self, rng):
        d = self.spec.d_in
        self.vocab_size = 2  # classes
        w = rng.normal(size=d)
        w /= np.linalg.norm(w)
        total = self.spec.train_size + self.spec.eval_size
        xs = []
        while len(xs) < total:
            cand = rng.normal(size=(total, d))
            margin = np.abs(cand @ w)
            xs.extend(cand[margin > 0.15])
        x = np.stack(xs[:total]).astype(np.float32)
        y = (x @ w > 0).astype(np.int64)
        ts = self.spec.train_size
        self._train = Batch(x[:ts], y[:ts], None)
        self._eval = Batch(x[ts:], y[ts:], None)

    # --- access ---------------------------------------------------------------

    def train_batch(self, step: int) -> Batch:
        """Fixed batch order, cycled across epochs."""
        bs = self.spec.batch_size
        i = (step % self.batches_per_epoch) * bs
        b = self._train
        return Batch(
            b.inputs[i : i + bs],
            b.targets[i : i + bs],
            None if b.mask is None else b.mask[i : i + bs],
        )

    def eval_batches(self, batch_size: Optional[int] = None):
        bs = batch_size or self.spec.batch_size
        b = self._eval
        n = b.inputs.shape[0]
        if n == 0:
            raise ValueError("empty eval set")
        for i in range(0, n, bs):
            yield Batch(
                b.inputs[i : i + bs],
                b.targets[i : i + bs],
                None if b.mask is None else b.mask[i : i + bs],
            )


def make_task(spec: TaskSpec) -> Task:
    return Task(spec)
