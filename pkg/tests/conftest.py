import numpy as np
import pytest

from amaq.harness import Session
from amaq.models import ModelConfig
from amaq.optim import OptimConfig
from amaq.sites import QuantConfig
from amaq.tasks import Task, TaskSpec


def make_session(
    quant_mode="none",
    steps=20,
    seed=5,
    d_model=16,
    n_layers=2,
    batch_size=4,
    seq_len=12,
    task_name="char_lm",
    tuning="lora",
    model_lr=1e-3,
    digest="test-digest",
    **quant_kw,
) -> Session:
    spec = TaskSpec(
        task_name,
        seed=seed,
        train_size=batch_size * 8,
        eval_size=16,
        seq_len=seq_len,
        batch_size=batch_size,
    )
    vocab = Task(spec).vocab_size
    model_cfg = ModelConfig(
        arch="mlp" if task_name == "synth_classify" else "transformer",
        d_model=d_model,
        n_layers=n_layers,
        n_heads=2,
        vocab_size=vocab,
        max_seq_len=seq_len,
        d_in=spec.d_in,
        split=(0, n_layers),
        tuning=tuning,
        lora_rank=4,
        quant_sites=quant_kw.get("sites", "boundary_only"),
    )
    optim_cfg = OptimConfig(
        model_lr=model_lr,
        bits_lr=1e-2,
        beta=quant_kw.pop("beta", 0.02),
        steps=steps,
        batch_size=batch_size,
        seed=seed,
    )
    quant_cfg = QuantConfig(mode=quant_mode, **quant_kw)
    return Session(model_cfg, spec, optim_cfg, quant_cfg, digest=digest)
