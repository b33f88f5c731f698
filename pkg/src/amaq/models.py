"""Toy models that partition into the three split-learning stages.

Both architectures expose the same boundary-position scheme: position k sits
between block k-1 and block k, with position 0 right after the stem
(embeddings / input projection) and position n_layers right before the head.
Quantizers attach to these positions; the stage that produces an activation
owns its position.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STAGES = ("client_front", "server_middle", "client_back")

CKPT_MAGIC = b"AMAQCKPT"
CKPT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "transformer"  # transformer | mlp
    d_model: int = 48
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 64
    max_seq_len: int = 64
    d_in: int = 16  # mlp input width
    split: tuple[int, int] = (0, 2)  # (front_end_layer, back_start_layer)
    tuning: str = "lora"  # lora | full
    lora_rank: int = 8
    lora_alpha: float = 16.0
    init_scale: float = 1.0  # scales the 1/sqrt(d_in) linear init
    quant_sites: str = "boundary_only"  # boundary_only | all_layers

    def __post_init__(self):
        if self.arch not in ("transformer", "mlp"):
            raise ModelError(f"unknown arch {self.arch!r}")
        fe, bs = self.split
        if not (0 <= fe <= bs <= self.n_layers):
            raise ModelError(f"split {self.split} out of range for {self.n_layers} layers")
        if self.tuning not in ("lora", "full"):
            raise ModelError(f"unknown tuning {self.tuning!r}")
        if self.tuning == "lora" and self.lora_rank < 1:
            raise ModelError("lora rank must be >= 1")
        if self.arch == "transformer" and self.d_model % self.n_heads:
            raise ModelError("d_model must divide evenly over heads")
        if self.quant_sites not in ("boundary_only", "all_layers"):
            raise ModelError(f"unknown quant_sites {self.quant_sites!r}")

    def site_positions(self) -> list[int]:
        fe, bs = self.split
        if self.quant_sites == "all_layers":
            return list(range(self.n_layers + 1))
        return sorted({fe, bs})

    def position_owner(self, k: int) -> str:
        fe, bs = self.split
        if k <= fe:
            return "client_front"
        if k <= bs:
            return "server_middle"
        return "client_back"


# ---------------------------------------------------------------------------
# layers


class Linear:
    """Affine layer, optionally carrying a low-rank adapter.

    With adapters, output = x @ W + b + scaling * (x @ A) @ B where B starts
    at zero, so the adapted layer matches the frozen base at initialization.
    """

    def __init__(
        self,
        rng,
        d_in,
        d_out,
        lora: Optional[tuple[int, float, object]] = None,
        trainable=True,
        init_scale: float = 1.0,
    ):
        base_trainable = trainable and lora is None
        self.w = Tensor(
            rng.normal(0, init_scale / np.sqrt(d_in), size=(d_in, d_out)), requires_grad=base_trainable
        )
        self.b = Tensor(np.zeros(d_out), requires_grad=base_trainable)
        self.lora_a = None
        self.lora_b = None
        self.scaling = 0.0
        if lora is not None:
            rank, lora_alpha, lora_rng = lora
            self.lora_a = Tensor(
                lora_rng.normal(0, 1 / np.sqrt(d_in), size=(d_in, rank)), requires_grad=True
            )
            self.lora_b = Tensor(np.zeros((rank, d_out)), requires_grad=True)
            self.scaling = lora_alpha / rank

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.add(ad.matmul(x, self.w), self.b)
        if self.lora_a is not None:
            y = ad.add(y, ad.mul(ad.matmul(ad.matmul(x, self.lora_a), self.lora_b), self.scaling))
        return y

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b
        if self.lora_a is not None:
            yield prefix + ".lora_a", self.lora_a
            yield prefix + ".lora_b", self.lora_b


class LayerNorm:
    def __init__(self, d, trainable=True):
        self.gamma = Tensor(np.ones(d), requires_grad=trainable)
        self.beta = Tensor(np.zeros(d), requires_grad=trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)

    def named_params(self, prefix: str):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta


class TransformerBlock:
    """Pre-norm decoder block: causal self-attention then a gelu MLP."""

    def __init__(self, rng, d_model, n_heads, lora, init_scale=1.0):
        self.d = d_model
        self.h = n_heads
        self.ln1 = LayerNorm(d_model, trainable=lora is None)
        self.ln2 = LayerNorm(d_model, trainable=lora is None)
        self.wq = Linear(rng, d_model, d_model, lora, init_scale=init_scale)
        self.wk = Linear(rng, d_model, d_model, lora, init_scale=init_scale)
        self.wv = Linear(rng, d_model, d_model, lora, init_scale=init_scale)
        self.wo = Linear(rng, d_model, d_model, lora, init_scale=init_scale)
        self.fc1 = Linear(rng, d_model, 4 * d_model, lora, init_scale=init_scale)
        self.fc2 = Linear(rng, 4 * d_model, d_model, lora, init_scale=init_scale)
        self._mask_cache: dict = {}

    def _mask(self, b, t):
        key = (b, t)
        if key not in self._mask_cache:
            m = np.triu(np.full((t, t), -1e9, dtype=np.float32), k=1)
            self._mask_cache[key] = Tensor(np.broadcast_to(m, (b, self.h, t, t)).copy())
        return self._mask_cache[key]

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        hd = d // self.h
        xn = self.ln1(x)

        def heads(m):
            return ad.transpose(ad.reshape(m, (b, t, self.h, hd)), (0, 2, 1, 3))

        q, k, v = heads(self.wq(xn)), heads(self.wk(xn)), heads(self.wv(xn))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        probs = ad.softmax(ad.add(scores, self._mask(b, t)))
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
        x = ad.add(x, self.wo(ctx))

        xn = self.ln2(x)
        return ad.add(x, self.fc2(ad.gelu(self.fc1(xn))))

    def named_params(self, prefix: str):
        for name, layer in (
            ("ln1", self.ln1),
            ("ln2", self.ln2),
            ("wq", self.wq),
            ("wk", self.wk),
            ("wv", self.wv),
            ("wo", self.wo),
            ("fc1", self.fc1),
            ("fc2", self.fc2),
        ):
            yield from layer.named_params(f"{prefix}.{name}")


class MlpBlock:
    def __init__(self, rng, d_model, lora, init_scale=1.0):
        self.fc = Linear(rng, d_model, d_model, lora, init_scale=init_scale)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, ad.gelu(self.fc(x)))

    def named_params(self, prefix: str):
        yield from self.fc.named_params(prefix + ".fc")


# ---------------------------------------------------------------------------
# model


class Model:
    """Monolithic model; partition() carves it into the three stages."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        rng = np.random.default_rng(seed)
        # adapters draw from their own stream so the frozen base is identical
        # across tuning modes for a given seed
        lora_rng = np.random.default_rng([seed, 0xADA])
        lora = (config.lora_rank, config.lora_alpha, lora_rng) if config.tuning == "lora" else None
        full = config.tuning == "full"

        if config.arch == "transformer":
            self.tok_emb = Tensor(
                rng.normal(0, 0.02, size=(config.vocab_size, config.d_model)), requires_grad=full
            )
            self.pos_emb = Tensor(
                rng.normal(0, 0.02, size=(config.max_seq_len, config.d_model)), requires_grad=full
            )
            self.blocks = [
                TransformerBlock(rng, config.d_model, config.n_heads, lora, config.init_scale)
                for _ in range(config.n_layers)
            ]
            self.ln_f = LayerNorm(config.d_model, trainable=full)
            self.head = Linear(
                rng, config.d_model, config.vocab_size, lora=None, trainable=full,
                init_scale=config.init_scale,
            )
        else:
            self.stem = Linear(rng, config.d_in, config.d_model, lora=None, trainable=full,
                               init_scale=config.init_scale)
            self.blocks = [
                MlpBlock(rng, config.d_model, lora, config.init_scale) for _ in range(config.n_layers)
            ]
            self.head = Linear(
                rng, config.d_model, config.vocab_size, lora=None, trainable=full,
                init_scale=config.init_scale,
            )

    # --- stage pieces -----------------------------------------------------

    def stem_forward(self, inputs) -> Tensor:
        cfg = self.config
        if cfg.arch == "transformer":
            ids = np.asarray(inputs)
            if ids.ndim != 2:
                raise ModelError(f"expected (batch, seq) token ids, got shape {ids.shape}")
            b, t = ids.shape
            if t > cfg.max_seq_len:
                raise ModelError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
            pos = np.broadcast_to(np.arange(t), (b, t))
            return ad.add(
                ad.embedding_gather(self.tok_emb, ids), ad.embedding_gather(self.pos_emb, pos)
            )
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        return ad.gelu(self.stem(x))

    def head_forward(self, x: Tensor) -> Tensor:
        if self.config.arch == "transformer":
            x = self.ln_f(x)
        return self.head(x)

    def forward(self, inputs, apply_site: Optional[Callable[[int, Tensor], Tensor]] = None) -> Tensor:
        """Full forward; apply_site hooks each boundary position (for quantizers)."""
        site = apply_site or (lambda k, t: t)
        x = site(0, self.stem_forward(inputs))
        for k, blk in enumerate(self.blocks):
            x = site(k + 1, blk(x))
        return self.head_forward(x)

    # --- parameters ---------------------------------------------------------

    def named_params(self):
        cfg = self.config
        if cfg.arch == "transformer":
            yield "tok_emb", self.tok_emb
            yield "pos_emb", self.pos_emb
        else:
            yield from self.stem.named_params("stem")
        for i, blk in enumerate(self.blocks):
            yield from blk.named_params(f"blocks.{i}")
        if cfg.arch == "transformer":
            yield from self.ln_f.named_params("ln_f")
        yield from self.head.named_params("head")

    def trainable_params(self):
        return {n: p for n, p in self.named_params() if p.requires_grad}

    def partition(self) -> list["ModelPartition"]:
        fe, bs = self.config.split
        return [
            ModelPartition("client_front", self, block_range=(0, fe)),
            ModelPartition("server_middle", self, block_range=(fe, bs)),
            ModelPartition("client_back", self, block_range=(bs, self.config.n_layers)),
        ]


@dataclass
class ModelPartition:
    """One split stage: a block range plus the stem (front) or head (back)."""

    stage: str
    model: Model
    block_range: tuple[int, int]

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ModelError(f"unknown stage {self.stage!r}")

    @property
    def owned_positions(self) -> list[int]:
        """Boundary positions whose activation this stage produces."""
        fe, bs = self.model.config.split
        n = self.model.config.n_layers
        if self.stage == "client_front":
            lo, hi = 0, fe
        elif self.stage == "server_middle":
            lo, hi = fe + 1, bs
        else:
            lo, hi = bs + 1, n
        return [k for k in self.model.config.site_positions() if lo <= k <= hi]

    def forward(self, inputs, apply_site: Optional[Callable[[int, Tensor], Tensor]] = None) -> Tensor:
        """Run this stage's layers, hooking every boundary position it produces.

        apply_site(k, tensor) is called at each traversed position; the site
        registry returns the tensor unchanged where no quantizer is configured.
        """
        site = apply_site or (lambda k, t: t)
        lo, hi = self.block_range
        if self.stage == "client_front":
            x = site(0, self.model.stem_forward(inputs))
        else:
            x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        for k in range(lo, hi):
            x = site(k + 1, self.model.blocks[k](x))
        if self.stage == "client_back":
            x = self.model.head_forward(x)
        return x

    def named_params(self):
        cfg = self.model.config
        lo, hi = self.block_range
        if self.stage == "client_front":
            if cfg.arch == "transformer":
                yield "tok_emb", self.model.tok_emb
                yield "pos_emb", self.model.pos_emb
            else:
                yield from self.model.stem.named_params("stem")
        for i in range(lo, hi):
            yield from self.model.blocks[i].named_params(f"blocks.{i}")
        if self.stage == "client_back":
            if cfg.arch == "transformer":
                yield from self.model.ln_f.named_params("ln_f")
            yield from self.model.head.named_params("head")

    def trainable_params(self):
        return {n: p for n, p in self.named_params() if p.requires_grad}


def build_model(config: ModelConfig, seed: int) -> list[ModelPartition]:
    """Deterministically initialized model, returned as its three partitions."""
    return Model(config, seed).partition()


def lora_forward(
    adapter_a: Tensor,
    adapter_b: Tensor,
    scaling: float,
    base_weight: Tensor,
    base_bias: Tensor,
    x: Tensor,
) -> Tensor:
    """base(x) + scaling * (x @ A) @ B, as a free function for direct checks."""
    base = ad.add(ad.matmul(x, base_weight), base_bias)
    return ad.add(base, ad.mul(ad.matmul(ad.matmul(x, adapter_a), adapter_b), scaling))


# ---------------------------------------------------------------------------
# checkpoints


def config_digest(config_doc: dict) -> str:
    """Stable digest over a config document (dict of plain JSON values)."""
    import json

    canon = json.dumps(config_doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    """Name-length-prefixed f32 arrays, little-endian throughout."""
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_arrays(raw: bytes, off: int = 0) -> dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
    if off != len(raw):
        raise ModelError("trailing bytes after array block")
    return arrays


def save_checkpoint(path, digest: str, arrays: dict[str, np.ndarray]):
    """Versioned binary: magic, u32 version, digest, then name-prefixed f32 arrays."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        d = digest.encode()
        f.write(struct.pack("<I", len(d)))
        f.write(d)
        f.write(encode_arrays(arrays))


def load_checkpoint(path) -> tuple[int, str, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise ModelError("not a checkpoint file (bad magic)")
    off = 8
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    (dlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    digest = raw[off : off + dlen].decode()
    off += dlen
    arrays = decode_arrays(raw, off)
    return version, digest, arrays
