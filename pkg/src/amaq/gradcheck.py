"""Finite-difference oracles for the built-in ops and the quantizer backwards."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .quant import GatingParams, amaq_fake_quant, amaq_grads_reference, init_gating

FD_EPS = 1e-3


def finite_diff_grad(scalar_fn, x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central-difference gradient of scalar_fn at x, one element at a time."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = scalar_fn()
        flat[i] = orig - eps
        lo = scalar_fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-2) -> float:
    """Max elementwise |a-b| scaled by max(|b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float((np.abs(a - b) / np.maximum(np.abs(b), floor)).max())


def _weighted_scalar(t: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    """Collapse t to a scalar via a fixed weight tensor (keeps FD well-conditioned)."""
    flat = ad.reshape(t, (1, t.size))
    return ad.reshape(ad.matmul(flat, ad.Tensor(w.reshape(-1, 1))), ())


def _gelu64(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _softmax64(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm64(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _cross_entropy64(logits, targets):
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))).reshape(-1)
    flat = logits.reshape(-1, logits.shape[-1])
    picked = flat[np.arange(flat.shape[0]), targets.reshape(-1)]
    return np.asarray((lse - picked).mean())


def _op_cases(op: str, rng):
    """(input arrays, taped builder, independent float64 forward) for one op."""
    if op == "add":
        args = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
        return args, lambda ts: ad.add(ts[0], ts[1]), lambda a, b: a + b
    if op == "mul":
        args = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
        return args, lambda ts: ad.mul(ts[0], ts[1]), lambda a, b: a * b
    if op == "matmul":
        args = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
        return args, lambda ts: ad.matmul(ts[0], ts[1]), lambda a, b: a @ b
    if op == "gelu":
        args = [rng.normal(size=(3, 4))]
        return args, lambda ts: ad.gelu(ts[0]), _gelu64
    if op == "softmax":
        args = [rng.normal(size=(3, 4))]
        return args, lambda ts: ad.softmax(ts[0]), _softmax64
    if op == "layer_norm":
        args = [rng.normal(size=(3, 8)), 1.0 + 0.1 * rng.normal(size=8), 0.1 * rng.normal(size=8)]
        return args, lambda ts: ad.layer_norm(ts[0], ts[1], ts[2]), _layer_norm64
    if op == "embedding_gather":
        ids = rng.integers(0, 5, size=(2, 3))
        args = [rng.normal(size=(5, 4))]
        return args, lambda ts: ad.embedding_gather(ts[0], ids), lambda t: t[ids]
    if op == "cross_entropy":
        tg = rng.integers(0, 6, size=(4,))
        args = [rng.normal(size=(4, 6))]
        return args, lambda ts: ad.cross_entropy(ts[0], tg), lambda lg: _cross_entropy64(lg, tg)
    if op == "transpose":
        args = [rng.normal(size=(2, 3, 4))]
        return args, lambda ts: ad.transpose(ts[0], (2, 0, 1)), lambda t: t.transpose((2, 0, 1))
    if op == "reshape":
        args = [rng.normal(size=(3, 4))]
        return args, lambda ts: ad.reshape(ts[0], (2, 6)), lambda t: t.reshape(2, 6)
    if op == "slice":
        args = [rng.normal(size=(4, 5))]
        sl = (slice(1, 3), slice(0, 4))
        return args, lambda ts: ad.slice_(ts[0], sl), lambda t: t[sl]
    raise KeyError(op)


def check_op_grads(op: str, seeds=(0, 1, 2, 3, 4), tol: float = 1e-3) -> list[tuple[str, float]]:
    """FD-check one built-in op over several random small tensors.

    The finite differences run on an independently coded float64 forward;
    both forwards are first required to agree, then the taped backward must
    match the FD gradient to `tol` relative error.
    """
    results = []
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        args, build, ref = _op_cases(op, rng)
        arrays = [np.asarray(a, dtype=np.float32) for a in args]

        ad.tape_reset()
        out = build([ad.Tensor(a.copy()) for a in arrays])
        ref_out = np.asarray(ref(*[a.astype(np.float64) for a in arrays]))
        if rel_err(out.data, ref_out, floor=1.0) > 1e-5:
            raise AssertionError(f"{op}: forward disagrees with float64 reference")
        w = rng.normal(size=out.size).astype(np.float32)
        w64 = w.astype(np.float64)

        for j, base in enumerate(arrays):
            work = base.astype(np.float64)

            def scalar():
                vals = [a.astype(np.float64) if k != j else work for k, a in enumerate(arrays)]
                return float(np.asarray(ref(*vals)).reshape(-1) @ w64)

            fd = finite_diff_grad(scalar, work)

            ad.tape_reset()
            ins = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
            o = build(ins)
            s = _weighted_scalar(o, w)
            ad.backward(s)
            got = ins[j].grad
            results.append((f"{op}[seed={seed},arg={j}]", rel_err(got, fd)))
    bad = [r for r in results if r[1] >= tol]
    if bad:
        raise AssertionError(f"FD check failed for {op}: {bad}")
    return results


BUILTIN_OPS = (
    "add",
    "mul",
    "matmul",
    "gelu",
    "softmax",
    "layer_norm",
    "embedding_gather",
    "cross_entropy",
    "transpose",
    "reshape",
    "slice",
)


def check_builtin_ops(tol: float = 1e-3) -> list[tuple[str, float]]:
    out = []
    for op in BUILTIN_OPS:
        out.extend(check_op_grads(op, tol=tol))
    return out


def check_amaq_closed_form(seed: int = 0, tol: float = 1e-6) -> float:
    """Production AMAQ backward vs the independently coded per-element chain."""
    rng = np.random.default_rng(2000 + seed)
    x = rng.normal(size=(6, 5)).astype(np.float32)
    gp = init_gating(b_init=5.0, b_min=1, b_max=12, alpha=1.3, length=5)
    gp.q.data += rng.normal(scale=0.4, size=5).astype(np.float32)

    upstream = rng.normal(size=x.shape).astype(np.float32)
    ad.tape_reset()
    xt = ad.Tensor(x.copy(), requires_grad=True)
    res = amaq_fake_quant(xt, gp)
    ad.backward(res.x_hat, grad=upstream)

    gx_ref, gq_ref = amaq_grads_reference(x, gp, upstream)
    err = max(
        float(np.abs(xt.grad - gx_ref).max()),
        float(np.abs(gp.q.grad - gq_ref).max()),
    )
    if err >= tol:
        raise AssertionError(f"AMAQ closed-form mismatch: {err}")
    return err


def check_frozen_index_fd(seed: int = 0, tol: float = 1e-4) -> float:
    """FD on x_hat(delta) = zmin + n*delta with n frozen must match n."""
    rng = np.random.default_rng(3000 + seed)
    x = rng.normal(size=(8, 4)).astype(np.float64)
    gp = init_gating(b_init=4.0, b_min=1, b_max=8, alpha=1.0, length=4)
    res = amaq_fake_quant(ad.Tensor(x.astype(np.float32)), gp)
    n = res.indices.astype(np.float64)
    zmin = res.zmin.astype(np.float64)
    delta = res.delta.astype(np.float64)
    # eps small enough that the frozen surrogate stays linear
    eps = 1e-4
    worst = 0.0
    for c in range(4):
        hi = (zmin[c] + n[:, c] * (delta[c] + eps)).sum()
        lo = (zmin[c] + n[:, c] * (delta[c] - eps)).sum()
        fd = (hi - lo) / (2 * eps)
        expect = n[:, c].sum()
        denom = max(abs(expect), 1.0)
        worst = max(worst, abs(fd - expect) / denom)
    if worst >= tol:
        raise AssertionError(f"frozen-index FD mismatch: {worst}")
    return worst


def check_ste_passthrough(seed: int = 0) -> float:
    """Upstream grad must reach x unchanged through the quantizer."""
    rng = np.random.default_rng(4000 + seed)
    x = rng.normal(size=(5, 3)).astype(np.float32)
    gp = init_gating(b_init=4.0, b_min=1, b_max=8, alpha=1.0, length=3)
    upstream = rng.normal(size=x.shape).astype(np.float32)
    ad.tape_reset()
    xt = ad.Tensor(x, requires_grad=True)
    res = amaq_fake_quant(xt, gp)
    ad.backward(res.x_hat, grad=upstream)
    err = float(np.abs(xt.grad - upstream).max())
    if err != 0.0:
        raise AssertionError(f"STE pass-through not exact: {err}")
    return err


def run_all() -> list[tuple[str, bool, str]]:
    """Run the three oracle suites; returns (name, ok, detail) rows."""
    rows = []
    try:
        res = check_builtin_ops()
        worst = max(r[1] for r in res)
        rows.append(("builtin-ops-fd", True, f"{len(res)} cases, worst rel err {worst:.2e}"))
    except AssertionError as e:
        rows.append(("builtin-ops-fd", False, str(e)))
    try:
        errs = [check_amaq_closed_form(seed=s) for s in range(3)]
        rows.append(("amaq-closed-form", True, f"worst abs err {max(errs):.2e}"))
    except AssertionError as e:
        rows.append(("amaq-closed-form", False, str(e)))
    try:
        errs = [check_frozen_index_fd(seed=s) for s in range(3)]
        rows.append(("frozen-index-fd", True, f"worst rel err {max(errs):.2e}"))
    except AssertionError as e:
        rows.append(("frozen-index-fd", False, str(e)))
    try:
        errs = [check_ste_passthrough(seed=s) for s in range(3)]
        rows.append(("ste-passthrough", True, "exact"))
    except AssertionError as e:
        rows.append(("ste-passthrough", False, str(e)))
    return rows
