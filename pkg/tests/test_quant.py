import math

import numpy as np
import pytest

from amaq import autodiff as ad
from amaq import quant
from amaq.quant import (
    AqsgdCache,
    GatingParams,
    QuantError,
    amaq_fake_quant,
    amaq_grads_reference,
    aqsgd_fake_quant,
    bits_loss,
    effective_bits,
    fake_quant,
    init_gating,
    mean_bits,
)


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.tape_reset()
    yield
    ad.tape_reset()


def sigma(z):
    return 1.0 / (1.0 + math.exp(-z))


# ---------------------------------------------------------------------------
# gating


def test_effective_bits_center():
    gp = init_gating(8.5, 1, 16, 1.0, 3)
    np.testing.assert_allclose(gp.q.data, 0.0, atol=1e-7)
    np.testing.assert_allclose(effective_bits(gp), 8.5, atol=1e-6)


def test_effective_bits_saturating():
    gp = init_gating(8, 1, 16, 1.0, 2)
    gp.q.data[:] = 10.0
    expect = 1 + 15 * sigma(10.0)  # 15.99932 by hand
    np.testing.assert_allclose(effective_bits(gp), expect, atol=1e-5)
    assert expect == pytest.approx(15.99932, abs=1e-5)


def test_effective_bits_eight_from_inverse_sigmoid():
    gp = init_gating(8, 1, 16, 1.0, 4)
    assert gp.q.data[0] == pytest.approx(math.log(7 / 8), abs=1e-6)
    np.testing.assert_allclose(effective_bits(gp), 8.0, atol=1e-6)


def test_init_gating_three_bit_schedule():
    gp = init_gating(6, 1, 8, 1.0, 5)
    assert gp.q.data[0] == pytest.approx(math.log(5 / 2), abs=1e-6)
    np.testing.assert_allclose(effective_bits(gp), 6.0, atol=1e-6)


def test_init_gating_rejects_out_of_range_init():
    with pytest.raises(QuantError):
        init_gating(1, 1, 16, 1.0, 4)
    with pytest.raises(QuantError):
        init_gating(17, 1, 16, 1.0, 4)


def test_gating_param_invariants():
    with pytest.raises(QuantError):
        GatingParams(ad.Tensor(np.zeros(2)), alpha=1.0, b_min=1, b_max=17, target_bits=4)
    with pytest.raises(QuantError):
        GatingParams(ad.Tensor(np.zeros(2)), alpha=-1.0, b_min=1, b_max=16, target_bits=4)
    with pytest.raises(QuantError):
        GatingParams(ad.Tensor(np.zeros(2)), alpha=1.0, b_min=4, b_max=8, target_bits=2)


def test_mean_bits():
    gp = init_gating(8.5, 1, 16, 1.0, 2)
    assert mean_bits(gp) == pytest.approx(8.5, abs=1e-6)
    gp8 = init_gating(8, 1, 16, 1.0, 2)
    assert mean_bits(gp8) == pytest.approx(8.0, abs=1e-6)
    single = init_gating(5, 1, 16, 1.0, 1)
    assert mean_bits(single) == pytest.approx(effective_bits(single)[0])


def test_effective_bits_strictly_monotone_in_q():
    gp = init_gating(8, 1, 16, 1.3, 64)
    gp.q.data[:] = np.linspace(-6, 6, 64, dtype=np.float32)
    b = effective_bits(gp)
    assert (np.diff(b) > 0).all()
    assert b.min() > 1 and b.max() < 16


def test_bits_loss_values():
    gp = init_gating(8.5, 1, 16, 1.0, 2, clip_enabled=False)
    assert bits_loss(gp).item() == pytest.approx(0.25, abs=1e-6)

    gp.q.data[:] = [0.0, 10.0]
    expect = (0.25 + sigma(10.0) ** 2) / 2  # 0.62496 by hand
    assert bits_loss(gp).item() == pytest.approx(expect, abs=1e-6)
    assert expect == pytest.approx(0.62496, abs=1e-5)


def test_bits_loss_gradient_closed_form():
    gp = init_gating(8, 2, 12, 1.7, 6, clip_enabled=False)
    gp.q.data[:] = np.linspace(-1, 1, 6, dtype=np.float32)
    loss = bits_loss(gp)
    ad.backward(loss)
    a, n = gp.alpha, 6
    expect = [(2 / n) * sigma(a * q) * sigma(a * q) * (1 - sigma(a * q)) * a for q in gp.q.data]
    np.testing.assert_allclose(gp.q.grad, expect, atol=1e-6)


def test_bits_loss_clip_gate_zeroes_gradient_exactly():
    # mean bits 3.95 <= target 4: value returned, grad exactly zero
    gp = init_gating(3.95, 1, 16, 1.0, 4, target_bits=4.0, clip_enabled=True)
    assert mean_bits(gp) == pytest.approx(3.95, abs=1e-6)
    loss = bits_loss(gp)
    assert loss.item() > 0
    ad.backward(loss)
    np.testing.assert_array_equal(gp.q.grad, np.zeros(4))

    # above target: gradient flows
    ad.tape_reset()
    gp_hi = init_gating(4.2, 1, 16, 1.0, 4, target_bits=4.0, clip_enabled=True)
    ad.backward(bits_loss(gp_hi))
    assert np.abs(gp_hi.q.grad).min() > 0


def test_bits_loss_per_element_clip_mode():
    gp = init_gating(5, 1, 16, 1.0, 3, target_bits=4.0, clip_enabled=True, clip_mode="per_element")
    q_lo = math.log(3 / 12) / 1.0  # logit((4-1)/15)
    gp.q.data[:] = [q_lo - 1.0, q_lo + 0.5, 2.0]
    loss = bits_loss(gp)
    # clipped element contributes the clipped value
    expect = (sigma(q_lo) ** 2 + sigma(q_lo + 0.5) ** 2 + sigma(2.0) ** 2) / 3
    assert loss.item() == pytest.approx(expect, abs=1e-6)
    ad.backward(loss)
    assert gp.q.grad[0] == 0.0
    assert gp.q.grad[1] > 0 and gp.q.grad[2] > 0


# ---------------------------------------------------------------------------
# fixed-bit fake quantization


def test_fake_quant_two_bit_tensorwise():
    x = ad.Tensor([0.0, 0.3, 1.0])
    res = fake_quant(x, 2, granularity="tensor")
    np.testing.assert_allclose(res.delta, 1 / 3, atol=1e-6)
    np.testing.assert_array_equal(res.indices, [0, 1, 3])
    np.testing.assert_allclose(res.x_hat.data, [0.0, 1 / 3, 1.0], atol=1e-6)


def test_fake_quant_constant_tensor_passthrough():
    x = ad.Tensor(np.full((4, 3), 2.5))
    res = fake_quant(x, 4, granularity="tensor")
    np.testing.assert_array_equal(res.x_hat.data, x.data)
    np.testing.assert_array_equal(res.delta, np.ones(3))


def test_fake_quant_fractional_bits_three_levels():
    b = math.log2(3)  # s = 2.0 exactly
    x = ad.Tensor(np.linspace(0, 1, 11))
    res = fake_quant(x, b, granularity="tensor")
    levels = np.unique(res.x_hat.data)
    np.testing.assert_allclose(levels, [0.0, 0.5, 1.0], atol=1e-6)
    assert res.indices.max() == 2


def test_fake_quant_rejects_bad_input():
    with pytest.raises(QuantError):
        fake_quant(ad.Tensor([1.0, 2.0]), 0.5)
    with pytest.raises(QuantError):
        fake_quant(ad.Tensor([1.0, float("nan")]), 4)


def test_fake_quant_ste_passthrough():
    x = ad.Tensor(np.linspace(-1, 1, 12).reshape(3, 4), requires_grad=True)
    res = fake_quant(x, 3)
    g = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    ad.backward(res.x_hat, grad=g)
    np.testing.assert_array_equal(x.grad, g)


def test_round_half_away_from_zero():
    v = np.array([0.5, 1.5, 2.5, -0.5, -1.5])
    np.testing.assert_array_equal(quant.round_half_away(v), [1, 2, 3, -1, -2])


# round-trip bound: for elements whose index was not clamped, |x_hat - x| <= delta/2
@pytest.mark.parametrize("granularity", ["tensor", "channel", "group"])
def test_round_trip_bound(granularity):
    rng = np.random.default_rng(42)
    for bits in [1, 2, 3.7, 4, 8]:
        x = rng.normal(size=(16, 8)).astype(np.float32)
        res = fake_quant(ad.Tensor(x), bits, granularity=granularity, group_size=4)
        delta = res.delta  # per channel along last axis
        err = np.abs(res.x_hat.data - x)
        unclamped = res.indices < quant.max_index(res.bits)  # top-of-range elements may clamp
        bound = delta / 2 + 1e-6
        assert (err[unclamped] <= np.broadcast_to(bound, err.shape)[unclamped]).all()
        # clamped elements still bounded by one full step
        assert (err <= np.broadcast_to(delta + 1e-6, err.shape)).all()


def test_monotone_fidelity_more_bits_less_error():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(32, 16)).astype(np.float32)
        maes = []
        for b in range(1, 9):
            res = fake_quant(ad.Tensor(x), b, granularity="channel")
            maes.append(np.abs(res.x_hat.data - x).mean())
        assert all(maes[i] >= maes[i + 1] for i in range(len(maes) - 1))


def test_baseline_collapse_identical_channels():
    rng = np.random.default_rng(1)
    col = rng.normal(size=(32, 1)).astype(np.float32)
    x = np.repeat(col, 6, axis=1)  # all channels share min/max
    a = fake_quant(ad.Tensor(x), 3, granularity="channel")
    b = fake_quant(ad.Tensor(x), 3, granularity="tensor")
    np.testing.assert_array_equal(a.x_hat.data, b.x_hat.data)


def test_baseline_collapse_group_extremes():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(16, 8)).astype(np.float32)
    tensorwise = fake_quant(ad.Tensor(x), 4, granularity="tensor")
    group_all = fake_quant(ad.Tensor(x), 4, granularity="group", group_size=8)
    np.testing.assert_array_equal(tensorwise.x_hat.data, group_all.x_hat.data)

    channelwise = fake_quant(ad.Tensor(x), 4, granularity="channel")
    group_one = fake_quant(ad.Tensor(x), 4, granularity="group", group_size=1)
    np.testing.assert_array_equal(channelwise.x_hat.data, group_one.x_hat.data)


def test_group_granularity_allows_ragged_tail():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 7)).astype(np.float32)
    res = fake_quant(ad.Tensor(x), 4, granularity="group", group_size=3)  # groups 3,3,1
    assert res.x_hat.shape == x.shape


# ---------------------------------------------------------------------------
# adaptive quantizer


def test_amaq_residual_is_index_minus_value():
    # one channel engineered so one element lands at v=2.7 -> n=3
    x = np.array([[0.0], [3.0], [2.7]], dtype=np.float32)
    gp = init_gating(math.log2(4), 1, 8, 1.0, 1)  # s = 3, delta = 1
    res = amaq_fake_quant(ad.Tensor(x), gp)
    assert res.delta[0] == pytest.approx(1.0)
    assert res.indices[2, 0] == 3
    assert res.residual[2, 0] == pytest.approx(0.3, abs=1e-5)


def test_amaq_db_dq_at_center():
    gp = init_gating(8.5, 1, 16, 1.0, 1)  # q = 0
    _, db_dq = quant._amaq_chain(gp, quant.quantize_grid(np.zeros((2, 1), np.float32) + [[0.0], [1.0]], effective_bits(gp), "channel", 1), 1)
    assert db_dq[0] == pytest.approx(15 * 0.25, abs=1e-6)


def test_amaq_ste_passthrough_exact():
    rng = np.random.default_rng(5)
    x = ad.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    gp = init_gating(5, 1, 12, 1.0, 4)
    res = amaq_fake_quant(x, gp)
    g = rng.normal(size=(6, 4)).astype(np.float32)
    ad.backward(res.x_hat, grad=g)
    np.testing.assert_array_equal(x.grad, g)


def test_amaq_backward_matches_reference():
    for seed in range(3):
        ad.tape_reset()
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(7, 5)).astype(np.float32)
        gp = init_gating(6, 1, 12, 1.4, 5)
        gp.q.data += rng.normal(scale=0.3, size=5).astype(np.float32)
        g = rng.normal(size=x.shape).astype(np.float32)

        xt = ad.Tensor(x, requires_grad=True)
        res = amaq_fake_quant(xt, gp)
        ad.backward(res.x_hat, grad=g)

        gx_ref, gq_ref = amaq_grads_reference(x, gp, g)
        np.testing.assert_allclose(xt.grad, gx_ref, atol=1e-6)
        np.testing.assert_allclose(gp.q.grad, gq_ref, atol=1e-6)


def test_amaq_token_axis():
    rng = np.random.default_rng(6)
    x = ad.Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    gp = init_gating(6, 1, 12, 1.0, 10, axis="token")  # max_seq_len 10, seq 5
    res = amaq_fake_quant(x, gp)
    assert res.bits.shape == (5,)
    ad.backward(res.x_hat, grad=np.ones((2, 5, 8), dtype=np.float32))
    assert gp.q.grad is not None
    np.testing.assert_array_equal(gp.q.grad[5:], np.zeros(5))


def test_amaq_axis_mismatch_error():
    gp = init_gating(6, 1, 12, 1.0, 3)
    with pytest.raises(QuantError):
        amaq_fake_quant(ad.Tensor(np.zeros((2, 4))), gp)


def test_amaq_bits_within_declared_range():
    rng = np.random.default_rng(7)
    gp = init_gating(8, 1, 16, 1.0, 6)
    gp.q.data[:] = rng.normal(scale=5, size=6).astype(np.float32)
    res = amaq_fake_quant(ad.Tensor(rng.normal(size=(9, 6))), gp)
    assert (res.bits > 1).all() and (res.bits < 16).all()


# ---------------------------------------------------------------------------
# delta-compression baseline


def test_aqsgd_first_call_matches_plain_quant():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(10, 4)).astype(np.float32)
    cache = AqsgdCache()
    res = aqsgd_fake_quant(ad.Tensor(x), cache, key=("s", 0), bits=4)
    plain = fake_quant(ad.Tensor(x), 4)
    np.testing.assert_array_equal(res.x_hat.data, plain.x_hat.data)


def test_aqsgd_missing_key_encodes_x_itself():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(6, 3)).astype(np.float32)
    cache = AqsgdCache()
    res = aqsgd_fake_quant(ad.Tensor(x), cache, key="fresh", bits=3)
    # delta against zeros == x: encoded range must match x's own range
    np.testing.assert_allclose(res.zmin, x.min(axis=0), atol=1e-6)


def test_aqsgd_error_shrinks_on_repeat():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(12, 5)).astype(np.float32)
    cache = AqsgdCache()
    first = aqsgd_fake_quant(ad.Tensor(x), cache, key=0, bits=3)
    e1 = np.abs(first.x_hat.data - x).max()
    second = aqsgd_fake_quant(ad.Tensor(x), cache, key=0, bits=3)
    e2 = np.abs(second.x_hat.data - x).max()
    assert e2 <= e1 + 1e-7
    # bounded by half a step of the (shrunken) delta grid
    assert e2 <= second.delta.max() / 2 + 1e-6


def test_aqsgd_shape_change_rejected():
    cache = AqsgdCache()
    aqsgd_fake_quant(ad.Tensor(np.zeros((4, 3))), cache, key="k", bits=4)
    with pytest.raises(QuantError):
        aqsgd_fake_quant(ad.Tensor(np.zeros((5, 3))), cache, key="k", bits=4)


def test_aqsgd_ste_passthrough():
    cache = AqsgdCache()
    x = ad.Tensor(np.linspace(0, 1, 8).reshape(2, 4), requires_grad=True)
    res = aqsgd_fake_quant(x, cache, key="g", bits=4)
    g = np.full((2, 4), 0.5, dtype=np.float32)
    ad.backward(res.x_hat, grad=g)
    np.testing.assert_array_equal(x.grad, g)
