import math
import struct

import numpy as np
import pytest

from tsvod import tensor as T
from tsvod.errors import ConfigError, ContractError, DimensionError, NumericError
from tsvod.nn import (
    AdamState, FeedForward, Linear, MultiHeadAttention, adam_step, init_params,
    load_checkpoint, save_checkpoint, scaled_dot_attention, sine_positional_encoding, xavier_bound,
)
from tsvod.tensor import Tape, Tensor


def test_adam_first_step_moves_by_lr_times_sign():
    p = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    p.grad = np.array([0.3, -4.0, 0.0])
    state = AdamState(lr=0.1)
    adam_step({"p": p}, state)
    # bias-corrected m/sqrt(v) is g/|g| on step one, up to eps
    g = np.array([0.3, -4.0, 0.0])
    np.testing.assert_allclose(p.data, [1.0, -2.0, 0.5] - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-15)


def test_adam_two_steps_hand_computed():
    p = Tensor([0.0], requires_grad=True)
    state = AdamState(lr=1.0, beta1=0.5, beta2=0.5, eps=0.0)
    for g in (1.0, 3.0):
        p.grad = np.array([g])
        adam_step({"p": p}, state)
    m = (0.5 * 0.5 * 1 + 0.5 * 3) / (1 - 0.25)
    v = (0.5 * 0.5 * 1 + 0.5 * 9) / (1 - 0.25)
    np.testing.assert_allclose(p.data, [-1.0 - m / math.sqrt(v)], rtol=1e-12)


def test_adam_rejects_non_finite_gradient_by_name():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="layer.weight"):
        adam_step({"layer.weight": p}, AdamState())


def test_checkpoint_round_trip_and_layout(tmp_path):
    params = {"a.weight": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
    path = tmp_path / "m.ptse"
    save_checkpoint(path, params)
    blob = path.read_bytes()
    assert blob[:4] == b"PTSE"
    assert struct.unpack("<I", blob[4:8]) == (1,)
    (name_len,) = struct.unpack("<I", blob[8:12])
    assert blob[12:12 + name_len] == b"a.weight"
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ptse"
    path.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_module_state_dict_round_trip_and_mismatch():
    a, b = Linear(4, 3), Linear(4, 3)
    init_params(a, 1)
    init_params(b, 2)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    with pytest.raises((ContractError, DimensionError)):
        Linear(5, 3).load_state_dict(a.state_dict())


def test_init_is_deterministic_per_seed():
    m1, m2, m3 = FeedForward(12), FeedForward(12), FeedForward(12)
    init_params(m1, 7)
    init_params(m2, 7)
    init_params(m3, 8)
    for (n, p), (_, q), (_, r) in zip(m1.named_parameters(), m2.named_parameters(), m3.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
        if n.endswith("weight") and "norm" not in n:
            assert not np.array_equal(p.data, r.data)


def test_xavier_weights_within_bound():
    lin = Linear(30, 20)
    init_params(lin, 0)
    assert np.abs(lin.weight.data).max() <= xavier_bound(30, 20)
    np.testing.assert_array_equal(lin.bias.data, 0.0)


def test_zero_init_gate_outputs_zero_and_focal_prior_bias():
    gate = Linear(8, 4, init="zeros")
    cls = Linear(8, 3, init="focal")
    init_params(gate, 0)
    init_params(cls, 0)
    x = Tensor(np.random.default_rng(0).standard_normal((5, 8)))
    np.testing.assert_array_equal(gate(x).data, 0.0)
    np.testing.assert_allclose(cls.bias.data, -math.log(99.0), rtol=1e-15)


def test_attention_rows_sum_to_one_and_heads_checked():
    rng = np.random.default_rng(0)
    q, k = Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal((9, 6)))
    _, attn = scaled_dot_attention(q, k, k)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)
    with pytest.raises(ConfigError):
        MultiHeadAttention(10, 6)
    mha = MultiHeadAttention(12, 3)
    init_params(mha, 0)
    out, w = mha(Tensor(rng.standard_normal((4, 12))), Tensor(rng.standard_normal((9, 12))))
    assert out.shape == (4, 12) and w.shape == (4, 9)
    with pytest.raises(DimensionError):
        mha(Tensor(np.ones((4, 10))), Tensor(np.ones((9, 12))))


def test_attention_is_permutation_invariant_over_keys():
    rng = np.random.default_rng(1)
    mha = MultiHeadAttention(12, 3)
    init_params(mha, 0)
    q, kv = rng.standard_normal((3, 12)), rng.standard_normal((7, 12))
    perm = rng.permutation(7)
    a, _ = mha(Tensor(q), Tensor(kv))
    b, _ = mha(Tensor(q), Tensor(kv[perm]))
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_positional_encoding_distinct_and_unit_pairs():
    pe = sine_positional_encoding(8, 8, 48).data
    assert pe.shape == (64, 48)
    assert len({row.tobytes() for row in pe}) == 64
    pairs = pe.reshape(64, 24, 2)
    np.testing.assert_allclose((pairs ** 2).sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(pe, sine_positional_encoding(8, 8, 48).data)
    with pytest.raises(ConfigError):
        sine_positional_encoding(4, 4, 10)


def test_linear_backward_shapes():
    lin = Linear(5, 2)
    init_params(lin, 0)
    x = Tensor(np.ones((3, 5)), requires_grad=True)
    with Tape() as tape:
        y = T.tsum(lin(x))
    tape.backward(y)
    assert lin.weight.grad.shape == (2, 5)
    np.testing.assert_array_equal(lin.bias.grad, [3.0, 3.0])
