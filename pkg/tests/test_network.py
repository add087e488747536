import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrprec import tensor as T
from lrprec.errors import ConfigError, DimensionError, FormatError, IntegrityError
from lrprec.network import (MAGIC, LayerSpec as L, LayerStack, backward, encode_checkpoint, forward,
                            forward_batch, init_stack, load_checkpoint, save_checkpoint)

from oracles import finite_difference, naive_conv, naive_pool, relative_gap


def identity_net(n=4, shape=(1, 2, 2), bias=True):
    stack = init_stack([L.flatten(), L.dense(n, n, bias=bias)], 0, shape)
    stack.params[1]["weight"][...] = np.eye(n)
    return stack


def small_stack(seed=0, bias=True):
    specs = [L.conv(2, 3, 3, 1, 1, bias=bias), L.relu(), L.maxpool(2),
             L.flatten(), L.dense(3 * 3 * 3, 5, bias=bias)]
    stack = init_stack(specs, seed, (2, 6, 6))
    if bias:
        rng = np.random.default_rng(seed + 1)
        for p in stack.params:
            if "bias" in p:
                p["bias"][...] = rng.normal(scale=0.1, size=p["bias"].shape)
    return stack


def test_init_is_deterministic():
    a, b = small_stack(3), small_stack(3)
    for pa, pb in zip(a.params, b.params):
        for k in pa:
            np.testing.assert_array_equal(pa[k], pb[k])


def test_dense_parameter_shapes():
    stack = init_stack([L.flatten(), L.dense(4, 2)], 0, (1, 2, 2))
    assert stack.params[1]["weight"].shape == (2, 4)
    assert stack.params[1]["bias"].shape == (2,)
    np.testing.assert_array_equal(stack.params[1]["bias"], 0.0)


def test_fan_in_scaled_variance():
    stack = init_stack([L.flatten(), L.dense(100, 100)], 11, (1, 10, 10))
    w = stack.params[1]["weight"]
    assert w.size == 10_000
    assert abs(w.var() / (2 / 100) - 1) < 0.2


def test_incompatible_specs_name_the_pair():
    with pytest.raises(ConfigError, match=r"layer 2 dense.*layer 1 flatten"):
        init_stack([L.conv(1, 2, 3), L.flatten(), L.dense(99, 2)], 0, (1, 5, 5))


def test_final_layer_must_be_dense():
    with pytest.raises(ConfigError):
        init_stack([L.conv(1, 2, 3), L.relu()], 0, (1, 5, 5))


def test_identity_network_forward():
    tr = forward(identity_net(), np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2))
    np.testing.assert_array_equal(tr.features, [1, 2, 3, 4])


def test_zero_image_gives_zero_features():
    stack = init_stack([L.conv(1, 2, 3, 1, 1), L.relu(), L.flatten(), L.dense(32, 3)], 5, (1, 4, 4))
    np.testing.assert_array_equal(forward(stack, np.zeros((1, 4, 4))).features, 0.0)


def test_forward_shape_mismatch():
    with pytest.raises(DimensionError):
        forward(identity_net(), np.zeros((1, 3, 3)))


def test_forward_equals_composition_of_oracles():
    stack = small_stack(4)
    x = np.random.default_rng(0).normal(size=(2, 6, 6))
    p0, p4 = stack.params[0], stack.params[4]
    h = naive_conv(x, p0["weight"], 1, 1) + p0["bias"][:, None, None]
    h = np.maximum(h, 0)
    h, _ = naive_pool(h, 2, 2)
    ref = p4["weight"] @ h.ravel() + p4["bias"]
    np.testing.assert_allclose(forward(stack, x).features, ref, rtol=1e-12, atol=1e-12)


def test_forward_is_deterministic_and_trace_replays():
    stack = small_stack(5)
    x = np.random.default_rng(1).normal(size=(2, 6, 6))
    a, b = forward(stack, x), forward(stack, x)
    np.testing.assert_array_equal(a.features, b.features)
    assert len(a.inputs) == len(stack.specs)
    # replaying from the last stored input reproduces the output bit-exactly
    last = stack.params[-1]
    np.testing.assert_array_equal(a.inputs[-1] @ last["weight"].T + last["bias"], a.features)


def test_batched_forward_matches_single():
    stack = small_stack(6)
    xs = np.random.default_rng(2).normal(size=(4, 2, 6, 6))
    batch = forward_batch(stack, xs).features
    for n in range(4):
        np.testing.assert_allclose(batch[n], forward(stack, xs[n]).features, rtol=1e-13, atol=1e-13)


def test_backward_identity_dense():
    stack = identity_net()
    stack.params[1]["weight"][...] = np.arange(16.0).reshape(4, 4)
    tr = forward(stack, np.ones((1, 2, 2)))
    _, gx = backward(stack, tr, np.array([1.0, 0, 0, 0]))
    np.testing.assert_array_equal(gx.ravel(), stack.params[1]["weight"][0])


def test_backward_relu_gate():
    stack = init_stack([L.relu(), L.flatten(), L.dense(2, 1, bias=False)], 0, (1, 1, 2))
    stack.params[2]["weight"][...] = [[1.0, 1.0]]
    tr = forward(stack, np.array([[[-1.0, 2.0]]]))
    _, gx = backward(stack, tr, np.array([1.0]))
    np.testing.assert_array_equal(gx, [[[0.0, 1.0]]])


def test_backward_matches_finite_differences():
    stack = init_stack([L.conv(2, 3, 3, 1, 1), L.relu(), L.maxpool(2), L.conv(3, 2, 3, 1, 1), L.relu(),
                        L.flatten(), L.dense(2 * 3 * 3, 4)], 8, (2, 6, 6))
    rng = np.random.default_rng(9)
    for p in stack.params:
        if "bias" in p:
            p["bias"][...] = rng.normal(scale=0.1, size=p["bias"].shape)
    x = rng.normal(size=(2, 6, 6))
    gf = rng.normal(size=4)

    def f():
        return float(forward(stack, x) .features @ gf)

    grads, gx = backward(stack, forward(stack, x), gf)
    for idx, p in enumerate(stack.params):
        for name, arr in p.items():
            num = finite_difference(f, arr)
            assert relative_gap(grads[idx][name], num) < 1e-4, (idx, name)
    assert relative_gap(gx, finite_difference(f, x)) < 1e-4


def test_batched_backward_sums_parameter_gradients():
    stack = small_stack(10)
    rng = np.random.default_rng(3)
    xs, gs = rng.normal(size=(3, 2, 6, 6)), rng.normal(size=(3, 5))
    gb, gxb = backward(stack, forward_batch(stack, xs), gs)
    total = None
    for n in range(3):
        g, gx = backward(stack, forward(stack, xs[n]), gs[n])
        np.testing.assert_allclose(gxb[n], gx, rtol=1e-12, atol=1e-12)
        if total is None:
            total = g
        else:
            for a, b in zip(total, g):
                for k in a:
                    a[k] = a[k] + b[k]
    for a, b in zip(gb, total):
        for k in a:
            np.testing.assert_allclose(a[k], b[k], rtol=1e-10, atol=1e-12)


def test_backward_rejects_foreign_trace():
    tr = forward(identity_net(), np.ones((1, 2, 2)))
    with pytest.raises(IntegrityError):
        backward(small_stack(), tr, np.ones(5))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    stack = small_stack(12)
    path = tmp_path / "net.ckpt"
    save_checkpoint(stack, path)
    loaded = load_checkpoint(path)
    x = np.random.default_rng(4).normal(size=(2, 6, 6))
    np.testing.assert_array_equal(forward(loaded, x).features, forward(stack, x).features)
    assert loaded.specs == stack.specs and loaded.seed == stack.seed


def test_checkpoint_layout_of_four_parameter_net(tmp_path):
    stack = init_stack([L.flatten(), L.dense(2, 2, bias=False)], 0, (1, 1, 2))
    stack.params[1]["weight"][...] = np.eye(2)
    data = encode_checkpoint(stack)
    assert data[:8] == MAGIC
    (n,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16:16 + n])
    assert header["feature_dim"] == 2
    assert len(data) == 8 + 8 + n + 4 * 8
    np.testing.assert_array_equal(np.frombuffer(data[16 + n:], "<f8"), [1, 0, 0, 1])


@pytest.mark.parametrize("cut", [3, 12, 40, -1])
def test_truncated_checkpoint_is_format_error(tmp_path, cut):
    data = encode_checkpoint(small_stack())
    path = tmp_path / "bad.ckpt"
    path.write_bytes(data[:cut])
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert info.value.offset is not None


def test_wrong_magic_is_format_error(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"LRPREC02" + encode_checkpoint(small_stack())[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_trailing_bytes_are_format_error(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(encode_checkpoint(small_stack()) + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_extra_sections_round_trip(tmp_path):
    from lrprec.network import read_checkpoint
    stack = small_stack()
    extra = {"metric": {"E.u0": np.arange(6.0).reshape(2, 3), "q": np.asarray(1.5)}}
    path = tmp_path / "m.ckpt"
    save_checkpoint(stack, path, extra, {"note": "x"})
    ck = read_checkpoint(path)
    np.testing.assert_array_equal(ck.sections["metric"]["E.u0"], extra["metric"]["E.u0"])
    assert float(ck.sections["metric"]["q"]) == 1.5
    assert ck.meta == {"note": "x"}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_spec_dict_round_trip(seed):
    stack = small_stack(seed % 1000)
    specs = [L.from_dict(json.loads(json.dumps(s.to_dict()))) for s in stack.specs]
    assert tuple(specs) == stack.specs
