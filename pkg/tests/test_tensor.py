import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tornadoseg.diagnostics import OP_NAMES, _op_cases, op_gradient_suite
from tornadoseg.exceptions import ContractError, FormatError
from tornadoseg.tensor import (
    CIRCULAR,
    ZERO,
    PaddingMode,
    Tensor,
    batch_norm,
    circular_pad,
    concat,
    conv2d,
    default_dtype,
    gather_rows,
    get_default_dtype,
    grad_check,
    leaky_relu,
    log,
    matmul,
    max_pool_over_group,
    mul,
    no_grad,
    numeric_gradient,
    relu,
    segment_mean,
    softmax,
    tsum,
    upsample_nearest,
)
from tornadoseg.tensor import checkpoint


def test_default_dtype_switch():
    assert get_default_dtype() == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_identity_1x1_conv(f64):
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 5)))
    k = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    np.testing.assert_array_equal(conv2d(x, k).data, x.data)


def test_circular_average_row():
    out = conv2d(Tensor([[[1.0, 2.0, 3.0]]]), Tensor(np.full((1, 1, 1, 3), 1 / 3)), mode=CIRCULAR)
    np.testing.assert_allclose(out.data[0, 0], [2, 2, 2], rtol=1e-6)


@pytest.mark.parametrize("stride,dilation,mode", [(1, 2, ZERO), (1, 2, CIRCULAR), (2, 1, ZERO),
                                                  (2, 1, CIRCULAR), (1, 1, CIRCULAR)])
def test_conv_matches_nested_loop_reference(f64, stride, dilation, mode):
    rng = np.random.default_rng(stride * 10 + dilation)
    x = rng.normal(size=(2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, dilation=dilation, mode=mode)
    ref = oracles.conv2d(x, k, b, stride=stride, dilation=dilation, circular=mode is CIRCULAR)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_conv_batched_matches_per_sample(f64):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 5, 8))
    k = rng.normal(size=(4, 2, 5, 5))
    out = conv2d(Tensor(x), Tensor(k), mode=CIRCULAR)
    np.testing.assert_allclose(out.data, oracles.conv2d_batch(x, k, circular=True), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ContractError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ContractError):
        conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)
    with pytest.raises(ContractError):
        PaddingMode(horizontal="reflect")


def test_circular_pad_definition_and_identity():
    x = Tensor([[[1.0, 2.0, 3.0]]])
    np.testing.assert_array_equal(circular_pad(x, 1).data[0, 0], [3, 1, 2, 3, 1])
    np.testing.assert_array_equal(circular_pad(x, 0).data, x.data)
    with pytest.raises(ContractError):
        circular_pad(x, 3)


def test_circular_pad_gradient_counts_copies(f64):
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 5)), requires_grad=True)
    tsum(circular_pad(x, 2)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [2, 2, 1, 2, 2])
    assert grad_check(lambda t: tsum(mul(circular_pad(t, 2), circular_pad(t, 2))), [x]) < 1e-7


@pytest.mark.parametrize("case", range(50))
def test_circular_conv_is_shift_equivariant(case):
    rng = np.random.default_rng(case)
    w = int(rng.integers(6, 20))
    x = rng.normal(size=(2, 5, w)).astype(np.float32)
    k = rng.normal(size=(3, 2, 3, 5)).astype(np.float32)
    dilation = int(rng.integers(1, 3))
    s = int(rng.integers(-3 * w, 3 * w))
    if 2 * dilation >= w:
        dilation = 1
    base = conv2d(Tensor(x), Tensor(k), dilation=dilation, mode=CIRCULAR).data
    shifted = conv2d(Tensor(np.roll(x, s, axis=-1)), Tensor(k), dilation=dilation, mode=CIRCULAR).data
    np.testing.assert_allclose(shifted, np.roll(base, s, axis=-1), atol=1e-5)


def test_softmax_uniform_and_normalized():
    np.testing.assert_allclose(softmax(Tensor(np.zeros((4, 2, 3)))).data[:, 1, 2], 0.25)
    x = Tensor(np.random.default_rng(0).normal(0, 30, (7, 5, 6)))
    np.testing.assert_allclose(softmax(x, axis=0).data.sum(axis=0), 1.0, atol=1e-6)


def test_upsample_block_repeat():
    out = upsample_nearest(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data[0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_matmul_matches_triple_loop(f64):
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    ref = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-14)


def test_misc_op_values():
    x = Tensor([-2.0, 3.0])
    np.testing.assert_allclose(leaky_relu(x, 0.1).data, [-0.2, 3.0])
    np.testing.assert_array_equal(relu(x).data, [0, 3])
    np.testing.assert_allclose(log(Tensor([1.0, np.e])).data, [0, 1], atol=1e-6)
    feats = Tensor([[1.0, 4.0], [3.0, 2.0], [5.0, 5.0]])
    np.testing.assert_array_equal(max_pool_over_group(feats, [0, 0, 2], 3).data, [[3, 4], [0, 0], [5, 5]])
    np.testing.assert_array_equal(segment_mean(feats, [0, 0, 2], 3).data, [[2, 3], [0, 0], [5, 5]])
    np.testing.assert_array_equal(gather_rows(feats, [2, -1]).data, [[5, 5], [0, 0]])
    cat = concat([Tensor(np.zeros((1, 2, 2))), Tensor(np.ones((2, 2, 2)))], axis=0)
    assert cat.shape == (3, 2, 2)


def test_batch_norm_train_and_eval(f64):
    rng = np.random.default_rng(5)
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 6))
    g, b = rng.normal(size=3), rng.normal(size=3)
    rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
    out = batch_norm(Tensor(x), Tensor(g), Tensor(b), rm, rv, training=True)
    np.testing.assert_allclose(out.data, oracles.batch_norm(x, g, b), atol=1e-10)
    m = x.size // 3
    np.testing.assert_allclose(rm.data, 0.01 * x.mean(axis=(0, 2, 3)), atol=1e-12)
    np.testing.assert_allclose(rv.data, 0.99 + 0.01 * x.var(axis=(0, 2, 3)) * m / (m - 1), atol=1e-12)
    ev = batch_norm(Tensor(x), Tensor(g), Tensor(b), rm, rv, training=False).data
    shape = (1, 3, 1, 1)
    expected = (x - rm.data.reshape(shape)) / np.sqrt(rv.data.reshape(shape) + 1e-5)
    np.testing.assert_allclose(ev, expected * g.reshape(shape) + b.reshape(shape), atol=1e-10)
    with pytest.raises(ContractError):
        batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(b), rm, rv)


def test_backward_examples(f64):
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    tsum(mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)
    with pytest.raises(ContractError):
        mul(x, x).backward()


def test_backward_twice_is_identical(f64):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 5, 7)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    loss = tsum(leaky_relu(conv2d(x, k, mode=CIRCULAR)))
    loss.backward()
    first = (x.grad.copy(), k.grad.copy())
    loss.backward()
    np.testing.assert_array_equal(x.grad, first[0])
    np.testing.assert_array_equal(k.grad, first[1])


def test_non_trainable_leaves_get_no_grad(f64):
    x = Tensor(np.ones(3))
    w = Tensor(np.ones(3), requires_grad=True)
    tsum(mul(x, w)).backward()
    assert x.grad is None and w.grad is not None
    with no_grad():
        assert not tsum(mul(x, w)).requires_grad


def test_composite_conv_relu_gradient(f64):
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    assert grad_check(lambda a, b: tsum(relu(conv2d(a, b, mode=CIRCULAR))), [x, k]) < 1e-4


def test_grad_check_examples(f64):
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=5), requires_grad=True)
    w = Tensor(rng.normal(size=5))
    assert grad_check(lambda t: tsum(mul(t, w)), [x]) < 1e-9
    logits = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    onehot = np.eye(3)[:, rng.integers(0, 3, 5)]
    assert grad_check(lambda t: -tsum(mul(log(softmax(t, axis=0)), Tensor(onehot))), [logits]) < 1e-5
    far = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    assert grad_check(lambda t: tsum(relu(t)), [far]) < 1e-6
    with pytest.raises(ContractError):
        grad_check(lambda t: tsum(t), [Tensor(np.ones(2), requires_grad=True, dtype=np.float32)])


def test_op_gradient_suite_sampled():
    results = op_gradient_suite(instances=10, seed=0)
    assert [r.name for r in results] == list(OP_NAMES)
    assert all(r.passed for r in results), [r.line() for r in results]


def test_near_zero_strided_conv_gradient_is_exact(f64):
    # seed 1, instance 7 has an input coordinate with |grad| ~ 8e-7 where the
    # eps=1e-5 check reports 3.8e-4; the objective is linear in x, so a unit
    # step difference is exact up to rounding and confirms the analytic value
    rng = np.random.default_rng([1, OP_NAMES.index("conv2d_strided")])
    for _ in range(8):
        fn, inputs = _op_cases()["conv2d_strided"](rng)
    fn(*inputs).backward()
    x = inputs[0]
    analytic = x.grad.reshape(-1)[8]
    assert abs(analytic) < 1e-6
    assert numeric_gradient(fn, inputs, x, [8], 1.0)[0] == pytest.approx(analytic, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text("abcdefgh._", min_size=1, max_size=12),
                       st.tuples(st.integers(0, 3), st.integers(0, 4), st.booleans()), max_size=5))
def test_checkpoint_roundtrip(spec):
    rng = np.random.default_rng(0)
    tensors = {name: rng.normal(size=(a, b)).astype(np.float64 if wide else np.float32)
               for name, (a, b, wide) in spec.items()}
    blob = checkpoint.dumps(tensors)
    back = checkpoint.loads(blob)
    assert list(back) == list(tensors)
    for name in tensors:
        assert back[name].dtype == tensors[name].dtype
        np.testing.assert_array_equal(back[name], tensors[name])
    assert checkpoint.dumps(back) == blob


def test_checkpoint_header_layout_and_corruption():
    blob = checkpoint.dumps({"w": np.array([1.0], np.float32)})
    assert blob[:8] == b"TNDOCKPT"
    assert blob[8:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert blob[16:] == b"\x01\x00w\x01\x01\x01\x00\x00\x00" + np.float32(1.0).tobytes()
    for bad in (b"XXXXXXXX" + blob[8:], blob[:-1], blob + b"\0"):
        with pytest.raises(FormatError):
            checkpoint.loads(bad)
