import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kernel_cases import KERNEL_CASES
from manipwm.core import Tensor, WeightAverage, backward, conv2d, mdtn, scaled_dot_attention, softmax
from manipwm.core.gradcheck import check_gradients
from manipwm.core.tensor import ShapeError, no_grad


def naive_conv(x, w, stride, pad):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


def test_conv_ones():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.dims == (1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_zero_kernel():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 6, 6)))
    assert not conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), padding=1).data.any()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_nested_loops(stride, pad):
    rng = np.random.default_rng(7)
    x, w = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    got = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, stride, pad), rtol=0, atol=1e-12)


def test_conv_shape_errors_name_axis():
    with pytest.raises(ShapeError, match="channel"):
        conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="odd"):
        conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


def test_attention_single_key():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((1, 2))
    out = scaled_dot_attention(Tensor(rng.standard_normal((3, 4))),
                               Tensor(rng.standard_normal((1, 4))), Tensor(v)).data
    np.testing.assert_allclose(out, np.repeat(v, 3, axis=0), atol=1e-15)


def test_attention_identical_keys_average():
    rng = np.random.default_rng(1)
    k = np.repeat(rng.standard_normal((1, 3)), 4, axis=0)
    v = rng.standard_normal((4, 2))
    out = scaled_dot_attention(Tensor(rng.standard_normal((2, 3))), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, np.tile(v.mean(0), (2, 1)), atol=1e-14)


def test_attention_two_step_oracle():
    rng = np.random.default_rng(2)
    q, k, v = rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    s = q @ k.T / np.sqrt(3)
    p = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    got = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(got, p @ v, atol=1e-12)


def test_attention_width_mismatch():
    with pytest.raises(ShapeError):
        scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 1))))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(4))).data, 0.25)
    big = softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(big).all() and big[0] == pytest.approx(1.0) and big[1] < 1e-300 + 1e-12
    np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data,
                               [0.09003, 0.24473, 0.66524], atol=1e-5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)), st.floats(-50, 50))
def test_softmax_properties(x, c):
    y = softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)
    assert (y > 0).all() or (y >= 0).all()
    assert (y <= 1).all()
    np.testing.assert_allclose(softmax(Tensor(x + c), axis=-1).data, y, atol=1e-9)


def test_backward_sum_and_square():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(p.sum())
    np.testing.assert_array_equal(p.grad, [1.0, 1.0])
    p.grad = None
    backward((p * p).sum())
    np.testing.assert_array_equal(p.grad, [2.0, 4.0])


def test_backward_shared_node_visited_once():
    p = Tensor(np.array([3.0]), requires_grad=True)
    q = p * 2.0
    backward((q + q * q).sum())  # d/dp (2p + 4p^2) = 2 + 8p
    np.testing.assert_allclose(p.grad, [26.0])


def test_no_grad_records_nothing():
    p = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (p * 2).sum()
    assert not y.requires_grad


@pytest.mark.parametrize("kernel", sorted(KERNEL_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(kernel, seed):
    rng = np.random.default_rng(1000 + seed)
    fn, inputs = KERNEL_CASES[kernel](rng)
    assert check_gradients(fn, inputs, eps=1e-5) <= 1e-4


def test_kernels_deterministic():
    rng = np.random.default_rng(3)
    for name, case in KERNEL_CASES.items():
        fn, _ = case(np.random.default_rng(5))
        a, b = fn().data, fn().data
        assert np.array_equal(a, b), name
    del rng


def test_mdtn_roundtrip(tmp_path):
    for dtype in (np.float32, np.float64):
        arr = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
        mdtn.save(tmp_path / "a.mdtn", arr)
        back = mdtn.load(tmp_path / "a.mdtn")
        assert back.dtype == dtype and np.array_equal(back, arr)
    raw = (tmp_path / "a.mdtn").read_bytes()
    assert raw[:4] == b"MDTN" and raw[4] == 1 and raw[5] == 2 and raw[6] == 3
    assert int.from_bytes(raw[7:15], "little") == 2


def test_mdtn_rejects_garbage():
    with pytest.raises(mdtn.FormatError):
        mdtn.loads(b"XXXX\x01\x01\x00")
    with pytest.raises(mdtn.FormatError):
        mdtn.loads(mdtn.dumps(np.zeros(3))[:-1])


def test_state_roundtrip(tmp_path):
    state = {"a.w": np.ones((2, 2), np.float32), "b": np.arange(3.0)}
    mdtn.save_state(tmp_path, state)
    back, doc = mdtn.load_state(tmp_path)
    assert doc["tensors"][0] == {"name": "a.w", "dims": [2, 2]}
    assert all(np.array_equal(back[k], state[k]) for k in state)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.sampled_from([0.5, 0.9, 0.99]))
@settings(max_examples=40, deadline=None)
def test_weight_average_matches_recurrence(values, decay):
    p = Tensor(np.zeros(3))
    avg = WeightAverage([p], decay)
    expect = 0.0
    for n, v in enumerate(values):
        p.data = np.full(3, v)
        avg.update()
        d = min(decay, (1 + n) / (10 + n))
        expect = d * expect + (1 - d) * v
    avg.copy_to()
    np.testing.assert_allclose(p.data, expect, atol=1e-12)


def test_weight_average_of_constant_weights_is_constant():
    p = Tensor(np.arange(4.0, dtype=np.float32))
    avg = WeightAverage([p], 0.99)
    for _ in range(50):
        avg.update()
    avg.copy_to()
    assert p.data.dtype == np.float32
    np.testing.assert_allclose(p.data, np.arange(4.0), rtol=1e-6)


@pytest.mark.parametrize("decay", [0.0, 1.0, -0.1])
def test_weight_average_rejects_decay(decay):
    with pytest.raises(ValueError):
        WeightAverage([Tensor(np.zeros(1))], decay)
