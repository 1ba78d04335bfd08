import numpy as np
import pytest

import denopt.autodiff as ad
from denopt.autodiff import Tensor, backward


def fd_check(fn, arrays, h=1e-6, rtol=1e-6, atol=1e-9):
    """Compare reverse-mode gradients of fn(*tensors) with central differences."""
    tensors = [Tensor(a.copy()) for a in arrays]
    loss = fn(*tensors)
    backward(loss)
    for t, a in zip(tensors, arrays):
        grad = t.grad if t.grad is not None else np.zeros_like(a)
        flat = a.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = ad.value_of(fn(*[Tensor(x.copy()) for x in arrays]))
            flat[i] = orig - h
            lm = ad.value_of(fn(*[Tensor(x.copy()) for x in arrays]))
            flat[i] = orig
            num[i] = (lp - lm) / (2 * h)
        np.testing.assert_allclose(grad.reshape(-1), num, rtol=rtol, atol=atol)


RNG = np.random.default_rng(0)


def test_plain_arrays_pass_through():
    a = RNG.random((3, 4))
    assert isinstance(ad.silu(a), np.ndarray)
    assert isinstance(ad.matmul(a, a.T), np.ndarray)
    assert isinstance(ad.total(a), np.floating)
    assert np.array_equal(ad.clip(a, 0.2, 0.8), np.clip(a, 0.2, 0.8))


def test_add_mul_broadcast():
    a = RNG.random((4, 3))
    b = RNG.random((1, 3))
    c = RNG.random(())
    fd_check(lambda x, y, z: ad.total(ad.square(x * y + z * x - y)), [a, b, c])


def test_div_sqrt_exp_log():
    a = RNG.random((5, 2)) + 0.5
    b = RNG.random((5, 2)) + 1.0
    fd_check(lambda x, y: ad.total(ad.log(x) / ad.sqrt(y) + ad.exp(x / 3.0)), [a, b])


def test_matmul():
    a = RNG.random((4, 3))
    b = RNG.random((3, 5))
    fd_check(lambda x, y: ad.total(ad.square(x @ y)), [a, b])
    # constant on one side
    const = RNG.random((3, 5))
    fd_check(lambda x: ad.total(x @ const), [a])


def test_linear_fused():
    x = RNG.random((4, 3))
    w = RNG.random((3, 5))
    b = RNG.random(5)
    out = ad.linear(x, w, b)
    assert np.allclose(out, x @ w + b)
    fd_check(lambda a, c, d: ad.total(ad.square(ad.linear(a, c, d))), [x, w, b])
    # constants mixed in
    fd_check(lambda c: ad.total(ad.square(ad.linear(x, c, b))), [w])


def test_silu_sigmoid():
    x = RNG.standard_normal((6, 4))
    fd_check(lambda t: ad.total(ad.silu(t)), [x])
    fd_check(lambda t: ad.total(ad.sigmoid(t)), [x])
    # silu value matches x * sigmoid(x)
    assert np.allclose(ad.silu(x), x / (1 + np.exp(-x)))


def test_clip_gradient_mask():
    x = np.array([-0.5, 0.1, 0.2, 0.9])
    t = Tensor(x)
    loss = ad.total(ad.clip(t, 0.0, 0.25))
    backward(loss)
    assert np.array_equal(t.grad, [0.0, 1.0, 1.0, 0.0])
    # fd away from the kinks
    fd_check(lambda v: ad.total(ad.square(ad.clip(v, 0.0, 0.25))), [x])


def test_min_max():
    a = RNG.random((7,))
    b = RNG.random((7,))
    fd_check(lambda x, y: ad.total(ad.minimum(x, y) + 2.0 * ad.maximum(x, y)), [a, b])
    # min with constant
    fd_check(lambda x: ad.total(ad.minimum(x, 0.5)), [a])


def test_sum_axis_and_mean():
    x = RNG.random((4, 5))
    fd_check(lambda t: ad.total(ad.square(ad.sum_axis(t, 1))), [x])
    fd_check(lambda t: ad.total(ad.square(ad.sum_axis(t, 0, keepdims=True))), [x])
    fd_check(lambda t: ad.mean_all(ad.square(t)), [x])


def test_concat_cols():
    a = RNG.random((4, 2))
    b = RNG.random((4,))
    c = RNG.random((4, 3))
    fd_check(lambda x, y, z: ad.total(ad.square(ad.concat_cols([x, y, z]))), [a, b, c])
    # mixing constants and tensors
    fd_check(lambda x: ad.total(ad.square(ad.concat_cols([x, np.ones((4, 1))]))), [a])


def test_gather_scatter():
    x = RNG.random((5, 3))
    idx = np.array([0, 2, 2, 4, 1, 0])
    fd_check(lambda t: ad.total(ad.square(ad.gather_rows(t, idx))), [x])


def test_scatter_rows():
    x = RNG.random((3, 2))
    idx = np.array([4, 0, 2])
    out = ad.scatter_rows(x, idx, 5)
    assert np.allclose(out[idx], x)
    assert np.allclose(out[[1, 3]], 0.0)
    fd_check(lambda t: ad.total(ad.square(ad.scatter_rows(t, idx, 5))), [x])


def test_col_ops():
    x = RNG.random((6, 4))
    fd_check(lambda t: ad.total(ad.square(ad.col_slice(t, 1, 3))), [x])
    fd_check(lambda t: ad.total(ad.square(ad.col_at(t, 2))), [x])


def test_segment_sum():
    x = RNG.random((7, 3))
    starts = np.array([0, 3, 4, 7])
    out = ad.segment_sum(x, starts)
    assert np.allclose(out[0], x[:3].sum(axis=0))
    assert np.allclose(out[1], x[3])
    fd_check(lambda t: ad.total(ad.square(ad.segment_sum(t, starts))), [x])


def test_segment_mean_subtract():
    x = RNG.random((7, 3))
    starts = np.array([0, 3, 7])
    out = ad.segment_mean_subtract(x, starts)
    assert np.max(np.abs(out[:3].mean(axis=0))) < 1e-13
    assert np.max(np.abs(out[3:].mean(axis=0))) < 1e-13
    # idempotent
    assert np.allclose(ad.segment_mean_subtract(out, starts), out)
    fd_check(lambda t: ad.total(ad.square(ad.segment_mean_subtract(t, starts))), [x])


def test_expand_scalar_per_segment():
    x = RNG.random((3, 1))
    starts = np.array([0, 2, 3, 6])
    out = ad.expand_scalar_per_segment(x, starts)
    assert out.shape == (6, 1)
    fd_check(lambda t: ad.total(ad.square(ad.expand_scalar_per_segment(t, starts))), [x])


def test_edge_sqdist():
    x = RNG.random((4, 3)) * 2
    src = np.array([0, 1, 2, 3, 0])
    dst = np.array([1, 0, 3, 2, 2])
    out = ad.edge_sqdist(x, src, dst)
    assert np.allclose(out, np.sum((x[dst] - x[src]) ** 2, axis=1))
    fd_check(lambda t: ad.total(ad.square(ad.edge_sqdist(t, src, dst))), [x])


def test_edge_message_silu():
    hd = RNG.random((4, 3))
    hs = RNG.random((4, 3))
    d2 = RNG.random((5,))
    wd2 = RNG.random(3)
    src = np.array([0, 1, 2, 3, 0])
    dst = np.array([1, 0, 3, 2, 2])
    out = ad.edge_message_silu(hd, hs, d2, src, dst, wd2)
    pre = hd[dst] + hs[src] + d2[:, None] * wd2[None, :]
    assert np.allclose(out, pre / (1 + np.exp(-pre)) * 1.0 * np.ones_like(pre) * 1.0 + 0 * pre)
    assert np.allclose(out, pre * (1 / (1 + np.exp(-pre))))
    fd_check(
        lambda a, b, c, w: ad.total(ad.square(ad.edge_message_silu(a, b, c, src, dst, w))),
        [hd, hs, d2, wd2],
    )
    # constant hs: gradient only flows to tensor arguments
    fd_check(
        lambda a, w: ad.total(ad.edge_message_silu(a, hs, d2, src, dst, w)),
        [hd, wd2],
    )


def test_coord_step():
    x = RNG.random((5, 3)) * 2
    # two "ligand" nodes 0 and 1, each with 2 in-edges
    src = np.array([2, 3, 0, 4])
    dst = np.array([0, 0, 1, 1])
    starts = np.array([0, 2, 4])
    s = RNG.random((4, 1))
    out = ad.coord_step(x, s, src, dst, starts)
    diff = x[dst] - x[src]
    d = np.linalg.norm(diff, axis=1, keepdims=True)
    expect = np.add.reduceat(diff / (d + 1) * s, [0, 2], axis=0)
    assert np.allclose(out, expect)
    fd_check(
        lambda t, q: ad.total(ad.square(ad.coord_step(t, q, src, dst, starts))),
        [x, s],
        rtol=1e-5,
    )


def test_diamond_graph_accumulates():
    # same tensor used twice: gradients must accumulate
    x = RNG.random((3, 3))
    fd_check(lambda t: ad.total(t * t + ad.silu(t) * t), [x])


def test_shared_subexpression():
    x = RNG.random((4,))
    def fn(t):
        y = ad.square(t)
        return ad.total(y * 2.0 + ad.sqrt(y + 1.0))
    fd_check(fn, [x])


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        backward(t * 2.0)


def test_python_scalar_interop():
    x = RNG.random((3,))
    fd_check(lambda t: ad.total(2.0 * t + t / 4.0 - 1.0 + (1.0 - t)), [x])


def test_zero_grad_for_unused():
    x = Tensor(np.ones(3))
    y = Tensor(np.ones(3))
    loss = ad.total(x * 2.0)
    backward(loss)
    assert y.grad is None
    assert np.allclose(x.grad, 2.0)
