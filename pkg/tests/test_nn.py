import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scan2num import nn
from scan2num.errors import NumericalError


def direct_conv(x, w, b, s):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    oh, ow = (h - k) // s + 1, (wd - k) // s + 1
    out = np.zeros((n, co, oh, ow))
    for bi in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += x[bi, ci, i * s + di, j * s + dj] * w[o, ci, di, dj]
                    out[bi, o, i, j] = acc
    return out


def fd_check(fn, arrays, analytic, **kw):
    err, _ = nn.gradient_check(fn, arrays, analytic, **kw)
    return err


# ------------------------------------------------------------------ conv

def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 1, 1, 1)).astype(np.float32)
    out, _ = nn.conv2d_forward(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32), 1)
    np.testing.assert_array_equal(out, x)


def test_conv_output_size_table():
    x = np.zeros((1, 1, 512, 512), np.float32)
    out, _ = nn.conv2d_forward(x, np.zeros((2, 1, 5, 5), np.float32), np.zeros(2, np.float32), 2)
    assert out.shape == (1, 2, 254, 254)


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    out, _ = nn.conv2d_forward(x, w, b, 1)
    ref = direct_conv(x.astype(np.float64), w, b, 1)
    assert np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-3)) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), co=st.integers(1, 3), h=st.integers(1, 8),
       w=st.integers(1, 8), k=st.integers(1, 4), s=st.integers(1, 3), seed=st.integers(0, 999))
def test_conv_direct_sum_property(n, c, co, h, w, k, s, seed):
    if k > min(h, w):
        return
    rng = np.random.default_rng(seed)
    x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(co, c, k, k)), rng.normal(size=co)
    out, _ = nn.conv2d_forward(x, wt, b, s)
    np.testing.assert_allclose(out, direct_conv(x, wt, b, s), rtol=1e-10, atol=1e-10)


def test_conv_errors():
    x = np.zeros((1, 2, 5, 5))
    with pytest.raises(ValueError, match="channels"):
        nn.conv2d_forward(x, np.zeros((1, 3, 3, 3)), np.zeros(1), 1)
    with pytest.raises(ValueError, match="smaller"):
        nn.conv2d_forward(x, np.zeros((1, 2, 7, 7)), np.zeros(1), 1)


def test_conv_gradients():
    rng = np.random.default_rng(2)
    arrays = {"x": rng.normal(size=(2, 2, 7, 7)), "w": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)}
    up = rng.normal(size=(2, 3, 3, 3))

    def f(a):
        return float((nn.conv2d_forward(a["x"], a["w"], a["b"], 2)[0] * up).sum())

    _, cache = nn.conv2d_forward(arrays["x"], arrays["w"], arrays["b"], 2)
    dx, dw, db = nn.conv2d_backward(up, cache)
    assert fd_check(f, arrays, {"x": dx, "w": dw, "b": db}) < 1e-5


def test_cnhw_conv_skips_input_grad():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 6, 6))
    w, b = rng.normal(size=(2, 1, 3, 3)), np.zeros(2)
    out, cache = nn.conv2d_cnhw_forward(x, w, b, 1)
    dx, dw, db = nn.conv2d_cnhw_backward(np.ones_like(out), cache, need_dx=False)
    assert dx is None and dw.shape == w.shape and db.shape == (2,)


# ------------------------------------------------------------------ pool

@pytest.mark.parametrize("h,expected", [(15, 8), (254, 127)])
def test_maxpool_sizes(h, expected):
    out, _ = nn.maxpool2d_forward(np.zeros((1, 1, h, h), np.float32), 2, 2)
    assert out.shape[2:] == (expected, expected)


def test_maxpool_too_large_kernel():
    with pytest.raises(ValueError):
        nn.maxpool2d_forward(np.zeros((1, 1, 2, 2)), 5, 2)


def test_maxpool_gradient():
    rng = np.random.default_rng(4)
    arrays = {"x": rng.normal(size=(2, 3, 7, 5))}
    out, cache = nn.maxpool2d_forward(arrays["x"], 2, 2)
    up = rng.normal(size=out.shape)

    def f(a):
        return float((nn.maxpool2d_forward(a["x"], 2, 2)[0] * up).sum())

    assert fd_check(f, arrays, {"x": nn.maxpool2d_backward(up, cache)}) < 1e-5


# ------------------------------------------------------------------ relu

def test_relu_values_and_zero_gradient():
    out, mask = nn.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])
    np.testing.assert_array_equal(nn.relu_backward(np.ones(3), mask), [0, 0, 1])
    out, mask = nn.relu_forward(-np.ones(4))
    assert not out.any() and not nn.relu_backward(np.ones(4), mask).any()


def test_relu_gradient_away_from_zero():
    rng = np.random.default_rng(5)
    x = rng.normal(size=50)
    x[np.abs(x) < 0.05] = 0.5
    up = rng.normal(size=50)
    _, mask = nn.relu_forward(x)
    err = fd_check(lambda a: float((nn.relu_forward(a["x"])[0] * up).sum()), {"x": x},
                   {"x": nn.relu_backward(up, mask)})
    assert err < 1e-5


# --------------------------------------------------------------- dropout

def test_dropout_modes():
    x = np.arange(6.0)
    assert nn.dropout_forward(x, 0.5, False)[0] is x
    np.testing.assert_array_equal(nn.dropout_forward(x, 0.0, True, np.random.default_rng(0))[0], x)
    with pytest.raises(ValueError):
        nn.dropout_forward(x, 1.0, True, np.random.default_rng(0))


def test_dropout_mean_preserved_and_backward_mask():
    x = np.ones(100_000, np.float32)
    out, mask = nn.dropout_forward(x, 0.5, True, np.random.default_rng(6))
    assert 0.98 <= out.mean() <= 1.02
    assert set(np.unique(out)) == {0.0, 2.0}
    np.testing.assert_array_equal(nn.dropout_backward(np.ones_like(x), mask), out)


# ---------------------------------------------------------------- affine

def test_affine_identity_shape_and_errors():
    x = np.random.default_rng(7).normal(size=(3, 4))
    np.testing.assert_array_equal(nn.affine_forward(x, np.eye(4), np.zeros(4))[0], x)
    out, _ = nn.affine_forward(np.zeros((5, 1024), np.float32), np.zeros((1024, 1), np.float32),
                               np.zeros(1, np.float32))
    assert out.shape == (5, 1)
    with pytest.raises(ValueError):
        nn.affine_forward(x, np.zeros((3, 1)), np.zeros(1))


def test_affine_gradient():
    rng = np.random.default_rng(8)
    arrays = {"x": rng.normal(size=(4, 6)), "w": rng.normal(size=(6, 2)), "b": rng.normal(size=2)}
    up = rng.normal(size=(4, 2))
    _, cache = nn.affine_forward(arrays["x"], arrays["w"], arrays["b"])
    dx, dw, db = nn.affine_backward(up, cache)
    err = fd_check(lambda a: float((nn.affine_forward(a["x"], a["w"], a["b"])[0] * up).sum()),
                   arrays, {"x": dx, "w": dw, "b": db}, eps=1e-5)
    assert err < 1e-6


# ------------------------------------------------------------- mean fuse

def test_mean_fuse_examples():
    x = np.array([[2.0, 4.0], [4.0, 8.0]])
    np.testing.assert_array_equal(nn.mean_fuse_forward(x)[0], [3, 6])
    np.testing.assert_array_equal(nn.mean_fuse_forward(x[:1])[0], x[0])
    with pytest.raises(ValueError):
        nn.mean_fuse_forward(np.zeros((0, 3)))


def test_mean_fuse_against_naive_oracle():
    x = np.random.default_rng(9).normal(size=(16, 1024)).astype(np.float32)
    ref = [sum(float(x[i, f]) for i in range(16)) / 16 for f in range(1024)]
    np.testing.assert_allclose(nn.mean_fuse_forward(x)[0], ref, atol=1e-6)
    g = nn.mean_fuse_backward(np.ones(1024, np.float32), 16)
    assert g.shape == (16, 1024) and np.all(g == np.float32(1 / 16))


def test_mean_fuse_commutes_with_affine():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(16, 64)).astype(np.float32)
    w, b = rng.normal(size=(64, 1)).astype(np.float32), np.float32([0.3])
    fused = nn.affine_forward(nn.mean_fuse_forward(x)[0], w, b)[0]
    per = nn.affine_forward(x, w, b)[0].mean()
    assert abs(float(fused[0]) - float(per)) <= 1e-6 * max(1.0, abs(float(per)))


# ------------------------------------------------------------------ loss

def test_l2_loss_examples():
    assert nn.l2_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))[0] == 0
    loss, d = nn.l2_loss(np.array([3.0]), np.array([1.0]))
    assert loss == 2.0 and d[0] == 2.0
    with pytest.raises(ValueError):
        nn.l2_loss(np.zeros(2), np.zeros(3))


def test_l2_loss_gradient():
    rng = np.random.default_rng(11)
    arrays = {"p": rng.normal(size=16)}
    t = rng.normal(size=16)
    err = fd_check(lambda a: nn.l2_loss(a["p"], t)[0], arrays, {"p": nn.l2_loss(arrays["p"], t)[1]})
    assert err < 1e-6


# ------------------------------------------------------------ init / sgd

def test_xavier_bounds_moments_determinism():
    w = nn.xavier_init((1000,), 3, np.random.default_rng(0))
    assert w.min() >= -1 and w.max() <= 1
    big = nn.xavier_init((1_000_000,), 100, np.random.default_rng(1), dtype=np.float64)
    assert abs(big.var() - 0.01) < 0.05 * 0.01
    np.testing.assert_array_equal(nn.xavier_init((5, 5), 7, np.random.default_rng(2)),
                                  nn.xavier_init((5, 5), 7, np.random.default_rng(2)))


def _param(w, g):
    p = nn.Param("w", np.array([w]))
    p.grad[:] = g
    return p


def test_sgd_examples():
    p = _param(0.0, 1.0)
    nn.sgd_step([p], 0.1, 0.0, 0.0)
    assert p.value[0] == pytest.approx(-0.1) and p.grad[0] == 0
    p = _param(0.0, 1.0)
    nn.sgd_step([p], 0.1, 0.9, 0.0)
    assert p.value[0] == pytest.approx(-0.1)
    p.grad[:] = 1.0
    nn.sgd_step([p], 0.1, 0.9, 0.0)
    assert p.value[0] == pytest.approx(-0.29)
    p = _param(1.0, 0.0)
    nn.sgd_step([p], 0.005, 0.0, 0.0005)
    assert p.value[0] == pytest.approx(1 - 0.005 * 0.0005, abs=1e-15)


def test_sgd_non_finite_names_parameter():
    p = nn.Param("conv3.weight", np.zeros(2))
    p.grad[1] = np.nan
    with pytest.raises(NumericalError, match="conv3.weight"):
        nn.sgd_step([p], 0.1, 0.9, 0.0)


def test_sgd_monotone_on_convex_problem():
    # loss = 0.5 * a * (w - 3)^2, lr below 2/a
    a, w = 4.0, nn.Param("w", np.array([0.0]))
    losses = []
    for _ in range(30):
        w.grad[:] = a * (w.value - 3.0)
        losses.append(0.5 * a * float((w.value[0] - 3.0) ** 2))
        nn.sgd_step([w], 0.2, 0.0, 0.0)
    assert all(b <= a_ for a_, b in zip(losses, losses[1:]))


def test_param_shapes_must_match():
    with pytest.raises(ValueError):
        nn.Param("x", np.zeros(3), grad=np.zeros(2))
    assert not nn.Param("x", np.ones(3)).momentum.any()


@pytest.mark.parametrize("it,expected", [(0, 0.005), (100_000, 0.0), (50_000, 0.0025)])
def test_lr_schedule(it, expected):
    assert nn.lr_schedule(it, 0.005, 100_000) == pytest.approx(expected, abs=1e-18)


def test_lr_schedule_out_of_range():
    with pytest.raises(ValueError):
        nn.lr_schedule(100_001, 0.005, 100_000)


# ------------------------------------------------------ gradient checker

def test_gradient_checker_flags_corrupted_backward():
    rng = np.random.default_rng(12)
    arrays = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 1)), "b": rng.normal(size=1)}
    up = rng.normal(size=(3, 1))
    _, cache = nn.affine_forward(arrays["x"], arrays["w"], arrays["b"])
    dx, dw, db = nn.affine_backward(up, cache)

    def f(a):
        return float((nn.affine_forward(a["x"], a["w"], a["b"])[0] * up).sum())

    err = fd_check(f, arrays, {"x": 2 * dx, "w": 2 * dw, "b": 2 * db})
    # |2g - g| / max(|2g|, |g|) = 0.5 with the max-magnitude denominator
    assert err == pytest.approx(0.5, abs=1e-6)


def test_gradient_checker_samples_coordinates():
    arrays = {"x": np.linspace(-1, 1, 1000)}
    err, per = nn.gradient_check(lambda a: float((a["x"] ** 2).sum()), arrays, {"x": 2 * arrays["x"]},
                                 max_coords=10, rng=np.random.default_rng(0))
    assert err < 1e-6 and set(per) == {"x"}
