import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ospg import gradcheck
from ospg import numerics as nx
from ospg.numerics import Adam, ParamGroup, Tensor


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                c[i, j] += a[i, t] * b[t, j]
    return c


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_hand_oracle():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    out = nx.matmul(Tensor(a), Tensor(b)).data
    assert np.array_equal(out, triple_loop(a, b))
    assert np.array_equal(out, [[19, 22], [43, 50]])


def test_matmul_zero(rng):
    out = nx.matmul(Tensor(np.zeros((2, 3))), Tensor(rng.standard_normal((3, 4))))
    assert out.shape == (2, 4) and not out.data.any()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_matmul_matches_triple_loop(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((m, k)), r.standard_normal((k, n))
    out = nx.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    assert out.shape == (m, n)
    np.testing.assert_allclose(out.data, triple_loop(a, b), atol=1e-12)


# -- softmax --------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax(Tensor(np.zeros(4))).data, 0.25)


def test_softmax_closed_form():
    out = nx.softmax(Tensor(np.log([1.0, 2.0, 3.0]), dtype=np.float64)).data
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalization(xs, c):
    x = np.array(xs)
    a = nx.softmax(Tensor(x, dtype=np.float64)).data
    b = nx.softmax(Tensor(x + c, dtype=np.float64)).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert np.all(a > 0) and abs(a.sum() - 1) < 1e-6


def test_softmax_large_inputs_stable():
    out = nx.softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and np.allclose(out, 0.5)


# -- layer norm -----------------------------------------------------------------

def test_layer_norm_constant_vector_is_zero():
    out = nx.layer_norm(Tensor(np.full(5, 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.allclose(out.data, 0)


def test_layer_norm_two_values():
    out = nx.layer_norm(Tensor([1.0, 3.0], dtype=np.float64), Tensor(np.ones(2), dtype=np.float64),
                        Tensor(np.zeros(2), dtype=np.float64), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1, 1], atol=1e-6)


def test_layer_norm_beta_sets_mean(rng):
    x = Tensor(rng.standard_normal((3, 6)))
    out = nx.layer_norm(x, Tensor(np.ones(6)), Tensor(np.full(6, 2.5)))
    np.testing.assert_allclose(out.data.mean(axis=-1), 2.5, atol=1e-5)


@given(st.integers(2, 8), st.integers(0, 2**31))
def test_layer_norm_moments(d, seed):
    x = np.random.default_rng(seed).standard_normal((3, d)) * 5 + 2
    out = nx.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(d), dtype=np.float64),
                        Tensor(np.zeros(d), dtype=np.float64), eps=1e-12).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-5)


# -- conv2d ---------------------------------------------------------------------

def test_conv2d_identity_kernel_strided_copy(rng):
    x = rng.standard_normal((1, 4, 4)).astype(np.float32)
    out = nx.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=(2, 1))
    assert out.shape == (1, 2, 4)
    assert np.array_equal(out.data, x[:, ::2, :])


def test_conv2d_hand_sum():
    out = nx.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data.tolist() == [[[9.0]]]


def test_conv2d_stride_halves_time():
    out = nx.conv2d(Tensor(np.zeros((1, 16, 5))), Tensor(np.zeros((2, 1, 3, 3))), stride=(2, 1), padding=(1, 1))
    assert out.shape == (2, 8, 5)


def test_conv2d_is_cross_correlation():
    x = np.arange(9.0).reshape(1, 3, 3)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 0, 0] = 1.0  # picks the top-left input under correlation
    assert nx.conv2d(Tensor(x), Tensor(k)).data.item() == 0.0


def test_conv2d_kernel_too_large():
    with pytest.raises(nx.ShapeError):
        nx.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 3), st.integers(0, 1), st.integers(0, 1))
def test_conv2d_shape_law(h, w, kh, kw, sh, sw, ph, pw):
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    x, k = Tensor(np.zeros((2, h, w))), Tensor(np.zeros((3, 2, kh, kw)))
    if ho < 1 or wo < 1:
        with pytest.raises(nx.ShapeError):
            nx.conv2d(x, k, stride=(sh, sw), padding=(ph, pw))
    else:
        assert nx.conv2d(x, k, stride=(sh, sw), padding=(ph, pw)).shape == (3, ho, wo)


# -- cross entropy --------------------------------------------------------------

def test_ce_confident_target_near_zero():
    logits = np.zeros((1, 5))
    logits[0, 3] = 60.0
    assert nx.cross_entropy(Tensor(logits), [3]).item() < 1e-12


def test_ce_uniform_is_log_v():
    assert abs(nx.cross_entropy(Tensor(np.zeros((4, 16))), [0, 5, 9, 15]).item() - math.log(16)) < 1e-6


def test_ce_mask_reduces_to_single_position(rng):
    logits = Tensor(rng.standard_normal((3, 7)), dtype=np.float64)
    t = [1, 4, 6]
    masked = nx.cross_entropy(logits, t, np.array([False, True, False])).item()
    single = nx.cross_entropy(Tensor(logits.data[1:2], dtype=np.float64), [4]).item()
    assert masked == pytest.approx(single, abs=1e-12)


def test_ce_empty_mask_rejected():
    with pytest.raises(ValueError):
        nx.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], np.zeros(2, bool))


# -- Adam -----------------------------------------------------------------------

def _group(value, trainable=True, name="g"):
    t = Tensor(np.array(value, dtype=np.float32), requires_grad=trainable)
    return ParamGroup(name, {"w": t}, trainable)


def test_adam_zero_gradient_leaves_params():
    g = _group([1.0, -2.0])
    g.tensors["w"].grad = np.zeros(2, np.float32)
    before = g.snapshot()["w"]
    Adam(lr=0.1).step([g])
    assert np.array_equal(g.tensors["w"].data, before)


def test_adam_first_step_moves_by_lr():
    g = _group([0.5])
    g.tensors["w"].grad = np.ones(1, np.float32)
    Adam(lr=1e-3).step([g])
    assert g.tensors["w"].data[0] == pytest.approx(0.5 - 1e-3, abs=1e-7)


def test_adam_frozen_group_untouched_for_100_steps(rng):
    live, frozen = _group([1.0, 2.0], name="live"), _group([3.0, 4.0], trainable=False, name="frozen")
    before = frozen.snapshot()["w"].copy()
    opt = Adam(lr=0.5)
    for _ in range(100):
        live.tensors["w"].grad = rng.standard_normal(2).astype(np.float32)
        frozen.tensors["w"].grad = rng.standard_normal(2).astype(np.float32)
        opt.step([live, frozen])
    assert np.array_equal(frozen.tensors["w"].data, before)
    assert not np.array_equal(live.tensors["w"].data, [1.0, 2.0])


def test_adam_missing_gradient_is_error():
    with pytest.raises(RuntimeError, match="missing gradient"):
        Adam().step([_group([1.0])])


def test_adam_group_scale_multiplies_step():
    a, b = _group([0.0], name="a"), _group([0.0], name="b")
    for g in (a, b):
        g.tensors["w"].grad = np.ones(1, np.float32)
    Adam(lr=1e-3).step([a, b], scales={"b": 3.0})
    assert b.tensors["w"].data[0] == pytest.approx(3 * a.tensors["w"].data[0], rel=1e-5)


# -- finite differences ---------------------------------------------------------

def test_fd_quadratic(rng):
    x = Tensor(rng.standard_normal(6), dtype=np.float64)
    rep = nx.finite_diff_check(lambda: nx.tsum(x * x), x, h=1e-3)
    assert rep.max_rel_err < 1e-6
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_fd_linear_exact(rng):
    x = Tensor(rng.standard_normal(5), dtype=np.float64)
    w = Tensor(rng.standard_normal(5), dtype=np.float64)
    assert nx.finite_diff_check(lambda: nx.tsum(x * w), x).max_rel_err < 1e-9


def test_fd_report_flags_wrong_gradient(rng):
    x = Tensor(rng.standard_normal(3), dtype=np.float64)

    def f():
        # value x^2 but gradient of x only: the oracle must catch it
        return nx.tsum(x * Tensor(x.data.copy(), dtype=np.float64))

    rep = nx.finite_diff_check(f, x)
    assert rep.max_rel_err > 0.1 and rep.worst_tensor == 0


def test_fd_conv_softmax_ce_composite(rng):
    x = Tensor(rng.standard_normal((1, 6, 6)), dtype=np.float64)
    k = Tensor(rng.standard_normal((4, 1, 3, 3)) * 0.5, dtype=np.float64)
    targets = rng.integers(0, 4, 16)

    def f():
        y = nx.conv2d(x, k)  # [4, 4, 4]
        logits = nx.reshape(nx.transpose(y, (1, 2, 0)), (16, 4))
        probs = nx.softmax(logits)
        return nx.cross_entropy(probs * 3.0, targets)

    assert nx.finite_diff_check(f, [x, k]).max_rel_err < 1e-4


def test_gradient_suite_all_primitives():
    reports = gradcheck.run_suite(seed=0)
    for name in ("matmul_batched", "conv2d_strided", "softmax", "layer_norm", "cross_entropy_masked",
                 "gather_rows", "attention_causal", "encode_adapt_forward_ce"):
        assert name in reports
    bad = {k: r.max_rel_err for k, r in reports.items() if not r.ok(1e-4)}
    assert not bad


# -- determinism ----------------------------------------------------------------

def test_forward_and_gradients_deterministic():
    def run():
        f, ps = gradcheck.composed_case(3)
        out = f()
        out.backward()
        return out.data.copy(), [p.grad.copy() for p in ps if p.grad is not None]

    (a, ga), (b, gb) = run(), run()
    assert np.array_equal(a, b)
    assert all(np.array_equal(x, y) for x, y in zip(ga, gb))


def test_float32_default_dtype():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(3).dtype == np.float32
    a = Tensor(np.ones((2, 2), np.float32))
    assert nx.matmul(a, a).dtype == np.float32
