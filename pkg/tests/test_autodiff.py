import numpy as np
import pytest

from coda import autodiff as ad
from gradcheck import finite_diff, max_rel_err

GRAD_TOL = 1e-3


def setup_function(_):
    ad.fresh_tape()


def leaf(data):
    return ad.Tensor(np.asarray(data, dtype=ad.DTYPE), requires_grad=True)


# ---------------------------------------------------------------- trivial ops


def test_relu_values():
    out = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_of_constant_vector_is_uniform():
    for k in (2, 5, 9):
        out = ad.softmax(ad.Tensor(np.full(k, 0.7)), axis=-1)
        assert np.allclose(out.data, 1.0 / k, atol=1e-7)


def test_conv2d_identity_kernel_returns_image():
    rng = np.random.default_rng(0)
    img = ad.Tensor(rng.random((1, 1, 8, 8)))
    kern = np.zeros((1, 1, 3, 3), dtype=np.float32)
    kern[0, 0, 1, 1] = 1.0
    out = ad.conv2d(img, ad.Tensor(kern), stride=1, pad=1)
    assert np.array_equal(out.data, img.data)


def test_softmax_rows_sum_to_one_and_log_softmax_consistent():
    rng = np.random.default_rng(3)
    x = ad.Tensor(rng.normal(size=(6, 7)) * 3)
    s = ad.softmax(x, axis=-1)
    ls = ad.log_softmax(x, axis=-1)
    assert np.all(np.abs(s.data.sum(axis=-1) - 1.0) < 1e-6)
    assert np.max(np.abs(ls.data - np.log(s.data))) < 1e-5


def test_shape_mismatch_errors_name_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"add.*\(3,\).*\(4,\)"):
        ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(ad.Tensor(np.zeros((1, 3, 8, 8))), ad.Tensor(np.zeros((4, 2, 3, 3))))


# ---------------------------------------------------------------- backward


def test_backward_of_sum_gives_ones():
    x = leaf(np.random.default_rng(1).random((3, 4)))
    ad.backward(ad.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4), dtype=ad.DTYPE))


def test_backward_mean_of_square():
    x = leaf([1.0, 2.0])
    ad.backward(ad.tmean(ad.mul(x, x)))
    assert np.allclose(x.grad, [1.0, 2.0], atol=1e-6)


def test_backward_requires_scalar_loss():
    x = leaf([1.0, 2.0])
    with pytest.raises(ad.TapeError, match="scalar"):
        ad.backward(ad.mul(x, x))


def test_repeated_backward_accumulates_until_zero_grad():
    x = leaf([2.0, 3.0])
    loss = ad.tsum(x)
    ad.backward(loss)
    ad.backward(loss)
    assert np.array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    ad.backward(loss)
    assert np.array_equal(x.grad, [1.0, 1.0])


def test_no_grad_leaves_no_tape_nodes():
    tape = ad.fresh_tape()
    x = leaf(np.ones(4))
    with ad.no_grad():
        y = ad.mul(ad.relu(x), 2.0)
    assert y.node is None
    assert len(tape.nodes) == 0


def test_forward_backward_deterministic_across_runs():
    def run():
        ad.fresh_tape()
        rng = np.random.default_rng(42)
        x = leaf(rng.normal(size=(2, 3, 8, 8)))
        w = leaf(rng.normal(size=(4, 3, 3, 3)) * 0.1)
        out = ad.gelu(ad.conv2d(x, w, stride=1, pad=1))
        loss = ad.tmean(ad.mul(out, out))
        ad.backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


# ------------------------------------------------------- finite differences

# Every differentiable op, checked against the central-difference oracle on
# small random inputs across 20 seeds (float64 so h=1e-3 is meaningful).


def _check(build, arrays, seed):
    """build() -> (loss Tensor, [leaf tensors]); compares grads to the oracle."""
    ad.fresh_tape()
    loss, leaves = build()
    ad.backward(loss)
    num = finite_diff(lambda: build()[0].data, arrays)
    for t, n in zip(leaves, num):
        err = max_rel_err(t.grad, n)
        assert err <= GRAD_TOL, f"seed {seed}: rel err {err:.2e}"


def _proj(out, r):
    return ad.tsum(ad.mul(out, ad.Tensor(r)))


OPS = {}


def op_case(name):
    def deco(fn):
        OPS[name] = fn
        return fn

    return deco


@op_case("add")
def _case_add(rng):
    a, b = rng.normal(size=10), rng.normal(size=10)
    r = rng.normal(size=10)

    def build():
        ta, tb = leaf(a), leaf(b)
        return _proj(ad.add(ta, tb), r), [ta, tb]

    return build, [a, b]


@op_case("add_broadcast")
def _case_add_broadcast(rng):
    a, b = rng.normal(size=(2, 5)), rng.normal(size=(5,))
    r = rng.normal(size=(2, 5))

    def build():
        ta, tb = leaf(a), leaf(b)
        return _proj(ad.add(ta, tb), r), [ta, tb]

    return build, [a, b]


@op_case("sub")
def _case_sub(rng):
    a, b = rng.normal(size=10), rng.normal(size=10)
    r = rng.normal(size=10)

    def build():
        ta, tb = leaf(a), leaf(b)
        return _proj(ad.sub(ta, tb), r), [ta, tb]

    return build, [a, b]


@op_case("mul")
def _case_mul(rng):
    a, b = rng.normal(size=10), rng.normal(size=10)
    r = rng.normal(size=10)

    def build():
        ta, tb = leaf(a), leaf(b)
        return _proj(ad.mul(ta, tb), r), [ta, tb]

    return build, [a, b]


@op_case("matmul")
def _case_matmul(rng):
    a, b = rng.normal(size=(2, 5)), rng.normal(size=(5, 3))
    r = rng.normal(size=(2, 3))

    def build():
        ta, tb = leaf(a), leaf(b)
        return _proj(ad.matmul(ta, tb), r), [ta, tb]

    return build, [a, b]


@op_case("matmul_batched")
def _case_matmul_batched(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 3))
    r = rng.normal(size=(2, 3, 3))

    def build():
        ta, tb = leaf(a), leaf(b)
        return _proj(ad.matmul(ta, tb), r), [ta, tb]

    return build, [a, b]


@op_case("conv2d")
def _case_conv2d(rng):
    x, w = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    r = rng.normal(size=(1, 3, 4, 4))

    def build():
        tx, tw = leaf(x), leaf(w)
        return _proj(ad.conv2d(tx, tw, stride=1, pad=1), r), [tx, tw]

    return build, [x, w]


@op_case("conv2d_strided")
def _case_conv2d_strided(rng):
    x, w = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3))
    r = rng.normal(size=(2, 2, 2, 2))

    def build():
        tx, tw = leaf(x), leaf(w)
        return _proj(ad.conv2d(tx, tw, stride=2, pad=0), r), [tx, tw]

    return build, [x, w]


@op_case("relu")
def _case_relu(rng):
    x = rng.normal(size=10)
    x[np.abs(x) < 0.05] = 0.5  # stay away from the kink
    r = rng.normal(size=10)

    def build():
        tx = leaf(x)
        return _proj(ad.relu(tx), r), [tx]

    return build, [x]


@op_case("gelu")
def _case_gelu(rng):
    x = rng.normal(size=10)
    r = rng.normal(size=10)

    def build():
        tx = leaf(x)
        return _proj(ad.gelu(tx), r), [tx]

    return build, [x]


@op_case("clamp01")
def _case_clamp01(rng):
    x = rng.uniform(0.05, 0.95, size=10)  # interior; boundary is a kink
    r = rng.normal(size=10)

    def build():
        tx = leaf(x)
        return _proj(ad.clamp01(tx), r), [tx]

    return build, [x]


@op_case("softmax")
def _case_softmax(rng):
    x = rng.normal(size=(2, 5))
    r = rng.normal(size=(2, 5))

    def build():
        tx = leaf(x)
        return _proj(ad.softmax(tx, axis=-1), r), [tx]

    return build, [x]


@op_case("log_softmax")
def _case_log_softmax(rng):
    x = rng.normal(size=(2, 5))
    r = rng.normal(size=(2, 5))

    def build():
        tx = leaf(x)
        return _proj(ad.log_softmax(tx, axis=-1), r), [tx]

    return build, [x]


@op_case("layer_norm")
def _case_layer_norm(rng):
    x = rng.normal(size=(2, 6))
    gain = rng.normal(size=6) + 1.0
    shift = rng.normal(size=6)
    r = rng.normal(size=(2, 6))

    def build():
        tx, tg, ts = leaf(x), leaf(gain), leaf(shift)
        return _proj(ad.layer_norm(tx, tg, ts, axis=-1), r), [tx, tg, ts]

    return build, [x, gain, shift]


@op_case("mean")
def _case_mean(rng):
    x = rng.normal(size=(2, 5))

    def build():
        tx = leaf(x)
        return ad.tmean(tx), [tx]

    return build, [x]


@op_case("mean_axis")
def _case_mean_axis(rng):
    x = rng.normal(size=(2, 5))
    r = rng.normal(size=5)

    def build():
        tx = leaf(x)
        return _proj(ad.tmean(tx, axis=0), r), [tx]

    return build, [x]


@op_case("sum_axis")
def _case_sum_axis(rng):
    x = rng.normal(size=(2, 5))
    r = rng.normal(size=(2,))

    def build():
        tx = leaf(x)
        return _proj(ad.tsum(tx, axis=1), r), [tx]

    return build, [x]


@op_case("upsample_nearest")
def _case_upsample(rng):
    x = rng.normal(size=(1, 2, 2, 2))
    r = rng.normal(size=(1, 2, 4, 4))

    def build():
        tx = leaf(x)
        return _proj(ad.upsample_nearest(tx, 2), r), [tx]

    return build, [x]


@op_case("downsample_avg")
def _case_downsample(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    r = rng.normal(size=(1, 2, 2, 2))

    def build():
        tx = leaf(x)
        return _proj(ad.downsample_avg(tx, 2), r), [tx]

    return build, [x]


@op_case("concat")
def _case_concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    r = rng.normal(size=(2, 5))

    def build():
        ta, tb = leaf(a), leaf(b)
        return _proj(ad.concat([ta, tb], axis=1), r), [ta, tb]

    return build, [a, b]


@op_case("slice")
def _case_slice(rng):
    x = rng.normal(size=(4, 4))
    r = rng.normal(size=(2, 3))

    def build():
        tx = leaf(x)
        return _proj(ad.slice_(tx, (slice(1, 3), slice(0, 3))), r), [tx]

    return build, [x]


@op_case("embed")
def _case_embed(rng):
    x = rng.normal(size=(2, 3))
    r = rng.normal(size=(4, 5))

    def build():
        tx = leaf(x)
        return _proj(ad.embed(tx, (4, 5), (1, 2)), r), [tx]

    return build, [x]


@op_case("transpose")
def _case_transpose(rng):
    x = rng.normal(size=(3, 4))
    r = rng.normal(size=(4, 3))

    def build():
        tx = leaf(x)
        return _proj(ad.transpose(tx, 0, 1), r), [tx]

    return build, [x]


@op_case("reshape")
def _case_reshape(rng):
    x = rng.normal(size=(2, 6))
    r = rng.normal(size=(3, 4))

    def build():
        tx = leaf(x)
        return _proj(ad.reshape(tx, (3, 4)), r), [tx]

    return build, [x]


@op_case("scaled_dot_attention")
def _case_attention(rng):
    q, k, v = (rng.normal(size=(1, 3, 4)) for _ in range(3))
    r = rng.normal(size=(1, 3, 4))

    def build():
        tq, tk, tv = leaf(q), leaf(k), leaf(v)
        return _proj(ad.scaled_dot_attention(tq, tk, tv), r), [tq, tk, tv]

    return build, [q, k, v]


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    with ad.compute_dtype(np.float64):
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            build, arrays = OPS[name](rng)
            _check(build, arrays, seed)


def test_clamp01_passes_zero_gradient_outside_range():
    x = leaf([-0.5, 0.0, 0.5, 1.0, 1.5])
    ad.backward(ad.tsum(ad.clamp01(x)))
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])
