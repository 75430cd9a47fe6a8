import numpy as np
import pytest

import pcgk.tensor as T


def scalar(v):
    return float(v.data)


# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(T.const(np.eye(2)), T.const(a))
    assert np.array_equal(out.data, a)


def test_softmax_uniform_logits():
    out = T.softmax_over_axis(T.const(np.zeros(4)), axis=0)
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_layer_norm_hand_value():
    # (x - mu) / sqrt(var + eps) with mu = 2, var = 2/3
    x = T.const(np.array([1.0, 2.0, 3.0]))
    out = T.layer_norm(x, T.const(np.ones(3)), T.const(np.zeros(3)), eps=1e-5)
    expected = (np.array([1.0, 2.0, 3.0]) - 2.0) / np.sqrt(2.0 / 3.0 + 1e-5)
    assert np.allclose(out.data, expected, atol=1e-12)
    assert abs(out.data[0] + 1.2247) < 1e-3


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = T.const(rng.normal(size=(5, 7)) * 3)
    y = T.softmax_over_axis(x, axis=1)
    assert np.all(y.data >= 0)
    assert np.allclose(y.data.sum(axis=1), 1.0, atol=1e-12)


def test_reshape_transpose_roundtrip():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 4, 5))
    v = T.const(x)
    back = T.transpose(T.transpose(v, (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(back.data, x)
    again = T.reshape(T.reshape(v, (12, 5)), (3, 4, 5))
    assert np.array_equal(again.data, x)


def test_shape_errors_are_descriptive():
    a = T.const(np.zeros((2, 3)))
    b = T.const(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="add.*shape"):
        T.add(a, b)
    with pytest.raises(ValueError, match="matmul"):
        T.matmul(T.const(np.zeros((2, 3))), T.const(np.zeros((2, 3))))
    with pytest.raises(ValueError, match="zero-extent"):
        T.Value(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# backward examples
# ---------------------------------------------------------------------------

def test_backward_sum_of_squares():
    x = T.param(np.array([1.0, 2.0, 3.0]))
    T.sum_(T.mul_elem(x, x)).backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_identity_matmul_chain():
    x = T.param(np.array([[1.0], [2.0], [3.0]]))
    y = T.matmul(T.const(np.eye(3)), x)
    T.sum_(y).backward()
    assert np.array_equal(x.grad, np.ones((3, 1)))


def test_backward_requires_scalar_root():
    x = T.param(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        (x + x).backward()


def test_backward_twice_doubles_grads():
    x = T.param(np.array([3.0]))
    loss = T.sum_(T.square(x))
    loss.backward()
    g1 = x.grad.copy()
    loss.backward()
    assert np.array_equal(x.grad, 2 * g1)


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    store = T.ParamStore(7)
    dims = [4, 6, 5, 1]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        store.add(f"w{i}", rng.normal(size=(a, b)) * 0.5)
        store.add(f"b{i}", rng.normal(size=(b,)) * 0.1)
    x0 = rng.normal(size=(2, 4))

    def loss():
        h = T.const(x0)
        for i in range(3):
            h = T.matmul(h, store[f"w{i}"])
            h = T.add(h, T.broadcast_row(store[f"b{i}"], h.data.shape[0]))
            if i < 2:
                h = T.gelu(h)
        return T.sum_(T.square(h))

    assert T.grad_check(loss, store, h=1e-6) < 1e-6


# ---------------------------------------------------------------------------
# per-primitive gradient sweep (central differences, 20 seeds each)
# ---------------------------------------------------------------------------

def _weighted_sum(v, rng):
    w = T.const(rng.normal(size=v.data.shape))
    return T.sum_(T.mul_elem(v, w))


def _case_matmul(store, rng):
    n, k, m = rng.integers(1, 5, size=3)
    store.add("a", rng.normal(size=(n, k)))
    store.add("b", rng.normal(size=(k, m)))
    return lambda: _weighted_sum(T.matmul(store["a"], store["b"]), np.random.default_rng(0))


def _case_binary(op):
    def make(store, rng):
        shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
        store.add("a", rng.normal(size=shape))
        store.add("b", rng.normal(size=shape))
        return lambda: _weighted_sum(op(store["a"], store["b"]), np.random.default_rng(0))
    return make


def _case_unary(op, positive=False, away_from_zero=False):
    def make(store, rng):
        shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
        data = rng.normal(size=shape)
        if positive:
            data = np.abs(data) + 0.5
        if away_from_zero:
            data = np.sign(data) * (np.abs(data) + 0.1)
        store.add("a", data)
        return lambda: _weighted_sum(op(store["a"]), np.random.default_rng(0))
    return make


def _case_scalar_mul(store, rng):
    store.add("a", rng.normal(size=(3, 2)))
    c = float(rng.normal())
    return lambda: _weighted_sum(T.scalar_mul(store["a"], c), np.random.default_rng(0))


def _case_reduction(op):
    def make(store, rng):
        shape = tuple(rng.integers(2, 5, size=2))
        store.add("a", rng.normal(size=shape))
        axis = int(rng.integers(0, 3)) - 1  # -1 means full reduction
        if axis < 0:
            return lambda: op(store["a"])
        return lambda: _weighted_sum(op(store["a"], axis=axis), np.random.default_rng(0))
    return make


def _case_max(store, rng):
    shape = tuple(rng.integers(2, 5, size=2))
    # keep maxima isolated so central differences stay valid
    data = rng.permutation(shape[0] * shape[1]).reshape(shape) * 0.37 + rng.normal() * 0.01
    store.add("a", data)
    axis = int(rng.integers(0, 2))
    return lambda: _weighted_sum(T.max_over_axis(store["a"], axis=axis), np.random.default_rng(0))


def _case_softmax(store, rng):
    shape = tuple(rng.integers(2, 5, size=2))
    store.add("a", rng.normal(size=shape) * 2)
    axis = int(rng.integers(0, 2))
    return lambda: _weighted_sum(T.softmax_over_axis(store["a"], axis=axis), np.random.default_rng(0))


def _case_layer_norm(store, rng):
    n, d = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    store.add("x", rng.normal(size=(n, d)) * 1.5)
    store.add("g", rng.normal(size=(d,)) + 1.0)
    store.add("b", rng.normal(size=(d,)) * 0.2)
    return lambda: _weighted_sum(T.layer_norm(store["x"], store["g"], store["b"]),
                                 np.random.default_rng(0))


def _case_concat(store, rng):
    d = int(rng.integers(1, 4))
    store.add("a", rng.normal(size=(int(rng.integers(1, 4)), d)))
    store.add("b", rng.normal(size=(int(rng.integers(1, 4)), d)))
    return lambda: _weighted_sum(T.concat([store["a"], store["b"]], axis=0),
                                 np.random.default_rng(0))


def _case_reshape(store, rng):
    store.add("a", rng.normal(size=(2, 6)))
    return lambda: _weighted_sum(T.reshape(store["a"], (3, 4)), np.random.default_rng(0))


def _case_transpose(store, rng):
    store.add("a", rng.normal(size=(2, 3, 4)))
    return lambda: _weighted_sum(T.transpose(store["a"], (2, 0, 1)), np.random.default_rng(0))


def _case_slice(store, rng):
    store.add("a", rng.normal(size=(5, 4)))
    axis = int(rng.integers(0, 2))
    n = (5, 4)[axis]
    start = int(rng.integers(0, n - 1))
    stop = int(rng.integers(start + 1, n + 1))
    return lambda: _weighted_sum(T.slice_axis(store["a"], axis, start, stop),
                                 np.random.default_rng(0))


def _case_conv2d(store, rng):
    c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h = int(rng.integers(4, 7))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    store.add("x", rng.normal(size=(c, h, h)))
    store.add("k", rng.normal(size=(o, c, k, k)))
    return lambda: _weighted_sum(T.conv2d(store["x"], store["k"], stride=stride, padding=padding),
                                 np.random.default_rng(0))


def _case_conv2d_transpose(store, rng):
    c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h = int(rng.integers(4, 7))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    ho = (h + 2 * padding - k) // stride + 1
    if ho < 1:
        k, stride, padding = 1, 1, 0
        ho = h
    store.add("y", rng.normal(size=(o, ho, ho)))
    store.add("k", rng.normal(size=(o, c, k, k)))
    return lambda: _weighted_sum(
        T.conv2d_transpose(store["y"], store["k"], out_hw=(h, h), stride=stride, padding=padding),
        np.random.default_rng(0))


def _case_dft2(store, rng):
    h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    store.add("x", rng.normal(size=(h, w)))
    bases = T.dft2_matrices(h, w)

    def loss():
        re, im = T.dft2(store["x"], bases)
        r0 = np.random.default_rng(0)
        return T.add(_weighted_sum(re, r0), _weighted_sum(im, r0))
    return loss


GRAD_CASES = {
    "matmul": _case_matmul,
    "add": _case_binary(T.add),
    "sub": _case_binary(T.sub),
    "mul_elem": _case_binary(T.mul_elem),
    "scalar_mul": _case_scalar_mul,
    "relu": _case_unary(T.relu, away_from_zero=True),
    "gelu": _case_unary(T.gelu),
    "sigmoid": _case_unary(T.sigmoid),
    "exp": _case_unary(T.exp),
    "log": _case_unary(T.log, positive=True),
    "sum": _case_reduction(T.sum_),
    "mean": _case_reduction(T.mean),
    "max_over_axis": _case_max,
    "softmax_over_axis": _case_softmax,
    "layer_norm": _case_layer_norm,
    "concat": _case_concat,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "slice": _case_slice,
    "conv2d": _case_conv2d,
    "conv2d_transpose": _case_conv2d_transpose,
    "abs": _case_unary(T.abs_, away_from_zero=True),
    "square": _case_unary(T.square),
    "sqrt": _case_unary(T.sqrt, positive=True),
    "dft2": _case_dft2,
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradients(name):
    for seed in range(20):
        store = T.ParamStore(seed)
        loss = GRAD_CASES[name](store, np.random.default_rng(1000 + seed))
        err = T.grad_check(loss, store, h=1e-6, max_coords=6, seed=seed)
        assert err < 1e-6, f"{name} seed {seed}: rel err {err:.3e}"


def test_primitive_registry_covers_spec_ops():
    for name in GRAD_CASES:
        assert name in T.PRIMITIVES


def test_apply_primitive_dispatch():
    out = T.apply_primitive("add", [T.const(np.ones(2)), T.const(np.ones(2))])
    assert np.array_equal(out.data, [2.0, 2.0])
    with pytest.raises(ValueError, match="unknown primitive"):
        T.apply_primitive("fused_everything", [])


# ---------------------------------------------------------------------------
# conv adjointness
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_transpose_is_adjoint(stride, padding):
    rng = np.random.default_rng(11)
    for _ in range(5):
        c, o, h, k = 2, 3, 6, 3
        x = rng.normal(size=(c, h, h))
        kern = rng.normal(size=(o, c, k, k))
        ho = (h + 2 * padding - k) // stride + 1
        y = rng.normal(size=(o, ho, ho))
        fx = T.conv2d(T.const(x), T.const(kern), stride=stride, padding=padding).data
        gy = T.conv2d_transpose(T.const(y), T.const(kern), out_hw=(h, h),
                                stride=stride, padding=padding).data
        lhs = float(np.sum(fx * y))
        rhs = float(np.sum(x * gy))
        assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


# ---------------------------------------------------------------------------
# DFT by matmul
# ---------------------------------------------------------------------------

def naive_dft2(x):
    """Double-sum O(n^2)-per-output reference DFT."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0.0 + 0.0j
            for m in range(h):
                for n in range(w):
                    acc += x[m, n] * np.exp(-2j * np.pi * (u * m / h + v * n / w))
            out[u, v] = acc
    return out


def test_dft2_constant_image_is_dc_only():
    c = 0.7
    img = T.const(np.full((4, 4), c))
    re, im = T.dft2(img, T.dft2_matrices(4, 4))
    assert abs(re.data[0, 0] - 16 * c) < 1e-12
    mag = np.sqrt(re.data ** 2 + im.data ** 2)
    mag[0, 0] = 0.0
    assert np.all(mag < 1e-12)


def test_dft2_delta_image():
    img = np.zeros((4, 4))
    img[0, 0] = 1.0
    re, im = T.dft2(T.const(img), T.dft2_matrices(4, 4))
    assert np.allclose(re.data, 1.0, atol=1e-12)
    assert np.allclose(im.data, 0.0, atol=1e-12)


def test_dft2_matches_naive_8x8():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 8))
    re, im = T.dft2(T.const(x), T.dft2_matrices(8, 8))
    ref = naive_dft2(x)
    assert np.max(np.abs(re.data - ref.real)) < 1e-10
    assert np.max(np.abs(im.data - ref.imag)) < 1e-10


def test_dft2_matches_naive_16x16():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(16, 16))
    re, im = T.dft2(T.const(x), T.dft2_matrices(16, 16))
    ref = naive_dft2(x)
    err = max(np.max(np.abs(re.data - ref.real)), np.max(np.abs(im.data - ref.imag)))
    assert err < 1e-9


def test_dft2_parseval():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(8, 8))
    re, im = T.dft2(T.const(x), T.dft2_matrices(8, 8))
    lhs = np.sum(re.data ** 2 + im.data ** 2)
    rhs = x.size * np.sum(x ** 2)
    assert abs(lhs - rhs) / rhs < 1e-8


def test_dft2_matrices_validation():
    with pytest.raises(ValueError):
        T.dft2_matrices(0, 4)


# ---------------------------------------------------------------------------
# grad_check harness
# ---------------------------------------------------------------------------

def test_grad_check_sum_of_squares_tight():
    rng = np.random.default_rng(9)
    store = T.ParamStore(9)
    store.add("theta", rng.normal(size=(5,)))
    err = T.grad_check(lambda: T.sum_(T.square(store["theta"])), store, h=1e-6)
    assert err < 1e-9


def test_grad_check_rejects_nonfinite_loss():
    store = T.ParamStore(0)
    store.add("x", np.array([-1.0]))
    with np.errstate(invalid="ignore"):
        with pytest.raises(ValueError, match="non-finite"):
            T.grad_check(lambda: T.log(store["x"]), store)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def test_logsumexp_stable():
    v = T.const(np.array([1000.0, 1000.0]))
    out = T.logsumexp(v)
    assert abs(float(out.data) - (1000.0 + np.log(2.0))) < 1e-9


def test_reciprocal():
    x = T.param(np.array([2.0, 4.0]))
    y = T.reciprocal(x)
    assert np.allclose(y.data, [0.5, 0.25], atol=1e-12)
    T.sum_(y).backward()
    assert np.allclose(x.grad, [-0.25, -1.0 / 16.0], atol=1e-12)


def test_mean_pool2():
    img = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = T.mean_pool2(T.const(np.kron(img, np.ones((2, 2)))))
    assert np.array_equal(out.data, img)
    with pytest.raises(ValueError):
        T.mean_pool2(T.const(np.zeros((3, 4))))


# ---------------------------------------------------------------------------
# ParamStore and the checkpoint blob
# ---------------------------------------------------------------------------

def test_param_store_names_unique_and_sorted():
    store = T.ParamStore(1)
    store.add("b.w", np.zeros(2))
    store.add("a.w", np.zeros(2))
    with pytest.raises(ValueError, match="duplicate"):
        store.add("a.w", np.zeros(2))
    assert store.names() == ["a.w", "b.w"]
    assert all(v.requires_grad for v in store.values())


def test_param_blob_bit_exact_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    store = T.ParamStore(13)
    store.add("enc.w", rng.normal(size=(3, 4)))
    store.add("enc.b", rng.normal(size=(4,)))
    store.add("dec.scalar", np.array(rng.normal()))
    p1 = tmp_path / "a.pcgk"
    p2 = tmp_path / "b.pcgk"
    T.save_params(store, p1)
    loaded = T.load_params(p1)
    T.save_params(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for name, v in store.items():
        assert np.array_equal(v.data, loaded[name].data)
    assert p1.read_bytes()[:4] == b"PCGK"


def test_param_blob_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.pcgk"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        T.load_params(p)


def test_zero_grad_resets_accumulation():
    store = T.ParamStore(0)
    x = store.add("x", np.array([1.0, 2.0]))
    T.sum_(T.square(x)).backward()
    store.zero_grad()
    T.sum_(T.square(x)).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])
