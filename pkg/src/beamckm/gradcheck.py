"""Central finite-difference verification for every differentiable op.

Each registry entry builds a random float64 instance of one op, reduces it to
a scalar through a fixed random projection, and compares backward() gradients
against elementwise central differences.
"""

import numpy as np

from . import tensor as T

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def numeric_gradient(func, leaf, h=DEFAULT_STEP):
    """Central differences of scalar-valued func() w.r.t. leaf.data, in place."""
    base = leaf.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = func()
        flat[i] = orig - h
        down = func()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    """max over elements of |a - n| / max(1, |a|, |n|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(builder, leaves, h=DEFAULT_STEP, tol=DEFAULT_TOL):
    """Compare backward() grads of builder() against finite differences.

    builder must construct a fresh scalar Tensor from the given leaves each
    call (it is re-run with perturbed leaf data). Returns the worst relative
    error over all leaves.
    """
    for leaf in leaves:
        leaf.zero_grad()
    out = builder()
    out.backward()
    analytic = [np.array(leaf.grad, dtype=float) for leaf in leaves]

    def value():
        with T.no_grad():
            return builder().item()

    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        n = numeric_gradient(value, leaf, h=h)
        worst = max(worst, relative_error(a, n))
    if worst > tol:
        raise AssertionError(f"gradient check failed: relative error {worst:.3e} > {tol}")
    return worst


def _leaf(rng, shape, offset=0.0):
    return T.Tensor(rng.standard_normal(shape) + offset, requires_grad=True)


def _projected(out, rng):
    # random projection avoids blind spots from symmetric cancellation
    c = T.Tensor(rng.standard_normal(out.shape))
    return T.mul(out, c).sum()


def _check_unary(op, rng, shape, offset=0.0, **kwargs):
    x = _leaf(rng, shape, offset=offset)
    proj = T.Tensor(rng.standard_normal(op(x, **kwargs).shape))
    return lambda: T.mul(op(x, **kwargs), proj).sum(), [x]


def _rand_hw(rng, lo=2, hi=6):
    return int(rng.integers(lo, hi)), int(rng.integers(lo, hi))


def _case_add(rng):
    s = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    x, y = _leaf(rng, s), _leaf(rng, (1, s[1]))  # exercises broadcasting
    proj = T.Tensor(rng.standard_normal(s))
    return lambda: T.mul(T.add(x, y), proj).sum(), [x, y]


def _case_sub(rng):
    s = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    x, y = _leaf(rng, s), _leaf(rng, s)
    proj = T.Tensor(rng.standard_normal(s))
    return lambda: T.mul(T.sub(x, y), proj).sum(), [x, y]


def _case_mul(rng):
    s = (int(rng.integers(2, 5)),)
    x, y = _leaf(rng, s), _leaf(rng, s)
    proj = T.Tensor(rng.standard_normal(s))
    return lambda: T.mul(T.mul(x, y), proj).sum(), [x, y]


def _case_scale(rng):
    return _check_unary(lambda t: T.scale(t, 0.37), rng, (3, int(rng.integers(2, 6))))


def _case_abs(rng):
    # keep values away from the nondifferentiable point at zero
    x = T.Tensor(rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)), requires_grad=True)
    proj = T.Tensor(rng.standard_normal((3, 4)))
    return lambda: T.mul(T.absolute(x), proj).sum(), [x]


def _case_sqrt(rng):
    x = T.Tensor(rng.uniform(0.5, 2.0, size=(2, 5)), requires_grad=True)
    proj = T.Tensor(rng.standard_normal((2, 5)))
    return lambda: T.mul(T.sqrt(x), proj).sum(), [x]


def _case_matmul(rng):
    m, k, n = (int(rng.integers(2, 5)) for _ in range(3))
    a, b = _leaf(rng, (m, k)), _leaf(rng, (k, n))
    proj = T.Tensor(rng.standard_normal((m, n)))
    return lambda: T.mul(T.matmul(a, b), proj).sum(), [a, b]


def _case_matmul_batched(rng):
    bsz, m, k, n = 2, 3, int(rng.integers(2, 5)), 3
    a, b = _leaf(rng, (bsz, m, k)), _leaf(rng, (bsz, k, n))
    proj = T.Tensor(rng.standard_normal((bsz, m, n)))
    return lambda: T.mul(T.matmul(a, b), proj).sum(), [a, b]


def _case_matmul_sequence(rng):
    bsz, m, k, n = 2, int(rng.integers(2, 5)), 3, 4
    a, b = _leaf(rng, (bsz, m, k)), _leaf(rng, (k, n))
    proj = T.Tensor(rng.standard_normal((bsz, m, n)))
    return lambda: T.mul(T.matmul(a, b), proj).sum(), [a, b]


def _case_sum(rng):
    x = _leaf(rng, (3, int(rng.integers(2, 5)), 2))
    proj = T.Tensor(rng.standard_normal((3, 2)))
    return lambda: T.mul(x.sum(axis=1), proj).sum(), [x]


def _case_mean(rng):
    x = _leaf(rng, (3, int(rng.integers(2, 5))))
    return lambda: x.mean(), [x]


def _case_relu(rng):
    return _check_unary(T.relu, rng, (2, int(rng.integers(3, 7))), offset=0.1)


def _case_sigmoid(rng):
    return _check_unary(T.sigmoid, rng, (3, int(rng.integers(2, 6))))


def _case_gelu(rng):
    return _check_unary(T.gelu, rng, (2, int(rng.integers(3, 7))))


def _case_softmax(rng):
    return _check_unary(T.softmax, rng, (2, 3, int(rng.integers(2, 6))))


def _case_layer_norm(rng):
    d = int(rng.integers(3, 8))
    x = _leaf(rng, (2, 3, d))
    gamma = T.Tensor(rng.uniform(0.5, 1.5, size=d), requires_grad=True)
    beta = T.Tensor(rng.standard_normal(d) * 0.1, requires_grad=True)
    proj = T.Tensor(rng.standard_normal((2, 3, d)))
    return lambda: T.mul(T.layer_norm(x, gamma, beta), proj).sum(), [x, gamma, beta]


def _case_reshape(rng):
    x = _leaf(rng, (2, 3, 4))
    proj = T.Tensor(rng.standard_normal((6, 4)))
    return lambda: T.mul(x.reshape((6, 4)), proj).sum(), [x]


def _case_transpose(rng):
    x = _leaf(rng, (2, 3, 4))
    proj = T.Tensor(rng.standard_normal((4, 2, 3)))
    return lambda: T.mul(x.transpose((2, 0, 1)), proj).sum(), [x]


def _case_concat_channels(rng):
    h, w = _rand_hw(rng)
    a, b = _leaf(rng, (2, 2, h, w)), _leaf(rng, (2, 3, h, w))
    proj = T.Tensor(rng.standard_normal((2, 5, h, w)))
    return lambda: T.mul(T.concat_channels([a, b]), proj).sum(), [a, b]


def _case_reshape_patches(rng):
    h, w = _rand_hw(rng)
    x = _leaf(rng, (2, 3, h, w))
    proj = T.Tensor(rng.standard_normal((2, h * w, 3)))

    def builder():
        seq = T.reshape_patches(x)
        back = T.reshape_patches_back(seq, (h, w))  # round trip keeps both in the graph
        return T.mul(T.reshape_patches(back), proj).sum()

    return builder, [x]


def _case_conv2d(rng):
    c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(4, 8)), int(rng.integers(4, 8))
    x = _leaf(rng, (2, c, h, w))
    k = T.Tensor(rng.standard_normal((o, c, 3, 3)) * 0.5, requires_grad=True)
    bias = T.Tensor(rng.standard_normal(o) * 0.1, requires_grad=True)
    out_shape = T.conv2d(T.Tensor(x.data), T.Tensor(k.data), stride=1, padding=1).shape
    proj = T.Tensor(rng.standard_normal(out_shape))
    return (
        lambda: T.mul(T.conv2d(x, k, bias=bias, stride=1, padding=1), proj).sum(),
        [x, k, bias],
    )


def _case_conv2d_strided(rng):
    c, o = 2, 3
    h = int(rng.integers(3, 6)) * 2 + 1  # odd so (h + 2 - 3) is even
    x = _leaf(rng, (1, c, h, h))
    k = T.Tensor(rng.standard_normal((o, c, 3, 3)) * 0.5, requires_grad=True)
    out_shape = T.conv2d(T.Tensor(x.data), T.Tensor(k.data), stride=2, padding=1).shape
    proj = T.Tensor(rng.standard_normal(out_shape))
    return lambda: T.mul(T.conv2d(x, k, stride=2, padding=1), proj).sum(), [x, k]


def _case_avg_pool2(rng):
    h, w = int(rng.integers(1, 4)) * 2, int(rng.integers(1, 4)) * 2
    x = _leaf(rng, (2, 2, h, w))
    proj = T.Tensor(rng.standard_normal((2, 2, h // 2, w // 2)))
    return lambda: T.mul(T.avg_pool2(x), proj).sum(), [x]


def _case_bilinear_upsample2(rng):
    h, w = _rand_hw(rng, 1, 5)
    x = _leaf(rng, (2, 2, h, w))
    proj = T.Tensor(rng.standard_normal((2, 2, 2 * h, 2 * w)))
    return lambda: T.mul(T.bilinear_upsample2(x), proj).sum(), [x]


def _case_pad_replicate(rng):
    h, w = _rand_hw(rng)
    x = _leaf(rng, (2, 2, h, w))
    proj = T.Tensor(rng.standard_normal((2, 2, h + 2, w + 2)))
    return lambda: T.mul(T.pad_replicate(x, 1), proj).sum(), [x]


OP_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "abs": _case_abs,
    "sqrt": _case_sqrt,
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "matmul_sequence": _case_matmul_sequence,
    "sum": _case_sum,
    "mean": _case_mean,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "gelu": _case_gelu,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat_channels": _case_concat_channels,
    "reshape_patches": _case_reshape_patches,
    "conv2d": _case_conv2d,
    "conv2d_strided": _case_conv2d_strided,
    "avg_pool2": _case_avg_pool2,
    "bilinear_upsample2": _case_bilinear_upsample2,
    "pad_replicate": _case_pad_replicate,
}


def run_op_check(name, instances=5, seed=0, tol=DEFAULT_TOL):
    """Gradient-check one registered op on `instances` random shapes."""
    case = OP_CASES[name]
    # zlib.crc32 is stable across processes, unlike the salted builtin hash
    import zlib

    rng = np.random.default_rng(seed + zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(instances):
        builder, leaves = case(rng)
        worst = max(worst, check_gradients(builder, leaves, tol=tol))
    return worst


def run_all_op_checks(instances=5, seed=0, tol=DEFAULT_TOL):
    """Returns {op_name: worst relative error}; raises on any failure."""
    return {name: run_op_check(name, instances=instances, seed=seed, tol=tol) for name in sorted(OP_CASES)}
