"""Independent reference implementations used as test oracles.

Nothing here calls into the optimized code paths: convolution and matmul are
plain Python loops, gradients are 64-bit central finite differences.
"""
import numpy as np

from xraynet.tensor import Tape, Tensor, precision

# Published 7-class matrices, rows = predicted, columns = actual, class order
# Covid19, Edema, Effusion, Emphys., Fibrosis, Pneumonia, Normal.
OFF_THE_SHELF_MATRIX = [
    [21, 0, 1, 1, 0, 1, 0],
    [270, 254, 210, 199, 155, 171, 136],
    [4, 5, 24, 4, 6, 0, 1],
    [15, 16, 34, 49, 31, 4, 7],
    [46, 17, 35, 50, 78, 3, 18],
    [91, 1, 3, 4, 2, 712, 287],
    [8, 0, 4, 8, 8, 19, 892],
]
SCRATCH_MATRIX = [
    [443, 1, 4, 4, 7, 3, 1],
    [1, 232, 36, 34, 11, 0, 0],
    [2, 31, 161, 58, 37, 0, 0],
    [3, 12, 54, 156, 40, 0, 0],
    [3, 17, 56, 63, 184, 0, 0],
    [1, 0, 0, 0, 1, 907, 0],
    [2, 0, 0, 0, 0, 0, 1340],
]
PUBLISHED_CLASS_COUNTS = [455, 293, 311, 315, 280, 910, 1341]


def triple_loop_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """Direct cross-correlation with explicit loops, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else float(b[oi])
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * sh + u - ph
                                z = j * sw + v - pw
                                if 0 <= y < h and 0 <= z < wd:
                                    s += x[ni, ci, y, z] * w[oi, ci, u, v]
                    out[ni, oi, i, j] = s
    return out


def naive_depthwise(x, w, stride=(1, 1), padding=(0, 0)):
    """Per-channel convolution via the standard oracle, one channel at a time."""
    x = np.asarray(x, dtype=np.float64)
    outs = [naive_conv2d(x[:, c : c + 1], w[c : c + 1], None, stride, padding) for c in range(x.shape[1])]
    return np.concatenate(outs, axis=1)


def finite_difference(fn, arrays, index, eps=1e-4):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]`` in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + eps
        plus = fn(*arrays)
        target[idx] = orig - eps
        minus = fn(*arrays)
        target[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def max_relative_error(analytic, numeric):
    """Infinity-norm error relative to the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def gradient_check(build, arrays, eps=1e-4):
    """Compare tape gradients with 64-bit finite differences.

    ``build(*tensors)`` must return a scalar Tensor. Analytic gradients are
    taken in float32 (the production precision); the finite-difference oracle
    re-runs ``build`` entirely in float64. Returns the worst relative error
    over all inputs.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        loss = build(*tensors)
    loss.backward()

    def scalar(*arrs):
        with precision(np.float64):
            return build(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        numeric = finite_difference(scalar, arrays, i, eps)
        analytic = t.grad if t.grad is not None else np.zeros_like(numeric)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def projection(shape, seed=123):
    """Fixed random weights that turn a tensor output into a scalar loss."""
    return np.random.default_rng(seed).normal(size=shape)
