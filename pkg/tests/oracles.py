"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (nested Python loops,
direct summation) and stays deliberately ignorant of how the library
computes the same quantities.  Oracles run in float64.
"""

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct six-nested-loop 2-d cross-correlation, zero padding."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bs, cin, h, ww = x.shape
    cout, cin_g, kh, kw = w.shape
    assert cin % groups == 0 and cout % groups == 0 and cin_g == cin // groups
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        h, ww = h + 2 * padding, ww + 2 * padding
    oh = (h - kh) // stride + 1
    ow = (ww - kw) // stride + 1
    out = np.zeros((bs, cout, oh, ow))
    cpg_out = cout // groups
    for n in range(bs):
        for co in range(cout):
            gi = co // cpg_out
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin_g):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += w[co, ci, ky, kx] * x[
                                    n, gi * cin_g + ci,
                                    oy * stride + ky, ox * stride + kx]
                    out[n, co, oy, ox] = acc
            if b is not None:
                out[n, co] += b[co]
    return out


def conv_transpose2d_loops(x, w, stride=1, padding=0, bias=None):
    """Direct transposed convolution: scatter each input pixel through the
    kernel.  w is (Cin, Cout, kh, kw)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bs, cin, h, ww = x.shape
    _, cout, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (ww - 1) * stride - 2 * padding + kw
    full = np.zeros((bs, cout, (h - 1) * stride + kh, (ww - 1) * stride + kw))
    for n in range(bs):
        for ci in range(cin):
            for y in range(h):
                for xx in range(ww):
                    v = x[n, ci, y, xx]
                    for co in range(cout):
                        for ky in range(kh):
                            for kx in range(kw):
                                full[n, co, y * stride + ky, xx * stride + kx] += \
                                    v * w[ci, co, ky, kx]
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
    return out


def avg_pool2d_loops(x, k):
    """Window-loop average pooling; dims must divide by k."""
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    assert h % k == 0 and w % k == 0
    out = np.zeros((b, c, h // k, w // k))
    for n in range(b):
        for ci in range(c):
            for oy in range(h // k):
                for ox in range(w // k):
                    acc = 0.0
                    for dy in range(k):
                        for dx in range(k):
                            acc += x[n, ci, oy * k + dy, ox * k + dx]
                    out[n, ci, oy, ox] = acc / (k * k)
    return out


def matmul_loops(a, b):
    """Triple-loop matrix product over the last two axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        n, k = a.shape
        _, m = b.shape
        out = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for l in range(k):
                    acc += a[i, l] * b[l, j]
                out[i, j] = acc
        return out
    out = np.stack([matmul_loops(a[i], b[i]) for i in range(a.shape[0])])
    return out


def affinity_loops(tap, k):
    """pool -> flatten -> F F^T using only the loop oracles above."""
    pooled = avg_pool2d_loops(tap, k)
    b, c, h, w = pooled.shape
    flat = pooled.reshape(b, c, h * w)
    return np.stack([matmul_loops(flat[i], flat[i].T) for i in range(b)])


def gap_loops(x):
    """Per-channel mean by direct summation."""
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    out = np.zeros((b, c, 1, 1))
    for n in range(b):
        for ci in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += x[n, ci, i, j]
            out[n, ci, 0, 0] = acc / (h * w)
    return out


def kl_rows(h, c):
    """Mean over rows of sum(h * log(h/c)) by direct summation."""
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    rows = h.reshape(-1, h.shape[-1])
    crows = c.reshape(-1, c.shape[-1])
    total = 0.0
    for r, cr in zip(rows, crows):
        for p, q in zip(r, cr):
            total += p * np.log(p / q)
    return total / rows.shape[0]


def finite_diff_grads(f, tensors, step=1e-3):
    """Central finite-difference gradients of scalar f() w.r.t. each tensor.

    ``f`` must re-read tensor .data on every call; tensors should be float64
    for the comparison to be meaningful at step 1e-3.
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f()
            flat[i] = orig - step
            f_minus = f()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2 * step)
        grads.append(g.reshape(t.data.shape))
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    """Max elementwise relative error with an absolute floor for tiny grads."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
