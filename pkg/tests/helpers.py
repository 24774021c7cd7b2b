import numpy as np


def numeric_grad(f, arrays, h=1e-3):
    """Central finite differences of scalar ``f()`` w.r.t. each array, in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = f()
            a[idx] = orig - h
            fm = f()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def brute_conv2d(x, k, stride, pad):
    """Quadruple-loop cross-correlation; ``pad`` = (top, bottom, left, right)."""
    n, h, w, c = x.shape
    kh, kw, cin, cout = k.shape
    pt, pb, pl, pr = pad
    xp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=np.float64)
    xp[:, pt:pt + h, pl:pl + w, :] = x
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for ci in range(cin):
                                acc += xp[b, i * stride + di, j * stride + dj, ci] * k[di, dj, ci, o]
                    out[b, i, j, o] = acc
    return out


def away_from_zero(rng, shape, margin=0.05):
    u = rng.standard_normal(shape)
    return np.sign(u) * (margin + np.abs(u))
