"""Naive loop implementations used as independent references in the tests."""

import math

import numpy as np


def matmul_loop(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def extent(length, k, s, p):
    return (length + 2 * p - k) // s + 1


def depthwise_loop(x, w, stride, padding):
    n, c, t, h, wd = x.shape
    _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    to, ho, wo = extent(t, kt, st, pt), extent(h, kh, sh, ph), extent(wd, kw, sw, pw)
    out = np.zeros((n, c, to, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(to):
                for j in range(ho):
                    for l in range(wo):
                        s = 0.0
                        for a in range(kt):
                            for bb in range(kh):
                                for cc in range(kw):
                                    ti, hi, wi = i * st + a - pt, j * sh + bb - ph, l * sw + cc - pw
                                    if 0 <= ti < t and 0 <= hi < h and 0 <= wi < wd:
                                        s += x[b, ch, ti, hi, wi] * w[ch, a, bb, cc]
                        out[b, ch, i, j, l] = s
    return out


def conv3d_loop(x, w, stride, padding):
    """Dense convolution (w: Co x C x kt x kh x kw) as a sum of per-input-channel depthwise loops."""
    co = w.shape[0]
    n, c = x.shape[:2]
    parts = None
    for o in range(co):
        acc = 0.0
        for ch in range(c):
            acc = acc + depthwise_loop(x[:, ch : ch + 1], w[o, ch][None], stride, padding)[:, 0]
        parts = acc[:, None] if parts is None else np.concatenate([parts, acc[:, None]], axis=1)
    return parts


def pointwise_oracle(x, w):
    n, c = x.shape[:2]
    return np.matmul(w, x.reshape(n, c, -1)).reshape((n, w.shape[0]) + x.shape[2:])


def avg_pool_loop(x):
    n, c, t, h, w = x.shape
    out = np.zeros((n, t, c))
    for b in range(n):
        for i in range(t):
            for ch in range(c):
                s = 0.0
                for j in range(h):
                    for k in range(w):
                        s += x[b, ch, i, j, k]
                out[b, i, ch] = s / (h * w)
    return out


def softmax_loop(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    tot = sum(e)
    return [v / tot for v in e]


def attention_loop(q, k, v):
    lq, d = q.shape
    lk = k.shape[0]
    out = np.zeros((lq, v.shape[1]))
    for i in range(lq):
        scores = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d) for j in range(lk)]
        wts = softmax_loop(scores)
        for j in range(lk):
            out[i] += wts[j] * v[j]
    return out


def layer_norm_rows(z, eps=1e-5):
    out = np.zeros_like(z)
    for i in range(z.shape[0]):
        mu = sum(z[i]) / z.shape[1]
        var = sum((a - mu) ** 2 for a in z[i]) / z.shape[1]
        out[i] = (z[i] - mu) / math.sqrt(var + eps)
    return out


def mhsa_loop(z, wq, wo):
    """Only queries projected: head s uses Q = z_s wq[s], K = V = z_s."""
    heads, dh, _ = wq.shape
    merged = np.zeros((z.shape[0], heads * wq.shape[2]))
    for s in range(heads):
        zs = z[:, s * dh : (s + 1) * dh]
        q = matmul_loop(zs, wq[s])
        merged[:, s * wq.shape[2] : (s + 1) * wq.shape[2]] = attention_loop(q, zs, zs)
    return matmul_loop(merged, wo)


def mobile_to_former_loop(z, xt, wq, wo):
    heads, dh, ch = wq.shape
    merged = np.zeros((z.shape[0], heads * ch))
    for s in range(heads):
        q = matmul_loop(z[:, s * dh : (s + 1) * dh], wq[s])
        xs = xt[:, s * ch : (s + 1) * ch]
        merged[:, s * ch : (s + 1) * ch] = attention_loop(q, xs, xs)
    return matmul_loop(merged, wo)


def former_to_mobile_loop(xt, z, wk, wv):
    heads, dh, ch = wk.shape
    out = np.zeros((xt.shape[0], heads * ch))
    for s in range(heads):
        zs = z[:, s * dh : (s + 1) * dh]
        k = matmul_loop(zs, wk[s])
        v = matmul_loop(zs, wv[s])
        out[:, s * ch : (s + 1) * ch] = attention_loop(xt[:, s * ch : (s + 1) * ch], k, v)
    return out


def group_norm_loop(x, groups, weight, bias, eps=1e-5):
    n, c = x.shape[:2]
    out = np.zeros_like(x)
    per = c // groups
    for b in range(n):
        for g in range(groups):
            blk = x[b, g * per : (g + 1) * per]
            vals = blk.reshape(-1)
            mu = sum(vals) / vals.size
            var = sum((v - mu) ** 2 for v in vals) / vals.size
            normed = (blk - mu) / math.sqrt(var + eps)
            for j in range(per):
                ch = g * per + j
                out[b, ch] = normed[j] * weight[ch] + bias[ch]
    return out


def relu(x):
    return np.where(x > 0, x, 0.0)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def num_grad(f, x, h=1e-5):
    """Central differences of scalar f with respect to every entry of array x (in place, restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def max_rel(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
