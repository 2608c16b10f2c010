"""Brute-force reference implementations used only by the tests.

Everything here is plain Python loops over indices so it shares no code
path with the vectorised engine.
"""

import math

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                yy = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[bi, ci, yy, xx] * w[co, ci, di, dj]
                    out[bi, co, i, j] = acc
    return out


def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = sum(a[i, p] * b[p, j] for p in range(k))
    return out


def softmax_rows(x):
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape[:-1]):
        row = x[idx]
        mx = max(row)
        e = [math.exp(v - mx) for v in row]
        s = sum(e)
        out[idx] = [v / s for v in e]
    return out


def bilinear_sample(src, x, y):
    """Scalar bilinear lookup with border clamp; ``src`` is H x W."""
    h, w = src.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * src[y0, x0] + fx * (1 - fy) * src[y0, x1]
            + (1 - fx) * fy * src[y1, x0] + fx * fy * src[y1, x1])


def warp_loops(src, u, v):
    h, w = src.shape
    out = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            sx, sy = x + u[y, x], y + v[y, x]
            out[y, x] = bilinear_sample(src, sx, sy)
            mask[y, x] = (math.floor(sx) >= 0 and math.ceil(sx) <= w - 1
                          and math.floor(sy) >= 0 and math.ceil(sy) <= h - 1)
    return out, mask


def attention_loops(q_in, k_in, v_in, wq, wk, wv, wo, heads):
    """Per-head, per-query explicit attention; returns (out, weights[h][i][j])."""
    nq, c = q_in.shape
    nk = k_in.shape[0]
    d = c // heads
    q = matmul_loops(q_in, wq)
    k = matmul_loops(k_in, wk)
    v = matmul_loops(v_in, wv)
    concat = np.zeros((nq, c))
    weights = np.zeros((heads, nq, nk))
    for hd in range(heads):
        lo = hd * d
        for i in range(nq):
            scores = []
            for j in range(nk):
                s = sum(q[i, lo + p] * k[j, lo + p] for p in range(d)) / math.sqrt(d)
                scores.append(s)
            mx = max(scores)
            e = [math.exp(s - mx) for s in scores]
            tot = sum(e)
            a = [x / tot for x in e]
            weights[hd, i] = a
            for p in range(d):
                concat[i, lo + p] = sum(a[j] * v[j, lo + p] for j in range(nk))
    return matmul_loops(concat, wo), weights


def depth_metrics_loops(pred, gt):
    n = 0
    sums = dict(abs_rel=0.0, sq_rel=0.0, se=0.0, sle=0.0, d1=0, d2=0, d3=0)
    for p, g in zip(pred.ravel(), gt.ravel()):
        p, g = float(p), float(g)
        n += 1
        sums["abs_rel"] += abs(p - g) / g
        sums["sq_rel"] += (p - g) ** 2 / g
        sums["se"] += (p - g) ** 2
        sums["sle"] += (math.log(p) - math.log(g)) ** 2
        r = max(p / g, g / p)
        sums["d1"] += r < 1.25
        sums["d2"] += r < 1.25 ** 2
        sums["d3"] += r < 1.25 ** 3
    return dict(abs_rel=sums["abs_rel"] / n, sq_rel=sums["sq_rel"] / n, rmse=math.sqrt(sums["se"] / n),
                rmse_log=math.sqrt(sums["sle"] / n), delta1=sums["d1"] / n, delta2=sums["d2"] / n,
                delta3=sums["d3"] / n)


def tc_loops(d, dw, mask, thr):
    n, a, r = 0, 0.0, 0
    for p, q, m in zip(d.ravel(), dw.ravel(), mask.ravel()):
        if not m:
            continue
        n += 1
        a += abs(p - q) / p
        r += max(p / q, q / p) < thr
    return a / n, r / n


def silog_scalar(pred, target, alpha=10.0, lam=0.85):
    dd = [math.log(p) - math.log(t) for p, t in zip(pred, target)]
    n = len(dd)
    return alpha * math.sqrt(sum(x * x for x in dd) / n - lam * (sum(dd) / n) ** 2)
