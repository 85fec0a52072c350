"""Independent reference implementations used by the tests.

Nothing here touches the tensor kernel, numpy vectorisation tricks or scipy:
plain loops over Python floats so that agreement with the library is evidence
rather than a tautology.
"""

import math
from collections import deque


def dense_conv2d(x, w, pad_h, pad_w, stride=1, groups=1, bias=None):
    """Cross-correlation with zero padding; x is C x H x W nested lists."""
    C, H, W = len(x), len(x[0]), len(x[0][0])
    O, Cg, kh, kw = len(w), len(w[0]), len(w[0][0]), len(w[0][0][0])
    og = O // groups
    Ho = (H + 2 * pad_h - kh) // stride + 1
    Wo = (W + 2 * pad_w - kw) // stride + 1
    out = [[[0.0] * Wo for _ in range(Ho)] for _ in range(O)]
    for o in range(O):
        g = o // og
        for y in range(Ho):
            for xx in range(Wo):
                acc = 0.0 if bias is None else bias[o]
                for c in range(Cg):
                    ci = g * Cg + c
                    for i in range(kh):
                        for j in range(kw):
                            yy = y * stride + i - pad_h
                            xj = xx * stride + j - pad_w
                            if 0 <= yy < H and 0 <= xj < W:
                                acc += w[o][c][i][j] * x[ci][yy][xj]
                out[o][y][xx] = acc
    return out


def submanifold_conv2d(x, w, mask, groups=1):
    kh, kw = len(w[0][0]), len(w[0][0][0])
    C, H, W = len(x), len(x[0]), len(x[0][0])
    xm = [[[x[c][i][j] if mask[i][j] else 0.0 for j in range(W)] for i in range(H)] for c in range(C)]
    out = dense_conv2d(xm, w, kh // 2, kw // 2, groups=groups)
    return [[[v if mask[i][j] else 0.0 for j, v in enumerate(row)] for i, row in enumerate(ch)]
            for ch in out]


def _conv_line(vals, kernel):
    r = len(kernel) // 2
    n = len(vals)
    out = []
    for i in range(n):
        acc = 0.0
        for j, kv in enumerate(kernel):
            t = i + j - r
            if 0 <= t < n:
                acc += kv * vals[t]
        out.append(acc)
    return out


def conv_1xk(img, kernel):
    return [_conv_line(row, kernel) for row in img]


def conv_kx1(img, kernel):
    cols = [_conv_line([row[j] for row in img], kernel) for j in range(len(img[0]))]
    return [[cols[j][i] for j in range(len(img[0]))] for i in range(len(img))]


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def maga_query_scalar(q, kernels, branches, w1d, eps=1e-5):
    """Straight-line transcription of the branch / norm / reweight / max steps.

    ``q`` is a single-channel H x W map (nested lists), ``kernels[name]`` a list
    of 1-D kernels applied in order (row kernel for ``h``, column for ``v``).
    Returns ``(q_f, w_r)``.
    """
    seq = {"h": ("row",), "v": ("col",), "hv": ("row", "col"), "vh": ("col", "row")}
    maps = []
    for b in branches:
        m = q
        for kind, ker in zip(seq[b], kernels[b]):
            m = conv_1xk(m, ker) if kind == "row" else conv_kx1(m, ker)
        maps.append(m)
    H, W = len(q), len(q[0])
    n = H * W
    normed, stds = [], []
    for m in maps:
        mu = sum(sum(r) for r in m) / n
        var = sum((v - mu) ** 2 for r in m for v in r) / n
        sd = math.sqrt(var + eps)
        stds.append(sd)
        normed.append([[(v - mu) / sd for v in r] for r in m])
    r = len(w1d) // 2
    w_r = []
    for i in range(len(stds)):
        acc = 0.0
        for j, kv in enumerate(w1d):
            t = i + j - r
            if 0 <= t < len(stds):
                acc += kv * stds[t]
        w_r.append(sigmoid(acc))
    q_f = [[max(w_r[b] * normed[b][i][j] for b in range(len(maps))) for j in range(W)]
           for i in range(H)]
    return q_f, w_r


def attention_scalar(q, k, v):
    """softmax(q k^T / sqrt(D)) v for nested-list N x D inputs."""
    n, d = len(q), len(q[0])
    out = []
    for i in range(n):
        logits = [sum(q[i][t] * k[j][t] for t in range(d)) / math.sqrt(d) for j in range(n)]
        m = max(logits)
        e = [math.exp(a - m) for a in logits]
        s = sum(e)
        p = [x / s for x in e]
        out.append([sum(p[j] * v[j][t] for j in range(n)) for t in range(d)])
    return out


# ---------------------------------------------------------------- metrics

def sad_loops(pred, gt, mask):
    total = 0.0
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            if mask[i][j]:
                total += abs(pred[i][j] - gt[i][j])
    return total / 1000.0


def mse_loops(pred, gt, mask):
    total, n = 0.0, 0
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            if mask[i][j]:
                total += (pred[i][j] - gt[i][j]) ** 2
                n += 1
    return 0.0 if n == 0 else total / n * 1000.0


def _sym_index(t, n):
    """Half-sample symmetric reflection (edge sample repeated)."""
    period = 2 * n
    t %= period
    return t if t < n else period - 1 - t


def gauss_deriv_kernels(sigma=1.4):
    r = math.ceil(3 * sigma)
    g = [math.exp(-(t * t) / (2 * sigma * sigma)) for t in range(-r, r + 1)]
    dg = [-(t / (sigma * sigma)) * g[t + r] for t in range(-r, r + 1)]
    hx = [[g[i] * dg[j] for j in range(2 * r + 1)] for i in range(2 * r + 1)]
    norm = math.sqrt(sum(v * v for row in hx for v in row))
    hx = [[v / norm for v in row] for row in hx]
    hy = [[hx[j][i] for j in range(2 * r + 1)] for i in range(2 * r + 1)]
    return hx, hy


def convolve_loops(img, ker):
    """True convolution (flipped kernel) with symmetric padding."""
    H, W = len(img), len(img[0])
    r = len(ker) // 2
    out = [[0.0] * W for _ in range(H)]
    for y in range(H):
        for x in range(W):
            acc = 0.0
            for i in range(-r, r + 1):
                for j in range(-r, r + 1):
                    acc += ker[i + r][j + r] * img[_sym_index(y - i, H)][_sym_index(x - j, W)]
            out[y][x] = acc
    return out


def grad_loops(pred, gt, mask, sigma=1.4):
    hx, hy = gauss_deriv_kernels(sigma)

    def mag(img):
        gx, gy = convolve_loops(img, hx), convolve_loops(img, hy)
        return [[math.sqrt(gx[i][j] ** 2 + gy[i][j] ** 2) for j in range(len(img[0]))]
                for i in range(len(img))]

    mp, mg = mag(pred), mag(gt)
    total = 0.0
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            if mask[i][j]:
                total += (mp[i][j] - mg[i][j]) ** 2
    return total / 1000.0


def _largest_component(grid):
    """Largest 4-connected True region via BFS; first found wins ties."""
    H, W = len(grid), len(grid[0])
    seen = [[False] * W for _ in range(H)]
    best = set()
    for i in range(H):
        for j in range(W):
            if grid[i][j] and not seen[i][j]:
                comp = set()
                dq = deque([(i, j)])
                seen[i][j] = True
                while dq:
                    a, b = dq.popleft()
                    comp.add((a, b))
                    for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        u, v = a + da, b + db
                        if 0 <= u < H and 0 <= v < W and grid[u][v] and not seen[u][v]:
                            seen[u][v] = True
                            dq.append((u, v))
                if len(comp) > len(best):
                    best = comp
    return best


def conn_loops(pred, gt, mask, step=0.1):
    H, W = len(pred), len(pred[0])
    n = int(round(1.0 / step))
    ths = [step * i for i in range(n + 1)]
    level = [[-1.0] * W for _ in range(H)]
    for t in range(1, n + 1):
        th = ths[t]
        grid = [[pred[i][j] >= th and gt[i][j] >= th for j in range(W)] for i in range(H)]
        omega = _largest_component(grid)
        for i in range(H):
            for j in range(W):
                if level[i][j] == -1.0 and (i, j) not in omega:
                    level[i][j] = ths[t - 1]
    total = 0.0
    for i in range(H):
        for j in range(W):
            lv = 1.0 if level[i][j] == -1.0 else level[i][j]
            dp, dg = pred[i][j] - lv, gt[i][j] - lv
            pp = 1.0 - dp * (1.0 if dp >= 0.15 else 0.0)
            pg = 1.0 - dg * (1.0 if dg >= 0.15 else 0.0)
            if mask[i][j]:
                total += abs(pp - pg)
    return total / 1000.0


# ---------------------------------------------------------------- morphology

def erode_loops(binary, r):
    H, W = len(binary), len(binary[0])
    return [[all(binary[u][v] for u in range(max(0, i - r), min(H, i + r + 1))
                 for v in range(max(0, j - r), min(W, j + r + 1)))
             for j in range(W)] for i in range(H)]


def dilate_loops(binary, r):
    H, W = len(binary), len(binary[0])
    return [[any(binary[u][v] for u in range(max(0, i - r), min(H, i + r + 1))
                 for v in range(max(0, j - r), min(W, j + r + 1)))
             for j in range(W)] for i in range(H)]


def trimap_loops(alpha, r_dilate=3, r_erode=3, lo=0.01, hi=0.99):
    fg = erode_loops([[a >= hi for a in row] for row in alpha], r_erode)
    bg = erode_loops([[a <= lo for a in row] for row in alpha], r_erode)
    band = dilate_loops([[lo < a < hi for a in row] for row in alpha], r_dilate)
    out = []
    for i, row in enumerate(alpha):
        out.append([1.0 if fg[i][j] and not band[i][j] else
                    0.0 if bg[i][j] and not band[i][j] else 0.5 for j in range(len(row))])
    return out
