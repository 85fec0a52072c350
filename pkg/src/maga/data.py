"""Compositing, trimap generation and a procedural hairline dataset.

All randomness comes from numpy's PCG64 bit generator through
``Generator.random()`` (53-bit uniform doubles), and the renderers use only
+, -, *, /, sqrt, min/max and rounding, so a given seed produces the same bytes
on any IEEE-754 platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .net import InputError


@dataclass
class ImagePair:
    fg: np.ndarray  # 3 x H x W
    bg: np.ndarray  # 3 x H x W
    alpha: np.ndarray  # 1 x H x W
    image: np.ndarray  # 3 x H x W composite
    trimap: np.ndarray  # 1 x H x W, values in {0, 0.5, 1}


def composite(fg, bg, alpha):
    """I = alpha * F + (1 - alpha) * B, per pixel and channel."""
    fg, bg, alpha = (np.asarray(a, dtype=np.float64) for a in (fg, bg, alpha))
    if alpha.min() < 0.0 or alpha.max() > 1.0:
        raise InputError("alpha must lie in [0, 1]")
    if fg.shape != bg.shape or alpha.shape[-2:] != fg.shape[-2:]:
        raise InputError(f"layers are not co-registered: F{fg.shape} B{bg.shape} alpha{alpha.shape}")
    return alpha * fg + (1.0 - alpha) * bg


def _square(r):
    return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)


def trimap_from_alpha(alpha, r_dilate=3, r_erode=3, lo=0.01, hi=0.99):
    """Foreground/background cores by erosion, everything else unknown (0.5).

    Pixels strictly between ``lo`` and ``hi`` are dilated by ``r_dilate`` and
    that band is always unknown.  The image border does not erode the cores.
    """
    a = np.asarray(alpha, dtype=np.float64)
    squeeze = a.ndim == 3
    a = a[0] if squeeze else a
    fg = ndimage.binary_erosion(a >= hi, _square(r_erode), border_value=1) if r_erode else a >= hi
    bg = ndimage.binary_erosion(a <= lo, _square(r_erode), border_value=1) if r_erode else a <= lo
    partial = (a > lo) & (a < hi)
    band = ndimage.binary_dilation(partial, _square(r_dilate)) if r_dilate else partial
    t = np.full(a.shape, 0.5)
    t[fg & ~band] = 1.0
    t[bg & ~band] = 0.0
    return t[None] if squeeze else t


# ---------------------------------------------------------------- rendering

def _q8(x):
    """Snap to the 8-bit grid so PGM/PPM round trips are lossless."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def _unit(rng):
    """Random unit vector without trigonometry."""
    while True:
        u = rng.random(2) * 2.0 - 1.0
        n2 = u[0] * u[0] + u[1] * u[1]
        if 1e-4 < n2 <= 1.0:
            return u / np.sqrt(n2)


def _segment_distance(py, px, ay, ax, by, bx):
    dy, dx = by - ay, bx - ax
    ll = dy * dy + dx * dx
    t = ((py - ay) * dy + (px - ax) * dx) / ll if ll > 0 else np.zeros_like(py)
    t = np.clip(t, 0.0, 1.0)
    ey, ex = py - (ay + t * dy), px - (ax + t * dx)
    return np.sqrt(ey * ey + ex * ex)


def _curve_coverage(py, px, p0, p1, p2, width, n_seg=24):
    """Anti-aliased coverage of a quadratic Bezier strand of the given width."""
    ts = np.arange(n_seg + 1) / n_seg
    pts = [((1 - t) * (1 - t) * p0 + 2 * (1 - t) * t * p1 + t * t * p2) for t in ts]
    dist = np.full(py.shape, np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        dist = np.minimum(dist, _segment_distance(py, px, a[0], a[1], b[0], b[1]))
    return np.clip(0.5 * width + 0.5 - dist, 0.0, 1.0)


def gen_hairline_foreground(seed, H, W, n_strands, rng=None):
    """Solid-colour elliptical body with ``n_strands`` thin curved strands.

    Returns ``(F, alpha)`` with shapes 3 x H x W and 1 x H x W, both on the 8-bit
    grid.  ``rng`` overrides the seed-derived generator.
    """
    if n_strands < 1:
        raise ValueError("n_strands must be at least 1")
    rng = np.random.Generator(np.random.PCG64(seed)) if rng is None else rng
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5

    cy = H * (0.4 + 0.2 * rng.random())
    cx = W * (0.4 + 0.2 * rng.random())
    ry = H * (0.2 + 0.08 * rng.random())
    rx = W * (0.2 + 0.08 * rng.random())
    rad = np.sqrt(((py - cy) / ry) ** 2 + ((px - cx) / rx) ** 2)
    body = np.clip(0.5 - (rad - 1.0) * (0.5 * (rx + ry)), 0.0, 1.0)

    body_col = rng.random(3)
    fg = np.broadcast_to(body_col[:, None, None], (3, H, W)).copy()
    alpha = body
    for _ in range(n_strands):
        u = _unit(rng)
        root = np.array([cy + 0.9 * ry * u[0], cx + 0.9 * rx * u[1]])
        length = min(H, W) * (0.12 + 0.12 * rng.random())
        bend = _unit(rng) * (0.3 * length * rng.random())
        tip = root + u * length + bend
        ctrl = root + 0.5 * u * length + 0.5 * _unit(rng) * (0.25 * length)
        width = 1.0 + rng.random()
        cov = _curve_coverage(py, px, root, ctrl, tip, width)
        col = np.clip(body_col + (rng.random(3) - 0.5) * 0.3, 0.0, 1.0)
        on = cov > alpha
        fg = np.where(on[None], col[:, None, None], fg)
        alpha = np.maximum(alpha, cov)
    return _q8(fg), _q8(alpha)[None]


def gen_background(rng, H, W, lattice=4):
    """Linear colour gradient plus bilinear value noise, per channel."""
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    fy, fx = py / max(H - 1, 1), px / max(W - 1, 1)
    gy, gx = fy * lattice, fx * lattice
    iy = np.minimum(gy.astype(int), lattice - 1)
    ix = np.minimum(gx.astype(int), lattice - 1)
    ty, tx = gy - iy, gx - ix
    chans = []
    for _ in range(3):
        c0, c1 = rng.random(2)
        d = _unit(rng)
        grad = c0 + (c1 - c0) * (0.5 + 0.5 * (d[0] * (2 * fy - 1) + d[1] * (2 * fx - 1)) * 0.5)
        lat = rng.random((lattice + 1, lattice + 1)) - 0.5
        noise = ((1 - ty) * (1 - tx) * lat[iy, ix] + (1 - ty) * tx * lat[iy, ix + 1]
                 + ty * (1 - tx) * lat[iy + 1, ix] + ty * tx * lat[iy + 1, ix + 1])
        chans.append(grad + 0.4 * noise)
    return _q8(np.stack(chans))


def sample_rng(seed, index):
    """Independent generator per (seed, index) so generation parallelises."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def make_pair(seed, index, H=32, W=32, min_strands=1, max_strands=3):
    rng = sample_rng(seed, index)
    n = min_strands + int(rng.random() * (max_strands - min_strands + 1))
    fg, alpha = gen_hairline_foreground(None, H, W, n, rng=rng)
    bg = gen_background(rng, H, W)
    image = composite(fg, bg, alpha)
    return ImagePair(fg=fg, bg=bg, alpha=alpha, image=image, trimap=trimap_from_alpha(alpha))


def make_dataset(n, seed, H=32, W=32, **kw):
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    return [make_pair(seed, i, H, W, **kw) for i in range(n)]


def check_pair(pair, tol=1e-12):
    """Assert the compositing and trimap invariants of one pair."""
    recon = pair.alpha * pair.fg + (1.0 - pair.alpha) * pair.bg
    if np.max(np.abs(recon - pair.image)) > tol:
        raise AssertionError("composite does not match alpha * F + (1 - alpha) * B")
    if not np.all(np.isin(pair.trimap, (0.0, 0.5, 1.0))):
        raise AssertionError("trimap has values outside {0, 0.5, 1}")
    return True
