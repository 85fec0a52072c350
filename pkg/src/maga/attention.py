"""Morpho-aware global attention block.

The query path of a MAGA block runs

    tokens -> W_Q -> 2-D map -> Tetris branches -> instance norm
           -> channel reweighting -> branch-wise max -> gate with the map
           -> tokens

and the enriched queries attend over plain projected keys and values.

Branch names (``k`` is the kernel length):

=====  =============================================
``h``  1 x k
``v``  k x 1
``hv`` 1 x k followed by k x 1
``vh`` k x 1 followed by 1 x k
=====  =============================================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError

BRANCHES = ("h", "v", "hv", "vh")

# Kernel-shape combinations compared in the branch ablation.
TABLE5_BRANCH_SETS = (
    ("h", "v"),
    ("hv", "vh"),
    ("v", "hv", "vh"),
    ("h", "v", "hv"),
    ("h", "v", "hv", "vh"),
)

KERNEL_SIZES = (3, 5, 7)


@dataclass(frozen=True)
class MagaConfig:
    dim: int = 32
    heads: int = 1
    k: int = 3
    branches: tuple = BRANCHES
    kc: int = 3
    mlp_ratio: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "branches", canonical_branches(tuple(self.branches)))
        if self.k % 2 == 0 or self.k < 1:
            raise ConfigError(f"Tetris kernel size must be odd, got {self.k}")
        if self.kc % 2 == 0:
            raise ConfigError(f"reweight kernel length must be odd, got {self.kc}")
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide dim={self.dim}")


def validate_branches(branches):
    if not branches:
        raise ConfigError("branch set must be non-empty")
    unknown = [b for b in branches if b not in BRANCHES]
    if unknown:
        raise ConfigError(f"unknown branches {unknown}; choose from {BRANCHES}")
    if len(set(branches)) != len(branches):
        raise ConfigError(f"duplicate branches in {branches}")


def canonical_branches(branches):
    validate_branches(branches)
    return tuple(b for b in BRANCHES if b in branches)


def branch_kernel_shapes(name, channels, k):
    """Depthwise kernel shapes applied in order for one branch."""
    row, col = (channels, 1, 1, k), (channels, 1, k, 1)
    return {"h": [row], "v": [col], "hv": [row, col], "vh": [col, row]}[name]


def delta_kernel(shape):
    w = np.zeros(shape)
    w[..., shape[2] // 2, shape[3] // 2] = 1.0
    return w


# ---------------------------------------------------------------- token/map

def tokens_to_map(tokens, hp, wp):
    """N x D tokens -> D x Hp x Wp map; token i sits at (i // Wp, i % Wp)."""
    n, d = tokens.shape
    if n != hp * wp:
        raise ShapeError(f"{n} tokens cannot fill a {hp}x{wp} grid")
    return T.transpose(T.reshape(tokens, (hp, wp, d)), (2, 0, 1))


def map_to_tokens(fmap):
    d, hp, wp = fmap.shape
    return T.reshape(T.transpose(fmap, (1, 2, 0)), (hp * wp, d))


def active_sites(fmap):
    """Sites where any channel is non-zero."""
    data = fmap.data if isinstance(fmap, T.Tensor) else np.asarray(fmap)
    return np.any(data != 0.0, axis=0)


# ---------------------------------------------------------------- query path

def tetris_branches(q, kernels, branches, mask=None):
    """Run each configured branch over the C x Hp x Wp map ``q``.

    ``kernels[name]`` is the list of depthwise kernels for that branch, applied
    in order through submanifold convolution.  ``mask`` defaults to the active
    sites of ``q``.
    """
    validate_branches(branches)
    c = q.shape[0]
    if mask is None:
        mask = active_sites(q)
    out = []
    for name in branches:
        ws = kernels[name]
        for w in ws:
            kh, kw = w.shape[2:]
            if kh % 2 == 0 or kw % 2 == 0:
                raise ConfigError(f"branch {name!r}: even kernel extent {kh}x{kw}")
        y = q
        for w in ws:
            y = T.conv2d_sparse(y, w, mask, groups=c)
        out.append(y)
    return out


def morpho_reweight(branch_maps, w1d, eps=1e-5):
    """Normalise, reweight and max-select the branch stack.

    Returns ``(q_f, w_r)`` where ``w_r`` has one weight per (branch, channel).
    """
    if not branch_maps:
        raise ConfigError("branch stack is empty")
    stacked = T.stack(branch_maps, axis=0)
    nb, c = stacked.shape[:2]
    q_n, std = T.instance_norm(stacked, eps)
    w_n = T.reshape(std, (nb * c,))
    w_r = T.sigmoid(T.conv1d_channels(w_n, w1d))
    scaled = T.mul(q_n, T.reshape(w_r, (nb, c, 1, 1)))
    q_f, _ = T.max_over_axis(scaled, axis=0)
    return q_f, T.reshape(w_r, (nb, c))


def maga_gate(q_f, q):
    if q_f.shape != q.shape:
        raise ShapeError(f"gate operands differ: {q_f.shape} vs {q.shape}")
    return T.mul(q_f, q)


# ---------------------------------------------------------------- attention

def attention(q, k, v, heads=1):
    """Multi-head scaled dot-product attention on N x D inputs (no projection)."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 2:
        raise ShapeError(f"attention operands must all be N x D: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[1]
    if heads <= 0 or d % heads:
        raise ConfigError(f"heads={heads} must divide D={d}")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    outs = []
    for h in range(heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = (q, k, v) if heads == 1 else (q[cols], k[cols], v[cols])
        logits = T.mul(T.matmul(qh, T.transpose(kh)), scale)
        outs.append(T.matmul(T.softmax_rows(logits), vh))
    return outs[0] if heads == 1 else T.concat(outs, axis=1)


def maga_attention(q_l, k, v, w_o=None, heads=1):
    out = attention(q_l, k, v, heads)
    return out if w_o is None else T.matmul(out, w_o)


# ---------------------------------------------------------------- block

def init_block_params(store, prefix, cfg, rng, maga=True):
    """Add one block's parameters to ``store``.

    Projections ~ N(0, 0.02^2), Tetris kernels start as deltas (so a fresh MAGA
    block behaves like plain attention on a rescaled query) and the reweight
    kernel starts at zero.
    """
    d, hid = cfg.dim, cfg.dim * cfg.mlp_ratio
    store.add(f"{prefix}.ln1.g", np.ones(d), "norm")
    store.add(f"{prefix}.ln1.b", np.zeros(d), "norm")
    for name in ("w_q", "w_k", "w_v", "w_o"):
        store.add(f"{prefix}.{name}", rng.normal(0.0, 0.02, (d, d)))
    store.add(f"{prefix}.b_o", np.zeros(d), "bias")
    if maga:
        for b in cfg.branches:
            for i, shape in enumerate(branch_kernel_shapes(b, d, cfg.k)):
                store.add(f"{prefix}.tetris.{b}.{i}", delta_kernel(shape))
        store.add(f"{prefix}.reweight", np.zeros(cfg.kc))
    store.add(f"{prefix}.ln2.g", np.ones(d), "norm")
    store.add(f"{prefix}.ln2.b", np.zeros(d), "norm")
    store.add(f"{prefix}.mlp.w1", rng.normal(0.0, 0.02, (d, hid)))
    store.add(f"{prefix}.mlp.b1", np.zeros(hid), "bias")
    store.add(f"{prefix}.mlp.w2", rng.normal(0.0, 0.02, (hid, d)))
    store.add(f"{prefix}.mlp.b2", np.zeros(d), "bias")


def block_kernels(p, prefix, cfg):
    return {b: [p[f"{prefix}.tetris.{b}.{i}"]
                for i in range(len(branch_kernel_shapes(b, cfg.dim, cfg.k)))]
            for b in cfg.branches}


def enriched_query(q_tokens, p, prefix, cfg, hp, wp):
    """The MAGA query path on already-projected tokens; returns ``(q_l_tokens, w_r)``."""
    q_map = tokens_to_map(q_tokens, hp, wp)
    maps = tetris_branches(q_map, block_kernels(p, prefix, cfg), cfg.branches)
    q_f, w_r = morpho_reweight(maps, p[f"{prefix}.reweight"], cfg.eps)
    return map_to_tokens(maga_gate(q_f, q_map)), w_r


def maga_block(x, p, prefix, cfg, hp, wp, maga=True):
    """Pre-norm residual block: attention then a GELU MLP.

    ``p`` maps parameter names to tensors.  With ``maga=False`` the query is the
    plain projection, giving a standard ViT block.
    """
    n, d = x.shape
    if n != hp * wp:
        raise ShapeError(f"{n} tokens do not match a {hp}x{wp} grid")
    h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q = T.matmul(h, p[f"{prefix}.w_q"])
    k = T.matmul(h, p[f"{prefix}.w_k"])
    v = T.matmul(h, p[f"{prefix}.w_v"])
    if maga:
        q, _ = enriched_query(q, p, prefix, cfg, hp, wp)
    a = maga_attention(q, k, v, p[f"{prefix}.w_o"], cfg.heads)
    x = T.add(x, T.add(a, p[f"{prefix}.b_o"]))
    h = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = T.gelu(T.add(T.matmul(h, p[f"{prefix}.mlp.w1"]), p[f"{prefix}.mlp.b1"]))
    h = T.add(T.matmul(h, p[f"{prefix}.mlp.w2"]), p[f"{prefix}.mlp.b2"])
    return T.add(x, h)
