"""End-to-end matting network and a toy trainer.

image (3 x H x W) + trimap (1 x H x W)
  -> patch embedding -> encoder (plain and MAGA blocks) -> semantic map at H/s
  -> detail CNN at H/2, H/4, H/8
  -> decoder: upsample semantics, concatenate details, conv, ... -> sigmoid alpha
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import BRANCHES, MagaConfig, init_block_params, maga_block, tokens_to_map
from .optim import AdamState, ParamStore, adam_step
from .tensor import ConfigError, ShapeError

TRIMAP_LEVELS = (0.0, 0.5, 1.0)


class InputError(ValueError):
    """Image or trimap content is invalid."""


@dataclass(frozen=True)
class NetConfig:
    height: int = 32
    width: int = 32
    patch: int = 4
    dim: int = 32
    depth: int = 2
    n_maga_blocks: int = 2
    heads: int = 1
    k: int = 3
    branches: tuple = BRANCHES
    c2: int = 16
    c4: int = 32
    c8: int = 64
    seed: int = 0

    def __post_init__(self):
        s, H, W = self.patch, self.height, self.width
        if s < 2 or s & (s - 1):
            raise ConfigError(f"patch size must be a power of two >= 2, got {s}")
        if H % s or W % s:
            raise ConfigError(f"patch size {s} must divide {H}x{W}")
        if H < 4 * s or W < 4 * s:
            raise ConfigError(f"image {H}x{W} must be at least 4 patches ({4 * s}) per side")
        if H % 8 or W % 8:
            raise ConfigError(f"detail branch needs H and W divisible by 8, got {H}x{W}")
        if (H // 8) * (W // 8) < 2:
            raise ConfigError(f"H/8 x W/8 features need two sites for instance norm, got {H}x{W}")
        if not 0 <= self.n_maga_blocks <= self.depth:
            raise ConfigError(f"n_maga_blocks={self.n_maga_blocks} outside [0, depth={self.depth}]")
        object.__setattr__(self, "branches", self.block_config().branches)

    @property
    def grid(self):
        return self.height // self.patch, self.width // self.patch

    def block_config(self):
        return MagaConfig(dim=self.dim, heads=self.heads, k=self.k, branches=tuple(self.branches))

    def is_maga(self, i):
        """MAGA blocks occupy the last ``n_maga_blocks`` encoder slots."""
        return i >= self.depth - self.n_maga_blocks

    def replace(self, **kw):
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return NetConfig(**vals)


def decoder_plan(patch):
    """Fusion steps from the semantic scale down to H/2.

    Each step is ``(level, sem_upsamples, detail_upsamples)``: the running map is
    upsampled ``sem_upsamples`` times, the detail map at H/level is upsampled
    ``detail_upsamples`` times, then both are concatenated and convolved.
    """
    if patch < 2 or patch & (patch - 1):
        raise ConfigError(f"semantic scale 1/{patch} does not chain by factors of two")
    cur, plan = patch, []
    for level in (8, 4, 2):
        ups = 0
        while cur > level:
            cur //= 2
            ups += 1
        det = 0
        while (level >> det) > cur:
            det += 1
        plan.append((level, ups, det))
    return plan


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def init_params(cfg):
    rng = np.random.default_rng(cfg.seed)
    p = ParamStore()
    s, d = cfg.patch, cfg.dim
    hp, wp = cfg.grid
    p.add("embed.w", rng.normal(0.0, 0.02, (4 * s * s, d)))
    p.add("embed.b", np.zeros(d), "bias")
    p.add("embed.pos", np.zeros((hp * wp, d)), "embed")
    bcfg = cfg.block_config()
    for i in range(cfg.depth):
        init_block_params(p, f"enc.{i}", bcfg, rng, maga=cfg.is_maga(i))
    widths = {2: cfg.c2, 4: cfg.c4, 8: cfg.c8}
    c_in = 4
    for level in (2, 4, 8):
        # no bias: instance norm would cancel it
        p.add(f"detail.{level}.w", _he(rng, (widths[level], c_in, 3, 3)))
        c_in = widths[level]
    cur = d
    for level, _, _ in decoder_plan(s):
        c_out = widths[level]
        p.add(f"dec.{level}.w", _he(rng, (c_out, cur + widths[level], 3, 3)))
        p.add(f"dec.{level}.b", np.zeros(c_out), "bias")
        cur = c_out
    p.add("dec.out.w", _he(rng, (1, cur, 3, 3)))
    p.add("dec.out.b", np.zeros(1), "bias")
    return p


def config_lines(cfg):
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out.append(f"{f.name}={','.join(v) if isinstance(v, tuple) else v}")
    return out


# ---------------------------------------------------------------- stages

def patch_embed(image4, p, s):
    """Non-overlapping s x s patches -> linear projection + bias + positional embedding."""
    c, H, W = image4.shape
    if c != 4:
        raise ShapeError(f"patch embedding expects 4 channels (RGB + trimap), got {c}")
    if H % s or W % s:
        raise ShapeError(f"patch size {s} does not divide {H}x{W}")
    hp, wp = H // s, W // s
    x = T.reshape(image4, (4, hp, s, wp, s))
    x = T.reshape(T.transpose(x, (1, 3, 0, 2, 4)), (hp * wp, 4 * s * s))
    if p["embed.w"].shape[0] != 4 * s * s:
        raise ShapeError(f"embedding weight {p['embed.w'].shape} does not fit patch size {s}")
    return T.add(T.add(T.matmul(x, p["embed.w"]), p["embed.b"]), p["embed.pos"])


def _conv_norm_act(x, w, b, stride=1, norm=True):
    y = T.conv2d(x, w, b, stride=stride, padding=1)
    if norm:
        y, _ = T.instance_norm(T.reshape(y, (1, *y.shape)))
        y = T.reshape(y, y.shape[1:])
    return T.gelu(y)


def detail_branch(image4, p):
    """Three stride-2 conv + instance-norm + GELU stages -> (F2, F4, F8)."""
    _, H, W = image4.shape
    if H % 8 or W % 8:
        raise ShapeError(f"detail branch needs H, W divisible by 8, got {H}x{W}")
    f2 = _conv_norm_act(image4, p["detail.2.w"], None, stride=2)
    f4 = _conv_norm_act(f2, p["detail.4.w"], None, stride=2)
    f8 = _conv_norm_act(f4, p["detail.8.w"], None, stride=2)
    return f2, f4, f8


def decoder_fuse(sem, f8, f4, f2, p, patch, trace=None):
    """Fuse the semantic map with the detail pyramid and predict alpha in [0, 1]."""
    details = {8: f8, 4: f4, 2: f2}
    H2, W2 = f2.shape[1:]
    if f4.shape[1:] != (H2 // 2, W2 // 2) or f8.shape[1:] != (H2 // 4, W2 // 4):
        raise ConfigError("detail features do not chain by factors of two")
    if sem.shape[1] * patch != 2 * H2 or sem.shape[2] * patch != 2 * W2:
        raise ConfigError(f"semantic map {sem.shape[1:]} is not at scale 1/{patch}")
    x = sem
    for level, ups, det in decoder_plan(patch):
        for _ in range(ups):
            x = T.upsample_bilinear(x)
        d = details[level]
        for _ in range(det):
            d = T.upsample_bilinear(d)
        x = _conv_norm_act(T.concat([x, d], axis=0), p[f"dec.{level}.w"], p[f"dec.{level}.b"],
                           norm=False)
        if trace is not None:
            trace.append(x)
    x = T.upsample_bilinear(x)
    return T.sigmoid(T.conv2d(x, p["dec.out.w"], p["dec.out.b"], padding=1))


@dataclass
class ForwardTrace:
    tokens: list = field(default_factory=list)
    details: tuple = ()
    decoder: list = field(default_factory=list)
    alpha: T.Tensor = None


def check_trimap(trimap):
    t = np.asarray(trimap.data if isinstance(trimap, T.Tensor) else trimap)
    if not np.all(np.isin(t, TRIMAP_LEVELS)):
        raise InputError("trimap values must be 0, 0.5 or 1")


def forward(image, trimap, params, cfg, trace=False):
    """Predict a 1 x H x W alpha matte.

    ``params`` is a name -> Tensor mapping (see :meth:`ParamStore.tensors`) or a
    plain ParamStore for inference without gradients.
    """
    check_trimap(trimap)
    image = np.asarray(image.data if isinstance(image, T.Tensor) else image, dtype=np.float64)
    tri = np.asarray(trimap.data if isinstance(trimap, T.Tensor) else trimap, dtype=np.float64)
    if tri.ndim == 2:
        tri = tri[None]
    if image.shape != (3, cfg.height, cfg.width) or tri.shape != (1, cfg.height, cfg.width):
        raise ShapeError(f"expected 3x{cfg.height}x{cfg.width} image and matching trimap, "
                         f"got {image.shape} and {tri.shape}")
    p = {k: v if isinstance(v, T.Tensor) else T.Tensor(v) for k, v in params.items()}
    x4 = T.Tensor(np.concatenate([image, tri], axis=0))
    tr = ForwardTrace() if trace else None

    tokens = patch_embed(x4, p, cfg.patch)
    hp, wp = cfg.grid
    bcfg = cfg.block_config()
    for i in range(cfg.depth):
        tokens = maga_block(tokens, p, f"enc.{i}", bcfg, hp, wp, maga=cfg.is_maga(i))
        if tr:
            tr.tokens.append(tokens)
    sem = tokens_to_map(tokens, hp, wp)
    f2, f4, f8 = detail_branch(x4, p)
    alpha = decoder_fuse(sem, f8, f4, f2, p, cfg.patch, trace=tr.decoder if tr else None)
    if tr:
        tr.details, tr.alpha = (f2, f4, f8), alpha
        return tr
    return alpha


# ---------------------------------------------------------------- training

def loss_alpha(pred, gt, unknown_mask):
    """Mean absolute error over the unknown region (whole image if it is empty)."""
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    mask = np.asarray(unknown_mask, dtype=bool).reshape(pred.shape)
    if not mask.any():
        mask = np.ones(pred.shape, dtype=bool)
    diff = T.tabs(T.sub(pred, gt))
    return T.mul(T.tsum(T.mul(diff, mask.astype(np.float64))), 1.0 / mask.sum())


def composition_loss(pred, fg, bg, image, unknown_mask):
    """Mean absolute re-compositing error over the unknown region, all channels."""
    fg, bg, image = (np.asarray(a, dtype=np.float64) for a in (fg, bg, image))
    mask = np.asarray(unknown_mask, dtype=bool).reshape(pred.shape)
    if not mask.any():
        mask = np.ones(pred.shape, dtype=bool)
    comp = T.add(T.mul(pred, fg - bg), bg)
    diff = T.tabs(T.sub(comp, image))
    m3 = np.broadcast_to(mask, image.shape).astype(np.float64)
    return T.mul(T.tsum(T.mul(diff, m3)), 1.0 / m3.sum())


def batch_loss(batch, tparams, cfg, comp_weight=0.0):
    total = None
    for s in batch:
        pred = forward(s.image, s.trimap, tparams, cfg)
        unknown = np.asarray(s.trimap) == 0.5
        loss = loss_alpha(pred, s.alpha, unknown)
        if comp_weight:
            if s.fg is None or s.bg is None:
                raise InputError("composition loss needs foreground and background layers")
            loss = T.add(loss, T.mul(composition_loss(pred, s.fg, s.bg, s.image, unknown),
                                     comp_weight))
        total = loss if total is None else T.add(total, loss)
    return T.mul(total, 1.0 / len(batch))


def train_step(batch, params, state, cfg, comp_weight=0.0):
    """Forward, L1 loss, backward, AdamW.  Returns ``(loss, new_params)``."""
    if not batch:
        raise InputError("empty batch")
    tp = params.tensors()
    loss = batch_loss(batch, tp, cfg, comp_weight)
    names = list(tp)
    gs = T.grad(loss, [tp[n] for n in names])
    return loss.item(), adam_step(params, dict(zip(names, gs)), state)


def lr_at(step, total, base_lr, milestones=(0.2, 0.4, 0.6), factors=(0.1, 0.05, 0.01)):
    """Step decay: ``base_lr * factors[i]`` once ``milestones[i]`` of training has passed."""
    lr = base_lr
    for m, f in zip(milestones, factors):
        if step >= m * total:
            lr = base_lr * f
    return lr


def train(samples, cfg, steps, batch_size=4, lr=1e-3, weight_decay=0.1, schedule=False,
          comp_weight=0.0, params=None, log=None, milestones=(0.2, 0.4, 0.6),
          factors=(0.1, 0.05, 0.01)):
    """Deterministic toy training loop.

    Batches cycle through ``samples`` in order.  With ``schedule`` the rate
    follows :func:`lr_at` with the given milestones (fractions of ``steps``).
    Returns ``(params, losses)``.
    """
    if len(milestones) != len(factors):
        raise ConfigError("milestones and factors must have the same length")
    params = init_params(cfg) if params is None else params
    state = AdamState(lr=lr, weight_decay=weight_decay)
    losses = []
    n = len(samples)
    bs = min(batch_size, n)
    for step in range(steps):
        if schedule:
            state.lr = lr_at(step, steps, lr, milestones, factors)
        start = (step * bs) % n
        batch = [samples[(start + j) % n] for j in range(bs)]
        loss, params = train_step(batch, params, state, cfg, comp_weight)
        losses.append(loss)
        if log is not None:
            log(step, loss)
    return params, losses


def predict(image, trimap, params, cfg):
    return forward(image, trimap, params, cfg).data
