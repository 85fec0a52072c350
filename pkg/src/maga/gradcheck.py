"""Central finite-difference gradient checks.

The relative error of one coordinate is ``|a - n| / max(|a|, |n|, 1e-8)`` for
analytic gradient ``a`` and numeric gradient ``n``.  Each check projects the
output(s) onto fixed random weights so the loss is a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (TABLE5_BRANCH_SETS, MagaConfig, branch_kernel_shapes,
                        init_block_params, maga_block)
from .net import forward, init_params
from .optim import ParamStore

H_STEP = 1e-5
OP_TOL = 1e-5
NET_TOL = 1e-4
# f64 round-off in a whole-network loss is about |L| * eps / h; at h = 1e-5 that
# swamps coordinates whose true gradient is ~1e-6, so the network check steps wider
NET_H_STEP = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _projected(fn, weights, refs):
    # subtracting the unperturbed output leaves the gradient alone but keeps the
    # loss near zero, so FD differences lose less to round-off
    def loss(tensors):
        out = fn(tensors)
        outs = out if isinstance(out, tuple) else (out,)
        total = None
        for o, w, r in zip(outs, weights, refs):
            term = T.tsum(T.mul(T.sub(o, r), w))
            total = term if total is None else T.add(total, term)
        return total
    return loss


def check_arrays(fn, arrays, rng, h=H_STEP, max_coords=None):
    """Max relative error of ``fn`` (tensors -> tensor or tuple) w.r.t. every input.

    ``max_coords`` caps how many coordinates per input are perturbed (sampled
    without replacement); ``None`` checks them all.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn([T.Tensor(a) for a in arrays])
    outs = probe if isinstance(probe, tuple) else (probe,)
    weights = [rng.normal(size=o.shape) for o in outs]
    loss_fn = _projected(fn, weights, [o.data for o in outs])

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    analytic = T.grad(loss_fn(leaves), leaves)

    def f(arrs):
        return loss_fn([T.Tensor(a) for a in arrs]).item()

    worst, count = 0.0, 0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            fp = f(arrays)
            flat[j] = old - h
            fm = f(arrays)
            flat[j] = old
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, float(rel_err(analytic[i].reshape(-1)[j], num)))
            count += 1
    return worst, count


# ---------------------------------------------------------------- per-op cases

def _away_from_zero(rng, shape):
    return rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


# GELU' vanishes here, so relative error there measures FD noise, not the gradient
GELU_STATIONARY = -0.7517916


def _away_from(rng, shape, point, gap=0.1, bound=3.0):
    """Uniform draws on [-bound, bound] kept ``gap`` away from ``point``."""
    x = rng.uniform(-bound, bound, shape)
    near = np.abs(x - point) < gap
    return np.where(near, point + np.sign(x - point + 1e-300) * gap, x)


def _op_cases():
    """name -> builder(rng) returning (fn, arrays)."""
    def conv_dense(rng):
        return (lambda t: T.conv2d(t[0], t[1], t[2], stride=2, padding=1),
                [rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)])

    def conv_sparse(rng):
        mask = rng.random((5, 6)) < 0.6
        return (lambda t: T.conv2d_sparse(t[0], t[1], mask, groups=2),
                [rng.normal(size=(2, 5, 6)), rng.normal(size=(4, 1, 3, 1))])

    return {
        "add": lambda r: (lambda t: T.add(t[0], t[1]), [r.normal(size=(3, 4)), r.normal(size=4)]),
        "sub": lambda r: (lambda t: T.sub(t[0], t[1]), [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
        "mul": lambda r: (lambda t: T.mul(t[0], t[1]), [r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))]),
        "abs": lambda r: (lambda t: T.tabs(t[0]), [_away_from_zero(r, (3, 4))]),
        "sigmoid": lambda r: (lambda t: T.sigmoid(t[0]), [r.normal(size=(3, 4)) * 2]),
        "relu": lambda r: (lambda t: T.relu(t[0]), [_away_from_zero(r, (3, 4))]),
        "gelu": lambda r: (lambda t: T.gelu(t[0]), [_away_from(r, (3, 4), GELU_STATIONARY)]),
        "reshape": lambda r: (lambda t: T.reshape(t[0], (3, 4)), [r.normal(size=(2, 6))]),
        "transpose": lambda r: (lambda t: T.transpose(t[0], (2, 0, 1)), [r.normal(size=(2, 3, 4))]),
        "index": lambda r: (lambda t: T.index(t[0], (slice(1, 3), slice(None, None, 2))),
                            [r.normal(size=(4, 5))]),
        "concat": lambda r: (lambda t: T.concat([t[0], t[1]], axis=1),
                             [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
        "stack": lambda r: (lambda t: T.stack([t[0], t[1]], axis=0),
                            [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
        "sum": lambda r: (lambda t: T.tsum(t[0], axis=1), [r.normal(size=(3, 4))]),
        "mean": lambda r: (lambda t: T.mean(t[0], axis=(0, 2)), [r.normal(size=(2, 3, 4))]),
        "max_over_axis": lambda r: (lambda t: T.max_over_axis(t[0], axis=0)[0],
                                    [r.normal(size=(3, 2, 4))]),
        "matmul": lambda r: (lambda t: T.matmul(t[0], t[1]), [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        "softmax_rows": lambda r: (lambda t: T.softmax_rows(t[0]), [r.normal(size=(3, 5)) * 2]),
        "instance_norm": lambda r: (lambda t: T.instance_norm(t[0]), [r.normal(size=(2, 3, 4, 4))]),
        "layer_norm": lambda r: (lambda t: T.layer_norm(t[0], t[1], t[2]),
                                 [r.normal(size=(3, 5)), r.normal(size=5), r.normal(size=5)]),
        "conv2d": conv_dense,
        "conv2d_sparse": conv_sparse,
        "conv1d_channels": lambda r: (lambda t: T.conv1d_channels(t[0], t[1]),
                                      [r.normal(size=8), r.normal(size=3)]),
        "upsample_nearest": lambda r: (lambda t: T.upsample_nearest(t[0]), [r.normal(size=(2, 3, 3))]),
        "upsample_bilinear": lambda r: (lambda t: T.upsample_bilinear(t[0]), [r.normal(size=(2, 3, 4))]),
    }


OP_CASES = _op_cases()


def missing_op_cases():
    return sorted(set(T.OPS) - set(OP_CASES))


def check_op(name, seeds=20, h=H_STEP, tol=OP_TOL):
    worst, count = 0.0, 0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        fn, arrays = OP_CASES[name](rng)
        e, n = check_arrays(fn, arrays, rng, h)
        worst, count = max(worst, e), count + n
    return CheckResult(name, worst, count, tol)


def op_suite(seeds=20, h=H_STEP, tol=OP_TOL):
    missing = missing_op_cases()
    if missing:
        raise KeyError(f"no gradient-check case for ops: {missing}")
    return [check_op(name, seeds, h, tol) for name in sorted(T.OPS)]


# ---------------------------------------------------------------- blocks and network

def random_block_params(cfg, rng, maga=True, prefix="blk"):
    """A block parameter draw away from the identity-like initialisation."""
    p = ParamStore()
    init_block_params(p, prefix, cfg, rng, maga=maga)
    for name, v in p.items():
        if ".tetris." in name:
            p[name] = v + rng.normal(0.0, 0.3, v.shape)
        elif name.endswith(".g"):
            p[name] = v + rng.normal(0.0, 0.1, v.shape)
        elif name.endswith(("w_q", "w_k", "w_v", "w_o")):
            p[name] = rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), v.shape)
        elif name.endswith(("mlp.w1", "mlp.w2")):
            p[name] = rng.normal(0.0, 1.0 / np.sqrt(v.shape[0]), v.shape)
        else:
            p[name] = v + rng.normal(0.0, 0.1, v.shape)
    return p


def check_block(cfg, seed, hp=2, wp=2, maga=True, h=H_STEP, tol=OP_TOL):
    rng = np.random.default_rng(seed)
    p = random_block_params(cfg, rng, maga)
    names = list(p)
    x0 = rng.normal(size=(hp * wp, cfg.dim))

    def fn(ts):
        return maga_block(ts[0], dict(zip(names, ts[1:])), "blk", cfg, hp, wp, maga=maga)

    e, n = check_arrays(fn, [x0] + [p[k] for k in names], rng, h)
    label = f"maga_block[k={cfg.k},branches={'+'.join(cfg.branches)}]" if maga else "vit_block"
    return CheckResult(label, e, n, tol)


def block_suite(seeds=(0,), kernel_sizes=(3, 5, 7), branch_sets=TABLE5_BRANCH_SETS, dim=4):
    out = []
    for k in kernel_sizes:
        for bs in branch_sets:
            cfg = MagaConfig(dim=dim, k=k, branches=bs)
            res = [check_block(cfg, s) for s in seeds]
            out.append(max(res, key=lambda r: r.max_rel_err))
    out.append(max((check_block(MagaConfig(dim=dim), s, maga=False) for s in seeds),
                   key=lambda r: r.max_rel_err))
    return out


def random_net_params(cfg, rng):
    """Network parameter draw: fresh init plus moderate perturbations."""
    p = init_params(cfg)
    for name, v in p.items():
        if ".tetris." in name:
            p[name] = v + rng.normal(0.0, 0.3, v.shape)
        elif name.endswith(("w_q", "w_k", "w_v", "w_o")):
            p[name] = rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), v.shape)
        elif name.endswith(("mlp.w1", "mlp.w2")) or name == "embed.w":
            p[name] = rng.normal(0.0, 1.0 / np.sqrt(v.shape[0]), v.shape)
        elif p.roles[name] == "weight" and v.ndim == 4:
            p[name] = v
        else:
            p[name] = v + rng.normal(0.0, 0.1, v.shape)
    return p


def check_network(cfg, seed, coords=6, h=NET_H_STEP, tol=NET_TOL):
    """Whole-network check on up to ``coords`` sampled entries of every parameter."""
    rng = np.random.default_rng(seed)
    p = random_net_params(cfg, rng)
    names = list(p)
    image = rng.random((3, cfg.height, cfg.width))
    trimap = rng.choice([0.0, 0.5, 1.0], size=(1, cfg.height, cfg.width))

    def fn(ts):
        return forward(image, trimap, dict(zip(names, ts)), cfg)

    e, n = check_arrays(fn, [p[k] for k in names], rng, h, max_coords=coords)
    return CheckResult(f"network[seed={seed}]", e, n, tol)
