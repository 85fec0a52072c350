"""Command-line entry point.

    maga <gradcheck|train|eval|ablate|synth|infer> --config PATH [--set K=V]... [--out DIR] [--seed N]

Configs are flat ``key=value`` lines; ``#`` starts a comment.  Every run writes
``resolved_config.txt`` into the output directory, and running again from that
snapshot reproduces the outputs byte for byte.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from . import gradcheck as GC
from . import metrics as M
from .attention import BRANCHES, KERNEL_SIZES, TABLE5_BRANCH_SETS, MagaConfig
from .data import ImagePair, check_pair, make_dataset
from .io import (FormatError, load_checkpoint, read_pgm, read_ppm, read_trimap,
                 save_checkpoint, write_pgm, write_ppm, write_trimap)
from .net import InputError, NetConfig, config_lines, init_params, predict, train
from .optim import ParamStore
from .tensor import ConfigError, ShapeError

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
SNAPSHOT = "resolved_config.txt"


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _branches(text):
    return tuple(b for b in text.replace("+", ",").split(",") if b)


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(x if isinstance(x, str) else repr(x) for x in v)
    return str(v)


# key -> (parser, default).  Order here is the snapshot order.
SCHEMA = {
    # network
    "height": (int, 32), "width": (int, 32), "patch": (int, 4), "dim": (int, 32),
    "depth": (int, 2), "n_maga_blocks": (int, 2), "heads": (int, 1), "k": (int, 3),
    "branches": (_branches, BRANCHES), "c2": (int, 16), "c4": (int, 32), "c8": (int, 64),
    "seed": (int, 0),
    # data
    "n_samples": (int, 16), "manifest": (str, ""),
    # training
    "steps": (int, 200), "batch_size": (int, 4), "lr": (float, 1e-3),
    "weight_decay": (float, 0.1), "schedule": (_bool, False), "comp_weight": (float, 0.0),
    "milestones": (_floats, (0.2, 0.4, 0.6)), "factors": (_floats, (0.1, 0.05, 0.01)),
    # eval / infer
    "checkpoint": (str, ""), "source": (str, "model"), "eval_samples": (int, 4),
    "image": (str, ""), "trimap": (str, ""), "gt": (str, ""),
    # ablation
    "axis": (str, "kernel_size"),
    # gradient checks
    "op_seeds": (int, 20), "net_seeds": (int, 5), "net_coords": (int, 6),
}

NET_KEYS = ("height", "width", "patch", "dim", "depth", "n_maga_blocks", "heads", "k",
            "branches", "c2", "c4", "c8", "seed")
SOURCES = ("model", "gt", "trimap")
AXES = ("kernel_size", "branch_set", "n_maga_blocks")


# ---------------------------------------------------------------- config

def parse_lines(lines, origin):
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        out[key] = val
    return out


def resolve(raw):
    cfg = {}
    for key, (parse, default) in SCHEMA.items():
        if key not in raw:
            cfg[key] = default
            continue
        try:
            cfg[key] = parse(raw[key])
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
    return cfg


def load_config(path, overrides=(), seed=None):
    with open(path) as f:
        raw = parse_lines(f.read().splitlines(), path)
    raw.update(parse_lines(overrides, "--set"))
    if seed is not None:
        raw["seed"] = str(seed)
    return resolve(raw)


def snapshot_text(cfg):
    return "".join(f"{k}={_fmt(v)}\n" for k, v in cfg.items())


def net_config(cfg):
    return NetConfig(**{k: cfg[k] for k in NET_KEYS})


# ---------------------------------------------------------------- data plumbing

def read_manifest(path):
    """(composite, alpha, trimap) path triples, relative to the manifest's directory."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    base = os.path.dirname(path)
    triples = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise FormatError(f"{path}:{n}: expected 3 paths, got {len(parts)}")
            triples.append(tuple(os.path.join(base, p) for p in parts))
    return triples


def load_pairs(path):
    """Pairs from a manifest (no F/B layers) plus their manifest-relative names."""
    pairs, names = [], []
    base = os.path.dirname(path)
    for img, alpha, tri in read_manifest(path):
        pairs.append(ImagePair(None, None, read_pgm(alpha)[None], read_ppm(img),
                               read_trimap(tri)[None]))
        names.append(os.path.relpath(img, base))
    return pairs, names


def dataset(cfg, n=None, seed=None):
    if cfg["manifest"]:
        return load_pairs(cfg["manifest"])
    n = cfg["n_samples"] if n is None else n
    seed = cfg["seed"] if seed is None else seed
    return make_dataset(n, seed, cfg["height"], cfg["width"]), [f"synth/{i:04d}" for i in range(n)]


def load_model(cfg, ncfg):
    if not cfg["checkpoint"]:
        raise ConfigError("checkpoint is required for source=model")
    params, roles, _ = load_checkpoint(cfg["checkpoint"])
    ref = init_params(ncfg)
    if set(params) != set(ref):
        raise ShapeError(f"checkpoint parameters do not match the config: "
                         f"{sorted(set(params) ^ set(ref))[:5]}")
    for name, v in ref.items():
        if params[name].shape != v.shape:
            raise ShapeError(f"checkpoint {name} has shape {params[name].shape}, config expects {v.shape}")
    return ParamStore(params, roles=roles)


# ---------------------------------------------------------------- subcommands

def _sched(cfg):
    return {"milestones": cfg["milestones"], "factors": cfg["factors"]}


def cmd_gradcheck(cfg, out, log):
    failures = []
    rows = []
    for r in GC.op_suite(seeds=cfg["op_seeds"]):
        rows.append(r)
    ncfg = net_config(cfg)
    for s in range(cfg["net_seeds"]):
        rows.append(GC.check_network(ncfg, cfg["seed"] + s, coords=cfg["net_coords"]))
    with open(os.path.join(out, "gradcheck.csv"), "w") as f:
        f.write("name,max_rel_err,n_checked,tol,passed\n")
        for r in rows:
            f.write(f"{r.name},{r.max_rel_err!r},{r.n_checked},{r.tol!r},{str(r.passed).lower()}\n")
            log(f"{'ok  ' if r.passed else 'FAIL'} {r.name:28s} max rel err {r.max_rel_err:.3e} "
                f"(tol {r.tol:.0e}, {r.n_checked} coords)")
            if not r.passed:
                failures.append(r.name)
    if failures:
        log(f"gradient check failed for: {', '.join(failures)}")
        return EXIT_INVALID
    return EXIT_OK


def cmd_train(cfg, out, log):
    ncfg = net_config(cfg)
    samples, _ = dataset(cfg)
    if cfg["comp_weight"] and any(s.fg is None for s in samples):
        raise InputError("comp_weight needs foreground/background layers (synthetic data only)")
    path = os.path.join(out, "loss.csv")
    with open(path, "w") as f:
        f.write("step,loss\n")
        params, losses = train(samples, ncfg, cfg["steps"], cfg["batch_size"], cfg["lr"],
                               cfg["weight_decay"], cfg["schedule"], cfg["comp_weight"],
                               log=lambda i, v: f.write(f"{i},{v!r}\n"), **_sched(cfg))
    save_checkpoint(os.path.join(out, "checkpoint"), params, config_lines(ncfg))
    if losses:
        log(f"trained {len(losses)} steps: loss {losses[0]:.5f} -> {losses[-1]:.5f}")
    return EXIT_OK


def _evaluate_pairs(cfg, pairs, names, params, ncfg):
    reports = []
    for name, s in zip(names, pairs):
        src = cfg["source"]
        if src == "model":
            pred = predict(s.image, s.trimap, params, ncfg)
        elif src == "gt":
            pred = s.alpha
        else:
            pred = s.trimap
        reports.append((name, M.evaluate(pred, s.alpha, s.trimap)))
    return reports


def cmd_eval(cfg, out, log):
    if cfg["source"] not in SOURCES:
        raise ConfigError(f"source must be one of {SOURCES}, got {cfg['source']!r}")
    ncfg = net_config(cfg)
    params = load_model(cfg, ncfg) if cfg["source"] == "model" else None
    pairs, names = dataset(cfg, n=cfg["eval_samples"])
    reports = _evaluate_pairs(cfg, pairs, names, params, ncfg)
    M.write_csv(os.path.join(out, "metrics.csv"), reports)
    M.write_jsonl(os.path.join(out, "metrics.jsonl"), reports)
    mean = M.mean_report([r for _, r in reports])
    log(f"mean over {len(reports)}: SAD {mean.sad:.5f} MSE {mean.mse:.5f} "
        f"Grad {mean.grad:.5f} Conn {mean.conn:.5f}")
    return EXIT_OK


def ablation_values(axis, depth):
    if axis == "kernel_size":
        return list(KERNEL_SIZES)
    if axis == "branch_set":
        return list(TABLE5_BRANCH_SETS)
    if axis == "n_maga_blocks":
        return list(range(depth + 1))
    raise ConfigError(f"ablation axis must be one of {AXES}, got {axis!r}")


def cmd_ablate(cfg, out, log):
    base = net_config(cfg)
    values = ablation_values(cfg["axis"], base.depth)
    train_set = make_dataset(cfg["n_samples"], cfg["seed"], base.height, base.width)
    eval_set = make_dataset(cfg["eval_samples"], cfg["seed"] + 1, base.height, base.width)
    header = ["axis", "value", "final_loss", "sad", "mse", "grad", "conn", "block_gradcheck"]
    rows = []
    for v in values:
        if cfg["axis"] == "kernel_size":
            ncfg = base.replace(k=v)
        elif cfg["axis"] == "branch_set":
            ncfg = base.replace(branches=v)
        else:
            ncfg = base.replace(n_maga_blocks=v)
        params, losses = train(train_set, ncfg, cfg["steps"], cfg["batch_size"], cfg["lr"],
                               cfg["weight_decay"], cfg["schedule"], cfg["comp_weight"],
                               **_sched(cfg))
        reps = [M.evaluate(predict(s.image, s.trimap, params, ncfg), s.alpha, s.trimap)
                for s in eval_set]
        mean = M.mean_report(reps)
        gc = GC.check_block(MagaConfig(dim=4, k=ncfg.k, branches=ncfg.branches), cfg["seed"],
                            maga=ncfg.n_maga_blocks > 0)
        label = "+".join(v) if isinstance(v, tuple) else str(v)
        rows.append([cfg["axis"], label, losses[-1] if losses else float("nan"),
                     mean.sad, mean.mse, mean.grad, mean.conn, gc.max_rel_err])
        log(f"{cfg['axis']}={label}: loss {rows[-1][2]:.5f} SAD {mean.sad:.5f} MSE {mean.mse:.5f} "
            f"gradcheck {gc.max_rel_err:.1e}")
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return EXIT_OK


def cmd_synth(cfg, out, log):
    pairs = make_dataset(cfg["n_samples"], cfg["seed"], cfg["height"], cfg["width"])
    lines = []
    for i, p in enumerate(pairs):
        check_pair(p)
        names = (f"{i:04d}_image.ppm", f"{i:04d}_alpha.pgm", f"{i:04d}_trimap.pgm")
        write_ppm(os.path.join(out, names[0]), p.image)
        write_pgm(os.path.join(out, names[1]), p.alpha)
        write_trimap(os.path.join(out, names[2]), p.trimap)
        lines.append(" ".join(names))
    with open(os.path.join(out, "manifest.txt"), "w") as f:
        f.write("".join(line + "\n" for line in lines))
    log(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_infer(cfg, out, log):
    for key in ("image", "trimap"):
        if not cfg[key]:
            raise ConfigError(f"infer needs {key}=PATH")
    image, trimap = read_ppm(cfg["image"]), read_trimap(cfg["trimap"])
    if image.shape[1:] != trimap.shape:
        raise InputError(f"image {image.shape[1:]} and trimap {trimap.shape} sizes differ")
    ncfg = net_config(cfg)
    if image.shape[1:] != (ncfg.height, ncfg.width):
        raise InputError(f"image is {image.shape[1]}x{image.shape[2]}, "
                         f"config expects {ncfg.height}x{ncfg.width}")
    alpha = predict(image, trimap, load_model(cfg, ncfg), ncfg)[0]
    write_pgm(os.path.join(out, "alpha.pgm"), alpha)
    if cfg["gt"]:
        rep = M.evaluate(alpha, read_pgm(cfg["gt"]), trimap)
        M.write_csv(os.path.join(out, "metrics.csv"), [(cfg["image"], rep)])
        log(f"SAD {rep.sad:.5f} MSE {rep.mse:.5f} Grad {rep.grad:.5f} Conn {rep.conn:.5f}")
    return EXIT_OK


COMMANDS = {"gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "synth": cmd_synth, "infer": cmd_infer}


def build_parser():
    ap = argparse.ArgumentParser(prog="maga", description="MAGA matting toolkit")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="flat key=value config file")
    ap.add_argument("--set", action="append", default=[], metavar="K=V", help="override a key")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, default=None)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)

    def log(msg):
        print(msg, flush=True)

    try:
        cfg = load_config(args.config, args.set, args.seed)
        if args.command in ("train", "ablate", "gradcheck"):
            net_config(cfg)
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, SNAPSHOT), "w") as f:
            f.write(snapshot_text(cfg))
        return COMMANDS[args.command](cfg, args.out, log)
    except (ConfigError, ShapeError, InputError, FormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
