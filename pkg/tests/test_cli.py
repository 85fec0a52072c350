import os

import numpy as np
import pytest

import oracles as O
from maga import cli
from maga import metrics as M
from maga import tensor as T
from maga.data import make_dataset
from maga.io import read_pgm, read_trimap, write_pgm
from maga.tensor import ConfigError

SMALL = """# desk-scale smoke config
height=16
width=16
patch=4
dim=8
depth=2
n_maga_blocks=1
c2=4
c4=4
c8=4
n_samples=2   # tiny
steps=3
batch_size=2
eval_samples=2
op_seeds=1
net_seeds=1
net_coords=2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return str(p)


def run(*argv):
    return cli.main([str(a) for a in argv])


def files(d):
    out = {}
    for root, _, names in os.walk(d):
        for n in names:
            full = os.path.join(root, n)
            out[os.path.relpath(full, d)] = open(full, "rb").read()
    return out


def rerun_matches(out1, out2, cmd):
    assert run(cmd, "--config", os.path.join(out1, cli.SNAPSHOT), "--out", out2) == 0
    a, b = files(out1), files(out2)
    assert sorted(a) == sorted(b)
    for k in a:
        assert a[k] == b[k], k


# ---------------------------------------------------------------- config

def test_parse_lines_comments_and_errors():
    assert cli.parse_lines(["# c", "", "dim = 8  # trailing", "k=5"], "x") == {"dim": "8", "k": "5"}
    with pytest.raises(ConfigError):
        cli.parse_lines(["nonsense=1"], "x")
    with pytest.raises(ConfigError):
        cli.parse_lines(["dim 8"], "x")


def test_overrides_and_seed(cfg_path):
    cfg = cli.load_config(cfg_path, ["dim=16", "branches=h+v"], seed=9)
    assert cfg["dim"] == 16 and cfg["seed"] == 9 and cfg["branches"] == ("h", "v")
    assert cfg["steps"] == 3 and cfg["lr"] == 1e-3  # file value and default
    with pytest.raises(ConfigError):
        cli.load_config(cfg_path, ["dim=eight"])


def test_snapshot_round_trips(cfg_path, tmp_path):
    cfg = cli.load_config(cfg_path, ["schedule=true", "milestones=0.5,0.9"])
    snap = tmp_path / "s.txt"
    snap.write_text(cli.snapshot_text(cfg))
    assert cli.load_config(str(snap)) == cfg


def test_exit_codes(cfg_path, tmp_path):
    assert run("train", "--config", cfg_path, "--set", "bogus=1", "--out", tmp_path / "a") == 1
    assert run("train", "--config", cfg_path, "--set", "patch=3", "--out", tmp_path / "b") == 1
    assert run("train", "--config", cfg_path, "--set", f"manifest={tmp_path}/none.txt",
               "--out", tmp_path / "c") == 2
    assert run("train", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "d") == 2
    assert run("ablate", "--config", cfg_path, "--set", "axis=depth", "--out", tmp_path / "e") == 1


def test_missing_manifest_named(cfg_path, tmp_path, capsys):
    path = f"{tmp_path}/none.txt"
    run("train", "--config", cfg_path, "--set", f"manifest={path}", "--out", tmp_path / "o")
    assert path in capsys.readouterr().err


# ---------------------------------------------------------------- subcommands

def test_synth_layout_and_rerun(cfg_path, tmp_path):
    out = tmp_path / "s1"
    assert run("synth", "--config", cfg_path, "--set", "n_samples=4", "--seed", 7, "--out", out) == 0
    names = sorted(os.listdir(out))
    data = [n for n in names if n.endswith((".ppm", ".pgm"))]
    assert len(data) == 12
    assert len((out / "manifest.txt").read_text().splitlines()) == 4
    assert set(names) - set(data) == {"manifest.txt", cli.SNAPSHOT}
    pairs, _ = cli.load_pairs(str(out / "manifest.txt"))
    ref = make_dataset(4, 7, 16, 16)
    for p, r in zip(pairs, ref):
        # alpha is generated on the 8-bit grid; the composite is quantised when written
        assert np.array_equal(p.alpha, r.alpha)
        assert np.array_equal(p.image, np.round(r.image * 255) / 255)
        assert np.array_equal(p.trimap, r.trimap)
    rerun_matches(str(out), str(tmp_path / "s2"), "synth")


def test_train_deterministic_and_rerun(cfg_path, tmp_path):
    a, b = tmp_path / "t1", tmp_path / "t2"
    assert run("train", "--config", cfg_path, "--out", a) == 0
    lines = (a / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 4
    assert os.path.exists(a / "checkpoint" / "manifest.txt")
    rerun_matches(str(a), str(b), "train")


def test_train_lr_zero_flat(cfg_path, tmp_path):
    assert run("train", "--config", cfg_path, "--set", "lr=0", "--set", "n_samples=1",
               "--set", "batch_size=1", "--out", tmp_path) == 0
    losses = {ln.split(",")[1] for ln in (tmp_path / "loss.csv").read_text().splitlines()[1:]}
    assert len(losses) == 1


def test_train_from_manifest(cfg_path, tmp_path):
    run("synth", "--config", cfg_path, "--out", tmp_path / "d")
    man = tmp_path / "d" / "manifest.txt"
    assert run("train", "--config", cfg_path, "--set", f"manifest={man}", "--out", tmp_path / "t") == 0


@pytest.fixture
def trained(cfg_path, tmp_path):
    out = tmp_path / "trained"
    assert run("train", "--config", cfg_path, "--out", out) == 0
    return str(out / "checkpoint")


def test_eval_sources(cfg_path, tmp_path, trained):
    o = tmp_path / "gt"
    assert run("eval", "--config", cfg_path, "--set", "source=gt", "--out", o) == 0
    rows = M.read_csv(o / "metrics.csv")
    assert [r["path"] for r in rows] == ["synth/0000", "synth/0001", "mean"]
    assert all(r[k] == 0.0 for r in rows for k in ("sad", "mse", "grad", "conn"))

    o = tmp_path / "tri"
    assert run("eval", "--config", cfg_path, "--set", "source=trimap", "--out", o) == 0
    rows = M.read_csv(o / "metrics.csv")
    for r, p in zip(rows, make_dataset(2, 0, 16, 16)):
        t, a = p.trimap[0], p.alpha[0]
        assert r["sad"] > 0
        assert r["sad"] == O.sad_loops(t.tolist(), a.tolist(), (t == 0.5).tolist())

    o = tmp_path / "model"
    assert run("eval", "--config", cfg_path, "--set", f"checkpoint={trained}", "--out", o) == 0
    rows = M.read_csv(o / "metrics.csv")
    for k in ("sad", "mse", "grad", "conn", "n_unknown"):
        assert rows[-1][k] == pytest.approx((rows[0][k] + rows[1][k]) / 2, rel=1e-15)
    rerun_matches(str(o), str(tmp_path / "model2"), "eval")


def test_eval_checkpoint_mismatch(cfg_path, tmp_path, trained):
    assert run("eval", "--config", cfg_path, "--set", f"checkpoint={trained}", "--set", "dim=16",
               "--out", tmp_path / "x") == 1
    assert run("eval", "--config", cfg_path, "--set", "source=guess", "--out", tmp_path / "y") == 1


def test_infer(cfg_path, tmp_path, trained):
    run("synth", "--config", cfg_path, "--out", tmp_path / "d")
    d = tmp_path / "d"
    args = ["--set", f"checkpoint={trained}", "--set", f"image={d}/0000_image.ppm",
            "--set", f"trimap={d}/0000_trimap.pgm", "--set", f"gt={d}/0000_alpha.pgm"]
    o1 = tmp_path / "i1"
    assert run("infer", "--config", cfg_path, *args, "--out", o1) == 0
    alpha = read_pgm(o1 / "alpha.pgm")
    assert alpha.shape == (16, 16)
    assert os.path.exists(o1 / "metrics.csv")
    rerun_matches(str(o1), str(tmp_path / "i2"), "infer")
    # a trimap with a stray grey level is rejected
    bad = read_trimap(d / "0000_trimap.pgm")
    write_pgm(tmp_path / "bad.pgm", np.where(bad == 0.5, 0.3, bad))
    args[5] = f"trimap={tmp_path}/bad.pgm"
    assert run("infer", "--config", cfg_path, *args, "--out", tmp_path / "i3") == 1


@pytest.mark.parametrize("axis,n", [("kernel_size", 3), ("branch_set", 5), ("n_maga_blocks", 3)])
def test_ablate_rows(cfg_path, tmp_path, axis, n):
    o = tmp_path / axis
    assert run("ablate", "--config", cfg_path, "--set", f"axis={axis}", "--set", "steps=1",
               "--set", "eval_samples=1", "--out", o) == 0
    lines = (o / "ablation.csv").read_text().splitlines()
    assert len(lines) == n + 1
    if axis == "kernel_size":
        rerun_matches(str(o), str(tmp_path / "again"), "ablate")


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_lists_every_op_once(cfg_path, tmp_path):
    assert run("gradcheck", "--config", cfg_path, "--out", tmp_path / "g") == 0
    names = [ln.split(",")[0] for ln in (tmp_path / "g" / "gradcheck.csv").read_text().splitlines()[1:]]
    ops = [n for n in names if not n.startswith("network")]
    assert ops == sorted(T.OPS)
    assert names.count("network[seed=0]") == 1
    rerun_matches(str(tmp_path / "g"), str(tmp_path / "g2"), "gradcheck")


def test_gradcheck_negative_control(cfg_path, tmp_path, monkeypatch, capsys):
    orig = T.OPS["sigmoid"].backward
    monkeypatch.setattr(T.OPS["sigmoid"], "backward", lambda self, g: tuple(1.01 * x for x in orig(self, g)))
    assert run("gradcheck", "--config", cfg_path, "--out", tmp_path) == 1
    out = capsys.readouterr().out
    assert "FAIL sigmoid" in out
    assert "gradient check failed for: " in out and "sigmoid" in out.splitlines()[-1]
