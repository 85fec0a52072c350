import numpy as np
import pytest

import oracles as O
from maga.data import (check_pair, composite, gen_hairline_foreground, make_dataset, make_pair,
                       trimap_from_alpha)
from maga.net import InputError


def test_composite_identities():
    rng = np.random.default_rng(0)
    F, B = rng.random((3, 5, 6)), rng.random((3, 5, 6))
    assert np.array_equal(composite(F, B, np.ones((1, 5, 6))), F)
    assert np.array_equal(composite(F, B, np.zeros((1, 5, 6))), B)
    half = composite(np.ones((3, 2, 2)), np.zeros((3, 2, 2)), np.full((1, 2, 2), 0.5))
    assert np.array_equal(half, np.full((3, 2, 2), 0.5))


def test_composite_errors():
    with pytest.raises(InputError):
        composite(np.ones((3, 2, 2)), np.zeros((3, 2, 2)), np.full((1, 2, 2), 1.5))
    with pytest.raises(InputError):
        composite(np.ones((3, 2, 2)), np.zeros((3, 3, 2)), np.ones((1, 2, 2)))


def test_trimap_solid_regions():
    a = np.zeros((20, 20))
    a[2:18, 2:18] = 1.0
    t = trimap_from_alpha(a)
    assert np.all(t[5:15, 5:15] == 1.0)
    assert np.all(trimap_from_alpha(np.zeros((10, 10))) == 0.0)


def test_trimap_diagonal_stroke_all_unknown():
    a = np.zeros((16, 16))
    for i in range(16):
        a[i, i] = 1.0
        if i + 1 < 16:
            a[i, i + 1] = 0.5  # anti-aliased edge
    t = trimap_from_alpha(a)
    assert np.array_equal(t, np.array(O.trimap_loops(a.tolist())))
    # stroke and its neighbourhood are unknown
    for i in range(16):
        assert t[i, i] == 0.5
        for d in (-3, 3):
            if 0 <= i + d < 16:
                assert t[i, i + d] == 0.5


@pytest.mark.parametrize("seed", range(8))
def test_trimap_matches_loop_oracle_on_synthetic(seed):
    a = make_pair(seed, 0, 16, 16).alpha[0]
    assert np.array_equal(trimap_from_alpha(a), np.array(O.trimap_loops(a.tolist())))


def test_trimap_partition_and_cores():
    for p in make_dataset(6, 3):
        t = p.trimap
        n = (t == 0).sum() + (t == 0.5).sum() + (t == 1).sum()
        assert n == t.size
        assert np.all(p.alpha[t == 1.0] >= 0.99)
        assert np.all(p.alpha[t == 0.0] <= 0.01)


def test_inverse_compositing_on_cores():
    for p in make_dataset(6, 4):
        t = p.trimap[0]
        assert np.array_equal(p.image[:, t == 1.0], p.fg[:, t == 1.0])
        assert np.array_equal(p.image[:, t == 0.0], p.bg[:, t == 0.0])


def test_every_pair_passes_invariant():
    for p in make_dataset(10, 9):
        assert check_pair(p)
        assert np.max(np.abs(p.image - (p.alpha * p.fg + (1 - p.alpha) * p.bg))) <= 1e-12
        assert p.fg.shape == p.bg.shape == p.image.shape == (3, 32, 32)
        assert p.alpha.shape == p.trimap.shape == (1, 32, 32)


def test_determinism():
    a, b = make_dataset(3, 11), make_dataset(3, 11)
    for p, q in zip(a, b):
        for f in ("fg", "bg", "alpha", "image", "trimap"):
            assert getattr(p, f).tobytes() == getattr(q, f).tobytes()
    assert make_pair(11, 2).image.tobytes() == a[2].image.tobytes()  # index-addressable
    assert make_pair(12, 0).image.tobytes() != a[0].image.tobytes()


def test_foreground_generator():
    F1, a1 = gen_hairline_foreground(0, 32, 32, 2)
    F2, a2 = gen_hairline_foreground(0, 32, 32, 2)
    assert np.array_equal(F1, F2) and np.array_equal(a1, a2)
    assert np.any((a1 > 0) & (a1 < 1))
    with pytest.raises(ValueError):
        gen_hairline_foreground(0, 32, 32, 0)


def test_one_strand_extends_body():
    # seeds share the body draws, so strands only add support
    rng_draws = np.random.Generator(np.random.PCG64(5))
    _, a1 = gen_hairline_foreground(None, 32, 32, 1, rng=rng_draws)
    assert a1.max() == 1.0 and (a1 > 0).sum() > 0


def test_unknown_fraction_default_range():
    fr = [float(np.mean(make_pair(s, 0).trimap == 0.5)) for s in range(100)]
    assert 0.0 < min(fr) and max(fr) < 0.6


def test_dataset_size_validation():
    with pytest.raises(ValueError):
        make_dataset(0, 0)
