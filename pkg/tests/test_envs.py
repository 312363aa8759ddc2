import numpy as np
import pytest
from hypothesis import given, strategies as st

from coda_forge import envs, lcm
from coda_forge.envs import Nav2dConfig


def test_decoupled_step():
    sp, r, done = envs.nav2d_step(np.array([0.2, 0.2]), np.array([1.0, 0.0]))
    assert np.allclose(sp, [0.25, 0.2]) and r == -1.0 and not done


def test_coupled_step():
    sp, _, _ = envs.nav2d_step(np.array([0.8, 0.8]), np.array([1.0, 0.0]))
    assert np.allclose(sp, [0.83, 0.82])


def test_goal_reward():
    sp, r, done = envs.nav2d_step(np.array([0.85, 0.85]), np.array([0.5, 0.5]))
    assert np.linalg.norm(sp - 0.9) <= 0.1 and r == 0.0 and done


@pytest.mark.parametrize("s, a", [((1.1, 0.5), (0, 0)), ((0.5, -0.1), (0, 0)), ((0.5, 0.5), (1.5, 0))])
def test_out_of_box_rejected(s, a):
    with pytest.raises(ValueError):
        envs.nav2d_step(np.array(s), np.array(a))


def test_clipped_at_walls():
    sp = envs.nav2d_next(np.array([0.99, 0.01]), np.array([1.0, -1.0]))
    assert sp.tolist() == [1.0, 0.0]


@pytest.mark.parametrize("s, expected", [((0.2, 0.3), envs.BASE_MASK), ((0.6, 0.7), envs.DENSE_MASK),
                                         ((0.5, 0.5), envs.BASE_MASK), ((0.5, 0.9), envs.BASE_MASK)])
def test_mask_regions(s, expected):
    assert np.array_equal(envs.nav2d_mask(np.array(s)), expected)


@given(st.floats(0, 1), st.floats(0, 1))
def test_batch_mask_matches_pointwise(x, y):
    s = np.array([[x, y], [y, x]])
    batch = envs.Nav2dMask().batch(s, np.zeros((2, 2)))
    assert all(np.array_equal(batch[i], envs.nav2d_mask(s[i])) for i in range(2))


@given(st.floats(0.02, 0.98), st.floats(0.02, 0.98), st.floats(-1, 1), st.floats(-1, 1))
def test_jacobian_edges_are_within_mask(x, y, dx, dy):
    s, a = np.array([x, y]), np.array([dx, dy])
    if abs(x - 0.5) < 1e-3 or abs(y - 0.5) < 1e-3:
        return
    jm = lcm.jacobian_mask(envs.nav2d_next, s, a, bounds=[(0, 1), (0, 1), (-1, 1), (-1, 1)])
    sp = envs.nav2d_next(s, a)
    if np.any(sp <= 1e-3) or np.any(sp >= 1 - 1e-3):
        return   # clipping zeroes sensitivities
    assert np.all(jm.mask <= envs.nav2d_mask(s))
    # the action columns always match exactly
    assert np.array_equal(jm.mask[2:], envs.nav2d_mask(s)[2:])


def test_config_validation():
    with pytest.raises(ValueError):
        Nav2dConfig(coupling=((1, 0), (0, 1)))
    with pytest.raises(ValueError):
        Nav2dConfig(goal_radius=0.6)
    with pytest.raises(ValueError):
        Nav2dConfig(transition_noise=-0.1)


def test_noise_requires_rng_and_stays_in_box(rng):
    cfg = Nav2dConfig(transition_noise=0.05)
    with pytest.raises(ValueError):
        envs.nav2d_sample_next(np.array([0.5, 0.5]), np.zeros(2), cfg)
    s = rng.random((1000, 2))
    sp = envs.nav2d_sample_next(s, np.zeros((1000, 2)), cfg, rng)
    assert sp.min() >= 0 and sp.max() <= 1
    assert 0.03 < np.std(sp - s) < 0.07


def test_empirical_data_geometry():
    ds = envs.gen_emp_data(2000, seed=0)
    assert len(ds) == 4000 and set(ds.tags) == {"real"}
    lr, bt = ds.s[:2000], ds.s[2000:]
    assert np.all(lr[:, 1] <= 0.25) and np.all(envs.nav2d_next(lr, ds.a[:2000])[:, 1] <= 0.25)
    assert np.all(bt[:, 0] >= 0.75)
    center = np.all((ds.s > 0.3) & (ds.s < 0.7), axis=1) & ~envs.in_bands(ds.s)
    assert not center.any()
    assert np.all(envs.in_bands(ds.s))
    assert np.array_equal(ds.r, envs.nav2d_reward(ds.s, ds.a, ds.s_next))


def test_empirical_data_deterministic():
    assert envs.gen_emp_data(300, seed=5) == envs.gen_emp_data(300, seed=5)
    assert envs.gen_emp_data(300, seed=5) != envs.gen_emp_data(300, seed=6)


def test_chainworld_tables_and_joint():
    cfg = envs.random_chainworld(3, seed=0)
    P = envs.chainworld_true_P(cfg)
    assert P.shape == (8, 8, 8)
    assert np.allclose(P.sum(axis=2), 1.0)
    # entry check against the per-factor product at one (s, a, s')
    s, a, sp = (1, 0, 1), (0, 1, 1), (0, 1, 1)
    sa = np.array(s + a, float)
    expect = np.prod([cfg.tables[i][cfg.parent_config(i, sa)][sp[i]] for i in range(3)])
    si = int("".join(map(str, s)), 2)
    ai = int("".join(map(str, a)), 2)
    spi = int("".join(map(str, sp)), 2)
    assert P[si, ai, spi] == pytest.approx(expect, abs=1e-15)


def test_chainworld_rejects_bad_tables():
    with pytest.raises(ValueError):
        envs.ChainworldConfig(1, (2,), (2,), [np.array([[0.5, 0.6]] * 4)])


def test_deterministic_chainworld_reproduced_exactly():
    cfg = envs.ChainworldConfig(2)
    cfg.tables = [np.eye(2)[np.arange(4) % 2], np.eye(2)[(np.arange(8) // 2) % 2]]
    ds = envs.chainworld_sample(cfg, N=16, seed=0, even_allocation=True)
    for t in ds:
        sa = np.concatenate([t.s, t.a])
        for i in range(2):
            row = cfg.tables[i][cfg.parent_config(i, sa)]
            assert t.s_next[i] == np.argmax(row)


def test_even_allocation_visits_every_pair():
    cfg = envs.random_chainworld(2, seed=1)
    ds = envs.chainworld_sample(cfg, N=32, seed=0, even_allocation=True)
    keys, counts = np.unique(ds.sa, axis=0, return_counts=True)
    assert len(keys) == 16 and np.all(counts == 2)


def test_icy_rooms_same_mask_different_displacement():
    a = np.array([0.5, 0.5])
    dry = envs.icy_rooms_step(np.array([0.2, 0.5]), a) - np.array([0.2, 0.5])
    icy = envs.icy_rooms_step(np.array([0.7, 0.5]), a) - np.array([0.7, 0.5])
    assert np.allclose(icy, 3 * dry)
    m = envs.IcyRoomsMask()
    assert np.array_equal(m(np.array([0.2, 0.5]), a), m(np.array([0.7, 0.5]), a))
    same = m.union([(np.array([0.2, 0.5]), a), (np.array([0.3, 0.5]), a)])
    cross = m.union([(np.array([0.2, 0.5]), a), (np.array([0.7, 0.5]), a)])
    assert len(lcm.components(same)) == 2 and len(lcm.components(cross)) == 1
