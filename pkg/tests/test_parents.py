import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coda_forge import envs, parents
from coda_forge.core import Dataset, FactorSpec
from coda_forge.lcm import ParentGraph
from coda_forge.parents import GMM, ParentSamples

SPEC = envs.NAV2D_SPEC


def _random_gmm(K, d, seed):
    r = np.random.default_rng(seed)
    A = r.normal(size=(K, d, d))
    covs = A @ np.swapaxes(A, 1, 2) + 0.3 * np.eye(d)
    return GMM(r.dirichlet(np.ones(K)), r.normal(size=(K, d)), covs)


def _direct_density(g, x):
    """Non-log-space reference: sum_k w_k (2 pi)^(-d/2) |S|^(-1/2) exp(-q/2)."""
    d = g.dim
    tot = np.zeros(len(x))
    for w, mu, S in zip(g.weights, g.means, g.covs):
        dev = x - mu
        q = np.einsum("ni,ij,nj->n", dev, np.linalg.inv(S), dev)
        tot += w * np.exp(-0.5 * q) / np.sqrt((2 * np.pi) ** d * np.linalg.det(S))
    return tot


def test_logpdf_standard_normal():
    g = GMM(np.array([1.0]), np.zeros((1, 2)), np.eye(2)[None])
    assert parents.gmm_logpdf(g, np.zeros(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)


def test_logpdf_identical_components_collapse():
    one = _random_gmm(1, 3, 0)
    two = GMM(np.array([0.5, 0.5]), np.repeat(one.means, 2, 0), np.repeat(one.covs, 2, 0))
    x = np.random.default_rng(1).normal(size=(20, 3))
    assert np.allclose(parents.gmm_logpdf(one, x), parents.gmm_logpdf(two, x), atol=1e-12)


def test_logpdf_matches_direct_summation():
    g = _random_gmm(3, 2, 5)
    x = np.random.default_rng(2).normal(size=(100, 2))
    assert np.allclose(np.exp(parents.gmm_logpdf(g, x)), _direct_density(g, x), rtol=1e-10, atol=0)


def test_em_single_gaussian_is_moment_match(rng):
    x = rng.multivariate_normal([1.0, -2.0], [[1.0, 0.3], [0.3, 0.5]], size=4000)
    g = parents.fit_gmm_em(x, K=1, seed=0)
    se = x.std(axis=0) / np.sqrt(len(x) * 0.9)
    assert np.all(np.abs(g.means[0] - x.mean(axis=0)) < 3 * se)
    assert np.allclose(g.covs[0], np.cov(x.T), atol=0.08)
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_em_separates_clusters(rng):
    a = rng.normal([-5, 0], 0.5, size=(500, 2))
    b = rng.normal([5, 0], 0.5, size=(500, 2))
    g = parents.fit_gmm_em(np.concatenate([a, b]), K=2, seed=1)
    for cluster in (a, b):
        lp = parents._component_logpdf(cluster, g.means, g.covs) + np.log(g.weights)
        resp = np.exp(lp - lp.max(axis=1, keepdims=True))
        resp /= resp.sum(axis=1, keepdims=True)
        own = np.argmax(resp.mean(axis=0))
        assert resp[:, own].min() >= 0.99
        # the matched component equals the per-cluster MLE
        assert np.allclose(g.means[own], cluster.mean(axis=0), atol=0.1)


def test_em_more_components_fit_nav2d_better():
    ds = envs.gen_emp_data(3000, seed=0)
    x = ds.sa[:, [0, 2]]
    held = envs.gen_emp_data(1000, seed=1).sa[:, [0, 2]]
    g32 = parents.fit_gmm_em(x, K=32, seed=0, max_iter=100)
    g1 = parents.fit_gmm_em(x, K=1, seed=0)
    assert parents.gmm_logpdf(g32, held).mean() >= parents.gmm_logpdf(g1, held).mean()
    assert np.all(np.linalg.eigvalsh(g32.covs) > 0)


def test_em_needs_k_rows():
    with pytest.raises(ValueError):
        parents.fit_gmm_em(np.zeros((3, 2)), K=4)


def test_em_prunes_dead_components():
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]]), 50, axis=0)
    g = parents.fit_gmm_em(x, K=4, seed=0)
    assert g.K <= 4 and g.weights.sum() == pytest.approx(1.0)
    assert np.all(g.weights >= parents.PRUNE_WEIGHT)


def test_condition_analytic():
    g = GMM(np.array([1.0]), np.zeros((1, 2)), np.array([[[1.0, 0.5], [0.5, 1.0]]]))
    c = parents.condition_gmm(g, [0], [1.0])
    assert abs(c.means[0, 0] - 0.5) < 1e-12 and abs(c.covs[0, 0, 0] - 0.75) < 1e-12


def test_condition_empty_is_identity():
    g = _random_gmm(3, 3, 0)
    assert parents.condition_gmm(g, [], []) is g


def test_condition_mirror_symmetric_weights():
    g = GMM(np.array([0.5, 0.5]), np.array([[-1.0, 2.0], [1.0, -2.0]]), np.repeat(np.eye(2)[None], 2, 0))
    c = parents.condition_gmm(g, [0], [0.0])
    assert c.weights[0] == pytest.approx(0.5, abs=1e-15)


@given(st.integers(0, 10 ** 6), st.floats(-3, 3))
def test_condition_matches_block_formula(seed, v):
    g = _random_gmm(1, 3, seed)
    c = parents.condition_gmm(g, [1], [v])
    S, mu = g.covs[0], g.means[0]
    u = [0, 2]
    Suo, Soo = S[np.ix_(u, [1])], S[1, 1]
    assert np.allclose(c.means[0], mu[u] + Suo[:, 0] * (v - mu[1]) / Soo, atol=1e-9)
    assert np.allclose(c.covs[0], S[np.ix_(u, u)] - Suo @ Suo.T / Soo, atol=1e-9)


def test_condition_singular_block():
    g = GMM(np.array([1.0]), np.zeros((1, 2)), np.array([[[0.0, 0.0], [0.0, 1.0]]]))
    c = parents.condition_gmm(g, [0], [0.0])      # jitter rescues it
    assert np.isfinite(c.means).all()
    bad = GMM(np.array([1.0]), np.zeros((1, 2)), np.array([[[-1.0, 0.0], [0.0, 1.0]]]))
    with pytest.raises(np.linalg.LinAlgError):
        parents.condition_gmm(bad, [0], [0.0])
    with pytest.raises(ValueError):
        parents.condition_gmm(g, [0], [np.nan])


def test_batched_conditional_sampler_matches_condition(rng):
    g = _random_gmm(3, 3, 11)
    v = np.array([0.4, -0.2])
    c = parents.condition_gmm(g, [0, 2], v)
    draws = parents.sample_conditional(g, [0, 2], np.tile(v, (40000, 1)), rng)
    se = np.sqrt(c.cov()[0, 0] / len(draws))
    assert abs(draws.mean() - c.mean()[0]) < 4 * se
    assert draws.var() == pytest.approx(c.cov()[0, 0], rel=0.05)


def test_gmm_json_round_trip():
    g = _random_gmm(2, 2, 3)
    back = GMM.from_dict(g.to_dict())
    assert np.array_equal(back.covs, g.covs) and np.array_equal(back.weights, g.weights)


def _nav_models(seed=0):
    ds = envs.gen_emp_data(2000, seed=seed)
    graph = ParentGraph(envs.NAV2D_PARENTS)
    return ds, parents.fit_parent_models(ds.sa, graph, K=8, seed=seed, max_iter=60)


def test_mocoda_disjoint_blocks_decorrelate(rng):
    ds, models = _nav_models()
    assert abs(np.corrcoef(ds.s.T)[0, 1]) > 0.3      # the empirical data couple x and y
    ps = parents.sample_mocoda(models, SPEC, 20000, rng)
    assert ps.source == "mocoda" and ps.rows.shape == (20000, 4)
    assert abs(np.corrcoef(ps.rows[:, 0], ps.rows[:, 1])[0, 1]) < 0.05
    back = parents.ParentModels.from_json(models.to_json())
    assert back.graph == models.graph and len(back.gmms) == 2


def test_mocoda_overlapping_sets_share_dims(rng):
    # parent sets (g, o1, a) and (g, o2, a): g and a come from the first GMM only
    x = rng.normal(size=(3000, 4)) + np.array([0, 1, 2, 3])
    x[:, 1] += x[:, 0]
    x[:, 2] += x[:, 0]
    spec = FactorSpec.scalar(["g", "o1", "o2"], ["a"], [(-10, 10)] * 4)
    graph = ParentGraph(((0, 1, 3), (0, 2, 3), (0,)))
    models = parents.fit_parent_models(x, graph, K=1, seed=0)
    assert len(models.gmms) == 3
    ps = parents.sample_mocoda(models, spec, 20000, rng)
    assert np.isfinite(ps.rows).all()
    # o2 is drawn conditionally on the shared g, so their dependence survives
    assert np.corrcoef(ps.rows[:, 0], ps.rows[:, 2])[0, 1] > 0.5
    assert abs(np.corrcoef(ps.rows[:, 1], ps.rows[:, 2])[0, 1] - np.corrcoef(x[:, 1], x[:, 2])[0, 1]) < 0.05


def test_mocoda_single_global_set_is_plain_gmm(rng):
    g = _random_gmm(2, 4, 9)
    models = parents.ParentModels(ParentGraph(((0, 1, 2, 3),) * 2), [g])
    ps = parents.sample_mocoda(models, SPEC, 30000, rng)
    assert np.allclose(ps.rows.mean(axis=0), g.mean(), atol=4 * np.sqrt(np.diag(g.cov()).max() / 30000))
    assert np.allclose(np.cov(ps.rows.T), g.cov(), atol=0.15 * np.abs(g.cov()).max())


def test_mocoda_edge_cases(rng):
    _, models = _nav_models()
    assert len(parents.sample_mocoda(models, SPEC, 0, rng)) == 0
    partial = parents.ParentModels(ParentGraph(((0, 2),)), models.gmms[:1])
    with pytest.raises(ValueError, match="covered"):
        parents.sample_mocoda(partial, SPEC, 5, rng)


def _naive_kde(ref, h, q):
    d = ref.shape[1]
    out = []
    for x in q:
        k = np.exp(-0.5 * ((ref - x) ** 2).sum(axis=1) / h ** 2) / (2 * np.pi * h * h) ** (d / 2)
        out.append(np.log(k.mean()))
    return np.array(out)


def test_kde_single_point_and_tail():
    ref = np.array([[0.3, 0.4]])
    assert parents.kde_log_score(ref, 0.05, ref)[0] == pytest.approx(-np.log(2 * np.pi * 0.05 ** 2), abs=1e-12)
    assert parents.kde_log_score(ref, 0.05, np.array([[0.3 + 21 * 0.05, 0.4]]))[0] < -100


def test_kde_matches_naive_sum(rng):
    ref = rng.random((300, 2))
    q = rng.random((50, 2))
    assert np.allclose(parents.kde_log_score(ref, 0.05, q, chunk=7), _naive_kde(ref, 0.05, q), atol=1e-9)


def test_kde_uniform_density(rng):
    ref = rng.random((1000, 2))
    q = rng.uniform(0.2, 0.8, (200, 2))
    dens = np.exp(parents.kde_log_score(ref, 0.05, q))
    # pointwise sd is sqrt(1 / (4 pi h^2 N)) ~ 0.18, so ~9% of queries fall outside +-30%
    assert np.mean((dens > 0.7) & (dens < 1.3)) >= 0.85
    assert abs(dens.mean() - 1.0) < 0.1     # shared reference draw: ~4% sd from the region count alone


def test_kde_argument_checks():
    with pytest.raises(ValueError):
        parents.kde_log_score(np.zeros((0, 2)), 0.05, np.zeros((1, 2)))
    with pytest.raises(ValueError):
        parents.kde_log_score(np.zeros((1, 2)), 0.0, np.zeros((1, 2)))


def _samples(rows):
    return ParentSamples(rows, "mocoda", SPEC)


def _bimodal(rng, n=20000):
    big = rng.uniform([0.1, 0.1], [0.3, 0.3], size=(int(0.9 * n), 2))
    small = rng.uniform([0.7, 0.7], [0.9, 0.9], size=(n - len(big), 2))
    s = np.concatenate([big, small])
    s = s[rng.permutation(len(s))]
    return _samples(np.concatenate([s, rng.uniform(-1, 1, (n, 2))], axis=1))


def _mode_ratio(rows):
    left = (rows[:, 0] < 0.5).sum()
    return left / (len(rows) - left)


def test_prune_uniform_input_keeps_target(rng):
    rows = np.concatenate([rng.random((20000, 2)), rng.uniform(-1, 1, (20000, 2))], axis=1)
    out = parents.prune_to_uniform(_samples(rows), target_size=5000, rng=rng)
    assert abs(len(out) - 5000) <= 750
    assert out.source == "mocoda_u"


def test_prune_flattens_bimodal(rng):
    out = parents.prune_to_uniform(_bimodal(rng), target_size=3000, rng=rng)
    assert 0.8 <= _mode_ratio(out.rows) <= 1.25


def test_prune_high_floor_is_uniform_thinning(rng):
    ps = _bimodal(rng)
    out = parents.prune_to_uniform(ps, target_size=5000, floor_density=1e6, rng=rng)
    assert abs(len(out) - 5000) < 300
    assert 7 < _mode_ratio(out.rows) < 11


def test_prune_returns_subset_rows(rng):
    ps = _bimodal(rng, 5000)
    out = parents.prune_to_uniform(ps, target_size=1000, rng=rng)
    src = {tuple(r) for r in ps.rows}
    assert all(tuple(r) in src for r in out.rows)
    with pytest.raises(ValueError):
        parents.prune_to_uniform(ps, target_size=5000, rng=rng)


def test_prioritized_without_filter_flattens(rng):
    out = parents.prune_prioritized(_bimodal(rng), filter_pred=None, target_size=3000, rng=rng,
                                    floor_density=0.01)
    assert out.source == "mocoda_p"
    assert 0.75 <= _mode_ratio(out.rows) <= 1.33
    assert abs(len(out) - 3000) < 300


def test_prioritized_filter_bounds(rng):
    ps = _bimodal(rng, 5000)
    with pytest.raises(ValueError, match="keeps only"):
        parents.prune_prioritized(ps, filter_pred=lambda r: r[:, 0] > 0.85, target_size=5000, rng=rng)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = parents.prune_prioritized(ps, filter_pred=lambda r: r[:, 0] > 0.5, target_size=1000, rng=rng)
    assert len(out) == (ps.rows[:, 0] > 0.5).sum() and w


def test_rand_sampler(rng):
    ps = parents.sample_rand(SPEC, 10000, rng)
    lo, hi = np.array(SPEC.bounds).T
    assert np.all((ps.rows >= lo) & (ps.rows <= hi))
    se = (hi - lo) / np.sqrt(12 * 10000)
    assert np.all(np.abs(ps.rows.mean(axis=0) - (lo + hi) / 2) < 3 * se)
    assert len(parents.sample_rand(SPEC, 1, rng)) == 1
    flat = FactorSpec.scalar(["x"], ["u"], [(0.3, 0.3), (0, 1)])
    assert np.all(parents.sample_rand(flat, 10, rng).rows[:, 0] == 0.3)


def test_dyna_sampler(rng):
    ds = envs.gen_emp_data(200, seed=0)
    step = lambda s, a: envs.nav2d_next(s, a)
    one = parents.sample_dyna(ds, step, 1, rng, n_starts=100)
    states = {tuple(x) for x in ds.s}
    assert len(one) == 100 and all(tuple(x) in states for x in one.s)
    assert len(parents.sample_dyna(ds, step, 0, rng)) == 0
    five = parents.sample_dyna(ds, step, 5, rng, n_starts=100)
    assert len(five) == 500 and five.flagged == 0
    assert not all(tuple(x) in states for x in five.s)


def test_dyna_truncates_nonfinite(rng):
    ds = envs.gen_emp_data(50, seed=0)
    calls = []

    def step(s, a):
        calls.append(1)
        out = envs.nav2d_next(s, a)
        if len(calls) == 2:
            out[:10] = np.nan
        return out

    ps = parents.sample_dyna(ds, step, 4, rng, n_starts=20)
    assert ps.flagged == 10
    assert len(ps) == 20 + 20 + 10 + 10
    assert np.isfinite(ps.rows).all()
    with pytest.raises(ValueError):
        parents.sample_dyna(ds.subset([]), step, 1, rng)


def test_parent_samples_validation():
    with pytest.raises(ValueError):
        ParentSamples(np.zeros((1, 4)), "bogus", SPEC)
    ps = ParentSamples(np.arange(8.0).reshape(2, 4), "emp", SPEC)
    assert ps.s.tolist() == [[0, 1], [4, 5]] and ps.a.tolist() == [[2, 3], [6, 7]]
