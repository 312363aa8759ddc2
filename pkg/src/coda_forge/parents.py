"""Parent (s, a) distributions: per-parent-set GMMs, the Mocoda sampler, KDE pruning, baselines."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

from .core import Dataset, FactorSpec
from .lcm import ParentGraph

log = logging.getLogger(__name__)

SOURCES = ("emp", "rand", "dyna", "mocoda", "mocoda_u", "mocoda_p")
COV_FLOOR = 1e-6
PRUNE_WEIGHT = 1e-8
_LOG2PI = np.log(2 * np.pi)


@dataclass
class GMM:
    weights: np.ndarray       # (K,)
    means: np.ndarray         # (K, d)
    covs: np.ndarray          # (K, d, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, float)
        self.means = np.atleast_2d(np.asarray(self.means, float))
        self.covs = np.asarray(self.covs, float).reshape(len(self.weights), self.dim, self.dim)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        mu = self.mean()
        dev = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covs) + (self.weights[:, None] * dev).T @ dev

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GMM":
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["covs"]))


def _component_logpdf(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """(N, K) log N(x_n; mu_k, Sigma_k)."""
    N, d = x.shape
    out = np.empty((N, len(means)))
    for k in range(len(means)):
        L = np.linalg.cholesky(covs[k])
        z = solve_triangular(L, (x - means[k]).T, lower=True)
        out[:, k] = -0.5 * (d * _LOG2PI + (z * z).sum(axis=0)) - np.log(np.diag(L)).sum()
    return out


def gmm_logpdf(g: GMM, x) -> np.ndarray | float:
    x = np.asarray(x, float)
    single = x.ndim == 1
    x = x.reshape(-1, g.dim)
    with np.errstate(divide="ignore"):
        lw = np.log(g.weights)
    out = logsumexp(_component_logpdf(x, g.means, g.covs) + lw, axis=1)
    return float(out[0]) if single else out


def sample_gmm(g: GMM, N: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(g.K, size=N, p=g.weights)
    z = rng.standard_normal((N, g.dim))
    L = np.linalg.cholesky(g.covs)
    return g.means[comp] + np.einsum("nij,nj->ni", L[comp], z)


def _kmeanspp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        p = d2 / d2.sum() if d2.sum() > 0 else None
        centers.append(x[rng.choice(len(x), p=p)])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
    return np.array(centers)


def _m_step(x: np.ndarray, resp: np.ndarray):
    nk = resp.sum(axis=0)
    keep = nk / len(x) >= PRUNE_WEIGHT
    resp, nk = resp[:, keep], nk[keep]
    means = (resp.T @ x) / nk[:, None]
    d = x.shape[1]
    covs = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        dev = x - means[k]
        covs[k] = (resp[:, k, None] * dev).T @ dev / nk[k] + COV_FLOOR * np.eye(d)
    return GMM(nk / nk.sum(), means, covs)


def fit_gmm_em(data, K: int = 32, max_iter: int = 300, tol: float = 1e-4, seed: int = 0,
               val_frac: float = 0.1, patience: int = 10) -> GMM:
    """EM from k-means++ seeds with early stopping on held-out log-likelihood.

    Stops once the held-out mean log-likelihood has not improved by more than
    `tol` for `patience` iterations; returns the best held-out iterate.
    Components whose weight drops below 1e-8 are removed.
    """
    x = np.asarray(data, float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < K:
        raise ValueError(f"need at least K={K} rows, got {len(x)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    n_val = int(len(x) * val_frac) if len(x) * val_frac >= 1 and len(x) - int(len(x) * val_frac) >= K else 0
    val, train = x[perm[:n_val]], x[perm[n_val:]]
    centers = _kmeanspp(train, K, rng)
    d2 = ((train[:, None, :] - centers[None]) ** 2).sum(axis=2)
    resp = np.zeros((len(train), K))
    resp[np.arange(len(train)), d2.argmin(axis=1)] = 1.0
    g = _m_step(train, resp)
    best, best_ll, since = g, -np.inf, 0
    for _ in range(max_iter):
        lp = _component_logpdf(train, g.means, g.covs) + np.log(g.weights)
        resp = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        g = _m_step(train, resp)
        ll = float(gmm_logpdf(g, val if n_val else train).mean())
        if ll > best_ll + tol:
            best, best_ll, since = g, ll, 0
        else:
            since += 1
            if ll > best_ll:
                best, best_ll = g, ll
            if since >= patience:
                break
    return best


def condition_gmm(g: GMM, observed_idx, values, jitter: float = 1e-9) -> GMM:
    """Mixture over the unobserved dims given x[observed_idx] = values."""
    o = [int(i) for i in observed_idx]
    if not o:
        return g
    v = np.asarray(values, float).reshape(len(o))
    if not np.all(np.isfinite(v)):
        raise ValueError("conditioning values must be finite")
    u = [i for i in range(g.dim) if i not in o]
    means, covs, logw = [], [], []
    for k in range(g.K):
        S_oo = g.covs[k][np.ix_(o, o)]
        S_uo = g.covs[k][np.ix_(u, o)]
        S_uu = g.covs[k][np.ix_(u, u)]
        cf = _cho(S_oo, jitter)
        dev = v - g.means[k, o]
        means.append(g.means[k, u] + S_uo @ cho_solve(cf, dev))
        covs.append(S_uu - S_uo @ cho_solve(cf, S_uo.T))
        logdet = 2 * np.log(np.diag(cf[0])).sum()
        logw.append(np.log(g.weights[k]) - 0.5 * (len(o) * _LOG2PI + logdet + dev @ cho_solve(cf, dev)))
    logw = np.array(logw)
    w = np.exp(logw - logsumexp(logw))
    return GMM(w, np.array(means).reshape(g.K, len(u)), np.array(covs).reshape(g.K, len(u), len(u)))


def _cho(S: np.ndarray, jitter: float):
    try:
        return cho_factor(S, lower=True)
    except np.linalg.LinAlgError:
        try:
            return cho_factor(S + jitter * np.eye(len(S)), lower=True)
        except np.linalg.LinAlgError as e:
            raise np.linalg.LinAlgError("observed-block covariance is singular") from e


def sample_conditional(g: GMM, observed_idx, V: np.ndarray, rng: np.random.Generator,
                       jitter: float = 1e-9) -> np.ndarray:
    """Row-wise draw of the unobserved dims given each row of V; same result law as
    sampling `condition_gmm(g, observed_idx, V[n])` per row."""
    o = [int(i) for i in observed_idx]
    u = [i for i in range(g.dim) if i not in o]
    N = len(V)
    if not o:
        return sample_gmm(g, N, rng)
    logw = np.empty((N, g.K))
    cmeans = np.empty((g.K, N, len(u)))
    chols = np.empty((g.K, len(u), len(u)))
    for k in range(g.K):
        S_oo = g.covs[k][np.ix_(o, o)]
        S_uo = g.covs[k][np.ix_(u, o)]
        cf = _cho(S_oo, jitter)
        dev = V - g.means[k, o]                      # (N, |o|)
        sol = cho_solve(cf, dev.T)                   # (|o|, N)
        cmeans[k] = g.means[k, u] + (S_uo @ sol).T
        logdet = 2 * np.log(np.diag(cf[0])).sum()
        logw[:, k] = np.log(g.weights[k]) - 0.5 * (len(o) * _LOG2PI + logdet + (dev * sol.T).sum(axis=1))
        cov = g.covs[k][np.ix_(u, u)] - S_uo @ cho_solve(cf, S_uo.T)
        chols[k] = np.linalg.cholesky(0.5 * (cov + cov.T) + jitter * np.eye(len(u)))
    p = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
    comp = (rng.random(N)[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    comp = np.minimum(comp, g.K - 1)
    z = rng.standard_normal((N, len(u)))
    return cmeans[comp, np.arange(N)] + np.einsum("nij,nj->ni", chols[comp], z)


# -- parent samples ------------------------------------------------------------------

@dataclass
class ParentSamples:
    rows: np.ndarray          # (N, sa_dim)
    source: str
    spec: FactorSpec
    flagged: int = 0          # rollouts truncated for non-finite model output

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        self.rows = np.asarray(self.rows, float).reshape(-1, self.spec.sa_dim)

    def __len__(self):
        return len(self.rows)

    @property
    def s(self) -> np.ndarray:
        return self.rows[:, :self.spec.state_dim]

    @property
    def a(self) -> np.ndarray:
        return self.rows[:, self.spec.state_dim:]

    def subset(self, idx) -> "ParentSamples":
        return ParentSamples(self.rows[idx], self.source, self.spec, self.flagged)

    def relabel(self, source: str) -> "ParentSamples":
        return ParentSamples(self.rows, source, self.spec, self.flagged)


def distinct_parent_sets(graph: ParentGraph) -> list[tuple[int, ...]]:
    return list(dict.fromkeys(graph.parent_sets))


@dataclass
class ParentModels:
    """One GMM per distinct parent set, in graph order."""

    graph: ParentGraph
    gmms: list

    def to_json(self) -> str:
        return json.dumps({"graph": json.loads(self.graph.to_json()),
                           "gmms": [g.to_dict() for g in self.gmms]})

    @classmethod
    def from_json(cls, text: str) -> "ParentModels":
        d = json.loads(text)
        graph = ParentGraph(tuple(tuple(p) for p in d["graph"]["parent_sets"]))
        return cls(graph, [GMM.from_dict(g) for g in d["gmms"]])


def fit_parent_models(sa: np.ndarray, graph: ParentGraph, K: int = 32, seed: int = 0,
                      **em_kw) -> ParentModels:
    gmms = []
    for i, ps in enumerate(distinct_parent_sets(graph)):
        gmms.append(fit_gmm_em(sa[:, list(ps)], K, seed=seed + i, **em_kw))
    return ParentModels(graph, gmms)


def sample_mocoda(models: ParentModels, spec: FactorSpec, N: int, rng: np.random.Generator,
                  shuffle: bool = False) -> ParentSamples:
    """Sample every parent set in turn, conditioning on dims already drawn."""
    sets = distinct_parent_sets(models.graph)
    covered = set().union(*sets)
    missing = sorted(set(range(spec.sa_dim)) - covered)
    if missing:
        raise ValueError(f"dims {missing} are covered by no parent set")
    order = list(range(len(sets)))
    if shuffle:
        order = list(rng.permutation(len(sets)))
    rows = np.full((N, spec.sa_dim), np.nan)
    if N == 0:
        return ParentSamples(rows, "mocoda", spec)
    done: set = set()
    for k in order:
        ps, g = sets[k], models.gmms[k]
        local_obs = [i for i, d in enumerate(ps) if d in done]
        local_new = [i for i, d in enumerate(ps) if d not in done]
        if not local_new:
            continue
        draw = sample_conditional(g, local_obs, rows[:, [ps[i] for i in local_obs]], rng)
        rows[:, [ps[i] for i in local_new]] = draw
        done.update(ps)
    return ParentSamples(rows, "mocoda", spec)


def kde_log_score(reference, h: float, queries, chunk: int = 2048) -> np.ndarray:
    """Exact Gaussian-kernel log density log((1/N) sum_i N(q; x_i, h^2 I))."""
    ref = np.atleast_2d(np.asarray(reference, float))
    q = np.atleast_2d(np.asarray(queries, float))
    if len(ref) == 0:
        raise ValueError("empty reference set")
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    d = ref.shape[1]
    rn = (ref ** 2).sum(axis=1)
    out = np.empty(len(q))
    for i in range(0, len(q), chunk):
        Q = q[i:i + chunk]
        d2 = np.maximum((Q ** 2).sum(axis=1)[:, None] + rn[None] - 2 * Q @ ref.T, 0.0)
        out[i:i + chunk] = logsumexp(-0.5 * d2 / h ** 2, axis=1)
    return out - np.log(len(ref)) - 0.5 * d * np.log(2 * np.pi * h * h)


def _inverse_density(samples: ParentSamples, feature_map, h: float, floor: float, n_ref: int):
    feats = feature_map(samples.rows)
    ref = feats[-n_ref:]
    scores = kde_log_score(ref, h, feats)
    return 1.0 / np.exp(np.maximum(scores, np.log(floor)))


def prune_to_uniform(samples: ParentSamples, feature_map=None, h: float = 0.05,
                     target_size: int = 12000, floor_density: float = 0.01,
                     rng: np.random.Generator | None = None, n_ref: int = 10000) -> ParentSamples:
    """Rejection-thin toward a uniform law over `feature_map` space.

    Acceptance is proportional to 1 / max(kde density, floor) and scaled so
    the expected number kept is about `target_size`.
    """
    rng = np.random.default_rng() if rng is None else rng
    if len(samples) <= target_size:
        raise ValueError(f"need more than target_size={target_size} samples, got {len(samples)}")
    fmap = feature_map or (lambda x: x[:, :samples.spec.state_dim])
    scores = _inverse_density(samples, fmap, h, floor_density, n_ref)
    scores = scores / scores.mean() * (target_size / len(samples))
    keep = np.nonzero(rng.uniform(size=len(scores)) < scores)[0]
    return samples.subset(keep).relabel("mocoda_u")


def prune_prioritized(samples: ParentSamples, feature_map=None, filter_pred=None, h: float = 0.05,
                      target_size: int = 10000, rng: np.random.Generator | None = None,
                      floor_density: float = 0.05, n_ref: int = 5000) -> ParentSamples:
    """Keep rows passing `filter_pred`, then thin them toward uniform over `feature_map`.

    The acceptance scale is searched geometrically (factor 0.99) until the
    expected kept count sum(min(score, 1)) crosses `target_size`.
    """
    rng = np.random.default_rng() if rng is None else rng
    fmap = feature_map or (lambda x: x[:, :samples.spec.state_dim])
    keep = np.ones(len(samples), bool) if filter_pred is None else np.asarray(filter_pred(samples.rows), bool)
    survivors = samples.subset(np.nonzero(keep)[0])
    if len(survivors) < target_size / 10:
        raise ValueError(f"filter keeps only {len(survivors)} rows (< target_size/10)")
    if len(survivors) <= target_size:
        warnings.warn(f"only {len(survivors)} survivors for target {target_size}; keeping all")
        return survivors.relabel("mocoda_p")
    scores = _inverse_density(survivors, fmap, h, floor_density, n_ref)
    if np.minimum(scores, 1).sum() > target_size:
        while np.minimum(scores, 1).sum() > target_size:
            scores = scores * 0.99
    else:
        while np.minimum(scores, 1).sum() < target_size:
            scores = scores / 0.99
    idx = np.nonzero(rng.uniform(size=len(scores)) < scores)[0]
    return survivors.subset(idx).relabel("mocoda_p")


def sample_rand(spec: FactorSpec, N: int, rng: np.random.Generator) -> ParentSamples:
    b = np.array(spec.bounds)
    return ParentSamples(rng.uniform(b[:, 0], b[:, 1], size=(N, len(b))), "rand", spec)


def sample_dyna(ds: Dataset, step_fn, steps: int, rng: np.random.Generator,
                n_starts: int | None = None) -> ParentSamples:
    """Rollouts with random actions from states drawn out of `ds`.

    `step_fn(s, a)` maps batches of states and actions to next states (e.g. a
    dynamics model sampler).  Every visited (s, a) is emitted; a rollout whose
    model output turns non-finite stops there and is counted in `flagged`.
    """
    spec = ds.spec
    if len(ds) == 0:
        raise ValueError("empty dataset")
    n_starts = len(ds) if n_starts is None else n_starts
    ab = spec.action_bounds
    s = ds.s[rng.integers(len(ds), size=n_starts)]
    alive = np.ones(n_starts, bool)
    out = []
    flagged = 0
    for _ in range(steps):
        a = rng.uniform(ab[:, 0], ab[:, 1], size=(n_starts, spec.action_dim))
        out.append(np.concatenate([s[alive], a[alive]], axis=1))
        nxt = np.asarray(step_fn(s, a), float)
        bad = alive & ~np.all(np.isfinite(nxt), axis=1)
        flagged += int(bad.sum())
        alive &= ~bad
        s = np.where(alive[:, None], nxt, s)
    rows = np.concatenate(out) if out else np.zeros((0, spec.sa_dim))
    return ParentSamples(rows, "dyna", spec, flagged)
