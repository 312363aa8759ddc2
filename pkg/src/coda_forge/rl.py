"""Batch RL at desk scale: BC-regularised fitted Q-iteration over an action grid."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import nn
from .core import Dataset
from .envs import Nav2dConfig, in_bands, nav2d_next, nav2d_reward, nav2d_sample_next

log = logging.getLogger(__name__)

CLIP = (-50.0, 0.0)
Q_SCALE = 50.0      # network regresses Q / 50 so targets lie in [-1, 0]


def action_grid(res: int, bounds) -> np.ndarray:
    """Row-major grid with `res` points per action dim (last dim varies fastest)."""
    if res < 3:
        raise ValueError("grid_res must be at least 3")
    axes = [np.linspace(lo, hi, res) for lo, hi in np.asarray(bounds)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))


@dataclass
class FQIConfig:
    grid_res: int = 9
    gamma: float = 0.98
    bc_weight: float = 0.3
    iters: int = 80
    seed: int = 0
    width: int = 64
    lr: float = 1e-3
    batch: int = 512
    steps_per_iter: int = 40
    subsample: int = 20000
    k_neighbors: int = 10


class QApprox:
    """Q(s, a) network with a behaviour penalty from the training data's actions.

    The penalty of action a at state s is bc_weight * 50 * min over the
    actions of the k nearest training states of ||a - a_k||^2; action
    selection maximises Q minus that penalty.
    """

    def __init__(self, params: dict, x_mean, x_std, grid, bc_weight: float,
                 ref_states, ref_actions, k: int, meta: dict | None = None):
        self.params = params
        self.x_mean = np.asarray(x_mean, float)
        self.x_std = np.asarray(x_std, float)
        self.grid = np.asarray(grid, float)
        self.bc_weight = float(bc_weight)
        self.ref_states = np.asarray(ref_states, float)
        self.ref_actions = np.asarray(ref_actions, float)
        self.k = int(min(k, len(self.ref_states)))
        self.tree = cKDTree(self.ref_states)
        self.meta = meta or {}
        self.clip_range = CLIP

    @property
    def state_dim(self) -> int:
        return self.ref_states.shape[1]

    def q(self, s, a) -> np.ndarray:
        x = (np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1) - self.x_mean) / self.x_std
        out, _ = nn.forward(self.params, x[None].astype(self.params["W1"].dtype))
        return out[0, 0, :, 0].astype(float) * Q_SCALE

    def q_grid(self, s, chunk: int = 2048) -> np.ndarray:
        """(N, |grid|) Q values, reusing the state half of the first layer."""
        s = np.atleast_2d(np.asarray(s, float))
        n = self.state_dim
        p = self.params
        dt = p["W1"].dtype
        W1 = p["W1"][0, 0]
        xs = ((s - self.x_mean[:n]) / self.x_std[:n]).astype(dt)
        xa = ((self.grid - self.x_mean[n:]) / self.x_std[n:]).astype(dt)
        ga = xa @ W1[n:] + p["b1"][0, 0]
        out = np.empty((len(s), len(self.grid)))
        for i in range(0, len(s), chunk):
            h1 = np.maximum((xs[i:i + chunk] @ W1[:n])[:, None, :] + ga[None], 0.0)
            h1 = h1.reshape(-1, h1.shape[-1])
            h2 = np.maximum(h1 @ p["W2"][0, 0] + p["b2"][0, 0], 0.0)
            q = h2 @ p["W3"][0, 0] + p["b3"][0, 0]
            out[i:i + chunk] = q.reshape(-1, len(self.grid)) * Q_SCALE
        return out

    def penalty(self, s) -> np.ndarray:
        """(N, |grid|) behaviour penalty."""
        s = np.atleast_2d(np.asarray(s, float))
        if self.bc_weight == 0:
            return np.zeros((len(s), len(self.grid)))
        _, idx = self.tree.query(s, k=self.k)
        idx = idx.reshape(len(s), -1)
        out = np.full((len(s), len(self.grid)), np.inf)
        for j in range(idx.shape[1]):
            acts = self.ref_actions[idx[:, j]]
            d2 = ((self.grid[None] - acts[:, None]) ** 2).sum(axis=2)
            np.minimum(out, d2, out=out)
        return self.bc_weight * Q_SCALE * out

    def scores(self, s) -> np.ndarray:
        return self.q_grid(s) - self.penalty(s)

    def save(self, path) -> None:
        arrays = {k: self.params[k] for k in nn.PARAM_ORDER if k in self.params}
        arrays.update(x_mean=self.x_mean, x_std=self.x_std, grid=self.grid,
                      ref_states=self.ref_states, ref_actions=self.ref_actions)
        nn.save_tensors(path, arrays, dict(self.meta, bc_weight=self.bc_weight, k=self.k,
                                           dtype=str(self.params["W1"].dtype)))

    @classmethod
    def load(cls, path) -> "QApprox":
        arrays, meta = nn.load_tensors(path)
        dt = meta.pop("dtype")
        params = {k: arrays.pop(k).astype(dt) for k in nn.PARAM_ORDER if k in arrays}
        bc, k = meta.pop("bc_weight"), meta.pop("k")
        return cls(params, arrays["x_mean"], arrays["x_std"], arrays["grid"], bc,
                   arrays["ref_states"], arrays["ref_actions"], k, meta)


def greedy_policy(q: QApprox):
    """Deterministic argmax of the penalised score; ties go to the lowest grid index."""
    def policy(s):
        s = np.asarray(s, float)
        single = s.ndim == 1
        a = q.grid[np.argmax(q.scores(np.atleast_2d(s)), axis=1)]
        return a[0] if single else a
    return policy


def fqi_train(ds: Dataset, cfg: FQIConfig = FQIConfig(), dtype: str = "float32") -> QApprox:
    """Fitted Q-iteration with clipped targets and a behaviour penalty.

    Each iteration draws `subsample` transitions, forms
    y = clip(r + gamma * (1 - done) * max_a' [Q(s', a') - pen(s', a')], -50, 0)
    with done marking goal transitions (r == 0), and takes `steps_per_iter`
    Adam steps on the squared error, warm-starting from the previous fit.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if not 0 < cfg.gamma < 1:
        raise ValueError("gamma must be in (0, 1)")
    spec = ds.spec
    grid = action_grid(cfg.grid_res, spec.action_bounds)
    sa = ds.sa
    x_mean = sa.mean(axis=0)
    x_std = np.where(sa.std(axis=0) > 0, sa.std(axis=0), 1.0)
    params = nn.init_tower(1, 1, spec.sa_dim, cfg.width, 1, False, [cfg.seed])
    params = {k: v.astype(dtype) for k, v in params.items()}
    q = QApprox(params, x_mean, x_std, grid, cfg.bc_weight, ds.s, ds.a, cfg.k_neighbors,
                {"fqi": asdict(cfg)})
    rng = np.random.default_rng(cfg.seed)
    x_all = ((sa - x_mean) / x_std).astype(dtype)
    done = ds.r == 0.0
    pen_next = q.penalty(ds.s_next).astype(np.float32)
    opt = nn.Adam(params, cfg.lr)
    halved = False
    n_sub = min(cfg.subsample, len(ds))
    for it in range(cfg.iters):
        idx = rng.choice(len(ds), size=n_sub, replace=False) if n_sub < len(ds) else np.arange(len(ds))
        boot = (q.q_grid(ds.s_next[idx]) - pen_next[idx]).max(axis=1)
        y = np.clip(ds.r[idx] + cfg.gamma * np.where(done[idx], 0.0, boot), *CLIP) / Q_SCALE
        y = y.astype(dtype)
        snapshot = {k: v.copy() for k, v in params.items()}
        for _ in range(cfg.steps_per_iter):
            b = rng.integers(n_sub, size=cfg.batch)
            out, cache = nn.forward(params, x_all[idx[b]][None])
            loss, dout = nn.mse(out, y[b][None, None, :, None])
            if not np.isfinite(loss).all():
                if halved:
                    raise FloatingPointError(f"FQI regression diverged twice (iteration {it})")
                log.warning("FQI regression diverged at iteration %d; halving lr", it)
                halved = True
                for k in params:
                    params[k][...] = snapshot[k]
                opt = nn.Adam(params, cfg.lr / 2)
                break
            opt.step(params, nn.backward(params, cache, dout))
    return q


# -- evaluation ------------------------------------------------------------------------

def evaluate(policy, env: Nav2dConfig = Nav2dConfig(), episodes: int = 100, seed: int = 0,
             start_jitter: float = 0.0) -> dict:
    """Run episodes in parallel from the configured start.

    Steps count until the first goal entry; failures are charged the horizon.
    `in_band_fraction` is the share of visited states inside the empirical bands.
    """
    rng = np.random.default_rng(seed)
    s = np.tile(np.asarray(env.start, float), (episodes, 1))
    if start_jitter > 0:
        s = np.clip(s + rng.uniform(-start_jitter, start_jitter, s.shape), 0.0, 1.0)
    steps = np.full(episodes, env.horizon)
    active = np.ones(episodes, bool)
    visited = [s.copy()]
    for t in range(env.horizon):
        a = np.clip(np.asarray(policy(s[active]), float), -1, 1)
        sp = nav2d_sample_next(s[active], a, env, rng)
        r = nav2d_reward(s[active], a, sp, env)
        s[active] = sp
        visited.append(sp)
        reached = np.nonzero(active)[0][r == 0.0]
        steps[reached] = t + 1
        active[reached] = False
        if not active.any():
            break
    states = np.concatenate(visited)
    success = ~active
    return {"mean_steps": float(steps.mean()), "std_steps": float(steps.std()),
            "success_rate": float(success.mean()),
            "in_band_fraction": float(in_bands(states, env).mean()), "steps": steps}


def shortest_path_steps(env: Nav2dConfig = Nav2dConfig(), grid_res: int = 9,
                        max_depth: int | None = None, decimals: int = 9) -> tuple[int, np.ndarray]:
    """Breadth-first search over grid actions in the noise-free dynamics.

    Returns the fewest steps from `env.start` to the goal and one optimal
    action sequence.  States are deduplicated after rounding to `decimals`.
    """
    grid = action_grid(grid_res, [(-1, 1), (-1, 1)])
    max_depth = env.horizon if max_depth is None else max_depth
    frontier = np.asarray(env.start, float)[None]
    parents: list = []
    seen = {tuple(np.round(frontier[0], decimals))}
    for depth in range(1, max_depth + 1):
        s = np.repeat(frontier, len(grid), axis=0)
        a = np.tile(grid, (len(frontier), 1))
        sp = nav2d_next(s, a, env)
        hit = np.nonzero(nav2d_reward(s, a, sp, env) == 0.0)[0]
        src = np.repeat(np.arange(len(frontier)), len(grid))
        if len(hit):
            plan = [a[hit[0]]]
            node = src[hit[0]]
            for back in reversed(parents):
                plan.append(back[1][node])
                node = back[0][node]
            return depth, np.array(plan[::-1])
        key = np.round(sp, decimals)
        _, first = np.unique(key, axis=0, return_index=True)
        keep = [i for i in np.sort(first) if tuple(key[i]) not in seen]
        for i in keep:
            seen.add(tuple(key[i]))
        keep = np.array(keep, dtype=int)
        parents.append((src[keep], a[keep]))
        frontier = sp[keep]
        if not len(frontier):
            break
    raise RuntimeError(f"goal unreachable within {max_depth} steps")
