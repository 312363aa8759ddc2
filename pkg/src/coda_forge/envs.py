"""Ground-truth environments: 2D navigation, a discrete chain FMDP, icy rooms."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, FactorSpec
from .lcm import MaskFunction, block_mask

NAV2D_SPEC = FactorSpec.scalar(["x", "y"], ["dx", "dy"],
                               [(0.0, 1.0), (0.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)])

BASE_MASK = np.array([[1, 0], [0, 1], [1, 0], [0, 1]], dtype=np.int8)
DENSE_MASK = np.ones((4, 2), dtype=np.int8)
# parent sets of the sparsest local graph, as (s, a) dims
NAV2D_PARENTS = ((0, 2), (1, 3))


@dataclass(frozen=True)
class Nav2dConfig:
    step_scale: float = 0.05
    coupling: tuple = ((0.6, 0.4), (0.4, 0.6))
    goal: tuple = (0.9, 0.9)
    goal_radius: float = 0.1
    transition_noise: float = 0.0     # std of additive Gaussian noise on s'
    start: tuple = (0.1, 0.1)
    horizon: int = 70
    # empirical-data geometry
    band_height: float = 0.25
    band_width: float = 0.25
    heading_spread: float = np.pi / 8
    action_noise: float = 0.05
    traj_len: int = 18

    def __post_init__(self):
        c = np.asarray(self.coupling, float)
        if c.shape != (2, 2) or np.any(c == 0):
            raise ValueError("coupling must be a 2x2 matrix with no zero entries")
        if not 0 < self.goal_radius < 0.5:
            raise ValueError("goal_radius must be in (0, 0.5)")
        if self.transition_noise < 0:
            raise ValueError("transition_noise must be nonnegative")


def in_coupled_quadrant(s) -> np.ndarray:
    s = np.asarray(s)
    return np.logical_and(s[..., 0] > 0.5, s[..., 1] > 0.5)


def _check_box(s, a):
    if np.any(np.asarray(s) < 0) or np.any(np.asarray(s) > 1):
        raise ValueError(f"state outside [0, 1]^2: {s}")
    if np.any(np.asarray(a) < -1) or np.any(np.asarray(a) > 1):
        raise ValueError(f"action outside [-1, 1]^2: {a}")


def nav2d_next(s, a, cfg: Nav2dConfig = Nav2dConfig()) -> np.ndarray:
    """Deterministic next state for one or many (s, a); no box checks."""
    s = np.asarray(s, float)
    a = np.asarray(a, float)
    c = cfg.coupling
    k = cfg.step_scale
    quad = in_coupled_quadrant(s)
    mx = np.where(quad, c[0][0] * a[..., 0] + c[0][1] * a[..., 1], a[..., 0])
    my = np.where(quad, c[1][0] * a[..., 0] + c[1][1] * a[..., 1], a[..., 1])
    x = np.clip(s[..., 0] + k * mx, 0.0, 1.0)
    y = np.clip(s[..., 1] + k * my, 0.0, 1.0)
    return np.stack([x, y], axis=-1)


def nav2d_reward(s, a, s_next, cfg: Nav2dConfig = Nav2dConfig()) -> np.ndarray:
    d = np.linalg.norm(np.asarray(s_next, float) - np.asarray(cfg.goal), axis=-1)
    return np.where(d <= cfg.goal_radius, 0.0, -1.0)


def nav2d_sample_next(s, a, cfg: Nav2dConfig = Nav2dConfig(), rng=None) -> np.ndarray:
    """`nav2d_next` plus the configured transition noise, clipped to the box."""
    sp = nav2d_next(s, a, cfg)
    if cfg.transition_noise > 0:
        if rng is None:
            raise ValueError("a noisy environment needs an rng")
        sp = np.clip(sp + cfg.transition_noise * rng.standard_normal(sp.shape), 0.0, 1.0)
    return sp


def nav2d_step(s, a, cfg: Nav2dConfig = Nav2dConfig(), rng=None):
    """One environment step: (s_next, reward, reached_goal)."""
    _check_box(s, a)
    sp = nav2d_sample_next(s, a, cfg, rng)
    r = float(nav2d_reward(s, a, sp, cfg))
    return sp, r, r == 0.0


def nav2d_mask(s, a=None) -> np.ndarray:
    """Port of the reference 2D-navigation mask (strict `> 0.5` on both coords)."""
    s = np.asarray(s, float)
    if s.ndim == 1:
        return (DENSE_MASK if in_coupled_quadrant(s) else BASE_MASK).copy()
    out = np.repeat(BASE_MASK[None], len(s), axis=0)
    out[in_coupled_quadrant(s)] = 1
    return out


class Nav2dMask(MaskFunction):
    def __init__(self):
        super().__init__(None, 2, 2)

    def __call__(self, s, a):
        return nav2d_mask(s, a)

    def batch(self, s, a) -> np.ndarray:
        return nav2d_mask(np.atleast_2d(s), a)


def in_bands(s, cfg: Nav2dConfig = Nav2dConfig()) -> np.ndarray:
    s = np.asarray(s)
    return (s[..., 1] <= cfg.band_height) | (s[..., 0] >= 1.0 - cfg.band_width)


def _trajectories(kind: str, n: int, rng: np.random.Generator, cfg: Nav2dConfig):
    S, A, SP = [], [], []
    total = 0
    lo_band = 1.0 - cfg.band_width
    while total < n:
        phi = rng.uniform(-cfg.heading_spread, cfg.heading_spread)
        if kind == "lr":
            s = np.array([rng.uniform(0, 0.1), rng.uniform(0, cfg.band_height)])
            heading = np.array([np.cos(phi), np.sin(phi)])
        else:
            s = np.array([rng.uniform(lo_band, 1.0), rng.uniform(0, 0.1)])
            heading = np.array([np.sin(phi), np.cos(phi)])
        for _ in range(min(cfg.traj_len, n - total)):
            a = np.clip(heading + rng.normal(0, cfg.action_noise, 2), -1, 1)
            sp = nav2d_next(s, a, cfg)
            # reflect the cross-band component to stay inside the band
            if kind == "lr" and sp[1] > cfg.band_height:
                a[1] = -abs(a[1])
            elif kind == "bt" and sp[0] < lo_band:
                a[0] = abs(a[0])
            sp = nav2d_sample_next(s, a, cfg, rng)
            S.append(s), A.append(a), SP.append(sp)
            s = sp
            total += 1
    return np.array(S), np.array(A), np.array(SP)


def gen_emp_data(n_per_kind: int, seed: int | np.random.Generator = 0,
                 cfg: Nav2dConfig = Nav2dConfig()) -> Dataset:
    """Left-to-right trajectories in the bottom band plus bottom-to-top ones in the right band."""
    if n_per_kind <= 0:
        raise ValueError("n_per_kind must be positive")
    rng = np.random.default_rng(seed)
    parts = [_trajectories(k, n_per_kind, rng, cfg) for k in ("lr", "bt")]
    S = np.concatenate([p[0] for p in parts])
    A = np.concatenate([p[1] for p in parts])
    SP = np.concatenate([p[2] for p in parts])
    R = nav2d_reward(S, A, SP, cfg)
    return Dataset(NAV2D_SPEC, S, A, SP, R)


# -- discrete chain FMDP ---------------------------------------------------------

@dataclass
class ChainworldConfig:
    """k binary-or-larger state factors; child i has parents (s_{i-1}, s_i, a_i)."""

    k: int = 2
    state_sizes: tuple = ()
    action_sizes: tuple = ()
    tables: list = field(default_factory=list)   # per child: (n_parent_configs, |c_i|)

    def __post_init__(self):
        if not self.state_sizes:
            self.state_sizes = (2,) * self.k
        if not self.action_sizes:
            self.action_sizes = (2,) * self.k
        for t in self.tables:
            if not np.allclose(np.sum(t, axis=1), 1.0):
                raise ValueError("conditional table rows must sum to 1")

    def parents(self, i: int) -> tuple[int, ...]:
        """Parent dims of child i within the (s, a) vector."""
        pa = [i, self.k + i] if i == 0 else [i - 1, i, self.k + i]
        return tuple(sorted(pa))

    @property
    def alphabets(self) -> tuple[int, ...]:
        return tuple(self.state_sizes) + tuple(self.action_sizes)

    @property
    def spec(self) -> FactorSpec:
        names_s = [f"s{i}" for i in range(self.k)]
        names_a = [f"a{i}" for i in range(self.k)]
        return FactorSpec.scalar(names_s, names_a, [(0, c - 1) for c in self.alphabets])

    @property
    def n_states(self) -> int:
        return int(np.prod(self.state_sizes))

    @property
    def n_actions(self) -> int:
        return int(np.prod(self.action_sizes))

    def parent_config(self, i: int, sa: np.ndarray) -> np.ndarray:
        pa = self.parents(i)
        sizes = [self.alphabets[d] for d in pa]
        idx = np.zeros(len(sa), dtype=int) if sa.ndim == 2 else 0
        for d, c in zip(pa, sizes):
            idx = idx * c + sa[..., d].astype(int)
        return idx


def random_chainworld(k: int, seed, state_size: int = 2, action_size: int = 2,
                      concentration: float = 5.0) -> ChainworldConfig:
    rng = np.random.default_rng(seed)
    cfg = ChainworldConfig(k, (state_size,) * k, (action_size,) * k)
    tables = []
    for i in range(k):
        n_cfg = int(np.prod([cfg.alphabets[d] for d in cfg.parents(i)]))
        tables.append(rng.dirichlet([concentration] * state_size, size=n_cfg))
    cfg.tables = tables
    return cfg


def _enumerate(sizes) -> np.ndarray:
    return np.array(list(itertools.product(*[range(c) for c in sizes])), dtype=float)


def chainworld_true_P(cfg: ChainworldConfig) -> np.ndarray:
    """Exact joint law as an array (|S|, |A|, |S|) in row-major factor order."""
    states = _enumerate(cfg.state_sizes)
    actions = _enumerate(cfg.action_sizes)
    out = np.ones((len(states), len(actions), len(states)))
    for si, s in enumerate(states):
        for ai, a in enumerate(actions):
            sa = np.concatenate([s, a])
            for i in range(cfg.k):
                p = cfg.tables[i][cfg.parent_config(i, sa)]
                out[si, ai] *= p[states[:, i].astype(int)]
    return out


def chainworld_sample(cfg: ChainworldConfig, policy=None, N: int = 1000, seed=0,
                      even_allocation: bool = False) -> Dataset:
    """Sample N transitions; with `even_allocation` every (s, a) is visited round-robin."""
    rng = np.random.default_rng(seed)
    states = _enumerate(cfg.state_sizes)
    actions = _enumerate(cfg.action_sizes)
    if even_allocation:
        grid = np.array([np.concatenate([s, a]) for s in states for a in actions])
        sa = grid[np.arange(N) % len(grid)]
    else:
        S = states[rng.integers(len(states), size=N)]
        if policy is None:
            A = actions[rng.integers(len(actions), size=N)]
        else:
            A = np.array([policy(s, rng) for s in S], dtype=float)
        sa = np.concatenate([S, A], axis=1)
    sp = np.zeros((N, cfg.k))
    for i in range(cfg.k):
        probs = cfg.tables[i][cfg.parent_config(i, sa)]
        u = rng.random(N)[:, None]
        sp[:, i] = np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), probs.shape[1] - 1)
    return Dataset(cfg.spec, sa[:, :cfg.k], sa[:, cfg.k:], sp, np.zeros(N))


# -- icy rooms -----------------------------------------------------------------

ICY_SPEC = NAV2D_SPEC


@dataclass(frozen=True)
class IcyRoomsConfig:
    dry_scale: float = 0.05
    icy_scale: float = 0.15
    wall: float = 0.5     # x < wall: dry room; x >= wall: icy room


def icy_room(s, cfg: IcyRoomsConfig = IcyRoomsConfig()) -> np.ndarray:
    return (np.asarray(s)[..., 0] >= cfg.wall).astype(int)


def icy_rooms_step(s, a, cfg: IcyRoomsConfig = IcyRoomsConfig()) -> np.ndarray:
    s = np.asarray(s, float)
    a = np.asarray(a, float)
    k = np.where(icy_room(s, cfg) == 1, cfg.icy_scale, cfg.dry_scale)
    return np.clip(s + k[..., None] * a if s.ndim > 1 else s + k * a, 0.0, 1.0)


def icy_rooms_mask(s, a=None) -> np.ndarray:
    return block_mask(2)


class IcyRoomsMask(MaskFunction):
    """Same factored mask in both rooms; their union is coupled through the room (x)."""

    def __init__(self, cfg: IcyRoomsConfig = IcyRoomsConfig()):
        super().__init__(None, 2, 2)
        self.cfg = cfg

    def __call__(self, s, a):
        return icy_rooms_mask(s, a)

    def union(self, points):
        m = super().union(points)
        rooms = {int(icy_room(s, self.cfg)) for s, _ in points}
        if len(rooms) > 1:
            m = m.copy()
            m[0, 1] = 1     # room membership (x) now drives y'
        return m
