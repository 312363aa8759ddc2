"""Model-free counterfactual augmentation by swapping independent components."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import Dataset, FactorSpec, Transition, concat
from .lcm import MaskFunction, components, eval_mask, independent_sets

NO_SHARED_SET = "no_shared_set"
POST_MASK_MISMATCH = "post_mask_mismatch"


@dataclass(frozen=True)
class CodaProposal:
    source_a: int
    source_b: int
    swapped_set: frozenset
    result: Transition | None
    accepted: bool
    reject_reason: str | None = None


@lru_cache(maxsize=4096)
def _sets_for(mask_bytes: bytes, shape: tuple) -> tuple[frozenset, ...]:
    mask = np.frombuffer(mask_bytes, dtype=np.int8).reshape(shape)
    return tuple(independent_sets(components(mask)))


def mask_independent_sets(mask: np.ndarray) -> tuple[frozenset, ...]:
    mask = np.ascontiguousarray(mask, dtype=np.int8)
    return _sets_for(mask.tobytes(), mask.shape)


def _factor_slices(spec: FactorSpec, d: frozenset):
    """(state dims, action dims) covered by the factor set d."""
    n = spec.n_state_factors
    s_dims, a_dims = [], []
    for f in sorted(d):
        dims = spec.factor_dims(f)
        if f < n:
            s_dims.extend(dims)
        else:
            a_dims.extend(x - spec.state_dim for x in dims)
    return s_dims, a_dims


def swap(spec: FactorSpec, t1: Transition, t2: Transition, d: frozenset) -> Transition:
    """Copy of t1 whose (s, a, s') slices for factors in d come from t2; reward unset."""
    s, a, sp = np.array(t1.s, float), np.array(t1.a, float), np.array(t1.s_next, float)
    s_dims, a_dims = _factor_slices(spec, d)
    s[s_dims] = t2.s[s_dims]
    sp[s_dims] = t2.s_next[s_dims]
    a[a_dims] = t2.a[a_dims]
    return Transition(s, a, sp)


def coda_swap(t1: Transition, t2: Transition, mask_fn: MaskFunction, rng: np.random.Generator,
              spec: FactorSpec, region_aware: bool = True,
              source_a: int = -1, source_b: int = -1) -> CodaProposal:
    """One swap attempt between two transitions.

    With `region_aware` the result is also checked against the mask of the
    union of the neighbourhoods of both sources and the result, which catches
    swaps across regions whose structural equations differ even though the
    pointwise masks agree.
    """
    n, m = spec.n_state_factors, spec.n_action_factors
    m1 = eval_mask(mask_fn, t1.s, t1.a, n, m)
    m2 = eval_mask(mask_fn, t2.s, t2.a, n, m)
    d2 = set(mask_independent_sets(m2))
    shared = [d for d in mask_independent_sets(m1) if d in d2]
    if not shared:
        return CodaProposal(source_a, source_b, frozenset(), None, False, NO_SHARED_SET)
    d = shared[int(rng.integers(len(shared)))]
    res = swap(spec, t1, t2, d)
    m_res = eval_mask(mask_fn, res.s, res.a, n, m)
    ok = d in mask_independent_sets(m_res)
    if ok and region_aware:
        m_union = mask_fn.union([(t1.s, t1.a), (t2.s, t2.a), (res.s, res.a)])
        ok = d in mask_independent_sets(m_union)
    return CodaProposal(source_a, source_b, d, res, ok, None if ok else POST_MASK_MISMATCH)


def relabel_reward(t: Transition, reward_fn) -> Transition:
    return t.replace(r=float(reward_fn(t.s, t.a, t.s_next)))


def relabel_goal(t: Transition, goal_dims, g_new, reward_fn) -> Transition:
    """Replace the goal dims of s and s' with g_new and recompute the reward.

    goal_dims are state dims; the goal must be constant across the step.
    """
    dims = list(goal_dims)
    if not np.array_equal(np.asarray(t.s)[dims], np.asarray(t.s_next)[dims]):
        raise ValueError(f"goal dims {dims} change between s and s_next")
    s, sp = np.array(t.s, float), np.array(t.s_next, float)
    s[dims] = g_new
    sp[dims] = g_new
    return relabel_reward(Transition(s, np.array(t.a, float), sp), reward_fn)


def _pair_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))


def amplify(ds: Dataset, mask_fn: MaskFunction, reward_fn, pair_budget: int = 2000,
            per_pair: int = 2, max_ratio: float = 3.0, seed: int = 0,
            region_aware: bool = True) -> Dataset:
    """Real data plus accepted swaps, capped at max_ratio * |real|.

    Pair i uses its own stream derived from (seed, i), so the output does not
    depend on the order in which pairs are processed.
    """
    if len(ds) < 2:
        raise ValueError("need at least two transitions")
    if max_ratio <= 0:
        raise ValueError("max_ratio must be positive")
    cap = int(np.floor(max_ratio * len(ds)))
    out = []
    for i in range(pair_budget):
        if len(out) >= cap:
            break
        rng = _pair_rng(seed, i)
        a = int(rng.integers(len(ds)))
        b = (a + 1 + int(rng.integers(len(ds) - 1))) % len(ds)
        for _ in range(per_pair):
            p = coda_swap(ds[a], ds[b], mask_fn, rng, ds.spec, region_aware, a, b)
            if p.accepted:
                out.append(relabel_reward(p.result, reward_fn))
    out = out[:cap]
    if not out:
        return ds
    coda = Dataset(ds.spec, np.array([t.s for t in out]), np.array([t.a for t in out]),
                   np.array([t.s_next for t in out]), np.array([t.r for t in out]),
                   ("coda",) * len(out))
    return concat([ds, coda])


def enumerate_proposals(ds_small: Dataset, mask_fn: MaskFunction, limit: int = 64) -> int:
    """Number of distinct transitions reachable by picking one source per component.

    Sources are grouped by their component partition; inside a group every
    combination of per-component slices is built and kept if its own mask
    leaves each component independent.  The count is over the union of all
    groups (a lone source contributes itself).
    """
    if len(ds_small) > limit:
        raise ValueError(f"exhaustive enumeration is limited to {limit} transitions")
    spec = ds_small.spec
    n, m = spec.n_state_factors, spec.n_action_factors
    strata: dict = {}
    for i, t in enumerate(ds_small):
        part = components(eval_mask(mask_fn, t.s, t.a, n, m))
        strata.setdefault(part.components, []).append(i)
    seen = set()
    for comps, idx in strata.items():
        slices = []
        for c in comps:
            s_dims, a_dims = _factor_slices(spec, c)
            vals = {}
            for i in idx:
                t = ds_small[i]
                key = (tuple(t.s[s_dims]), tuple(t.a[a_dims]), tuple(t.s_next[s_dims]))
                vals.setdefault(key, i)
            slices.append((c, list(vals.values())))
        for choice in itertools.product(*(v for _, v in slices)):
            t = ds_small[choice[0]]
            for (c, _), src in zip(slices, choice):
                t = swap(spec, t, ds_small[src], c)
            if len(comps) > 1:
                sets = mask_independent_sets(eval_mask(mask_fn, t.s, t.a, n, m))
                if any(c not in sets for c in comps):
                    continue
            seen.add((tuple(t.s), tuple(t.a), tuple(t.s_next)))
    return len(seen)
