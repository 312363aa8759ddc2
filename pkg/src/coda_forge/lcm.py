"""Local causal structure: mask functions, components, independent sets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class MaskFunction:
    """Maps (s, a) to an (n+m) x n binary factor adjacency matrix.

    Rows index state factors then action factors at time t, columns index
    state factors at t+1.  `union` returns the mask of the local model on the
    union of the neighbourhoods of several points; the default ORs the
    pointwise masks, which is correct whenever the structural equations are
    shared across those neighbourhoods.  Environments where that fails
    override it.
    """

    def __init__(self, fn: Callable | None = None, n_state: int | None = None,
                 n_action: int | None = None):
        self._fn = fn
        self.n_state = n_state
        self.n_action = n_action

    def __call__(self, s, a) -> np.ndarray:
        if self._fn is None:
            raise NotImplementedError
        return np.asarray(self._fn(np.asarray(s, float), np.asarray(a, float)), dtype=np.int8)

    def union(self, points: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        out = None
        for s, a in points:
            m = self(s, a)
            out = m.copy() if out is None else np.maximum(out, m)
        return out


class ConstantMask(MaskFunction):
    def __init__(self, mask):
        mask = np.asarray(mask, dtype=np.int8)
        super().__init__(None, mask.shape[1], mask.shape[0] - mask.shape[1])
        self.mask = mask

    def __call__(self, s, a):
        return self.mask.copy()


def block_mask(n_components: int) -> np.ndarray:
    """Mask with state factor i and action factor i driving only next-state factor i."""
    eye = np.eye(n_components, dtype=np.int8)
    return np.vstack([eye, eye])


def eval_mask(mask_fn: MaskFunction, s, a, n_state: int | None = None,
              n_action: int | None = None) -> np.ndarray:
    m = np.asarray(mask_fn(s, a), dtype=np.int8)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    n_state = m.shape[1] if n_state is None else n_state
    n_action = m.shape[0] - m.shape[1] if n_action is None else n_action
    if m.shape != (n_state + n_action, n_state):
        raise ValueError(f"mask shape {m.shape} != {(n_state + n_action, n_state)}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask entries must be 0/1")
    return m


class UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller root wins so the structure is independent of merge order
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def groups(self) -> list[list[int]]:
        out: dict[int, list[int]] = {}
        for i in range(len(self.parent)):
            out.setdefault(self.find(i), []).append(i)
        return sorted(out.values(), key=lambda g: g[0])


@dataclass(frozen=True)
class ComponentPartition:
    components: tuple[frozenset, ...]
    factor_to_component: dict = field(compare=False, hash=False, default=None)

    def __post_init__(self):
        if self.factor_to_component is None:
            f2c = {f: i for i, c in enumerate(self.components) for f in c}
            object.__setattr__(self, "factor_to_component", f2c)

    def __len__(self):
        return len(self.components)

    def to_json(self) -> str:
        return json.dumps([sorted(c) for c in self.components])

    @classmethod
    def from_json(cls, text: str) -> "ComponentPartition":
        return cls(tuple(frozenset(c) for c in json.loads(text)))


def components(mask: np.ndarray) -> ComponentPartition:
    """Connected components of the local graph over state and action factors.

    State factor i at t and t+1 is one node; action factor j is node n+j and
    its (dummy) next-action column is identified with it.
    """
    mask = np.asarray(mask)
    uf = UnionFind(mask.shape[0])
    rows, cols = np.nonzero(mask)
    for r, c in zip(rows.tolist(), cols.tolist()):
        uf.union(r, c)
    return ComponentPartition(tuple(frozenset(g) for g in uf.groups()))


def independent_sets(p: ComponentPartition) -> list[frozenset]:
    """All unions of components except the empty and the full set, in binary-counter order."""
    comps = p.components
    c = len(comps)
    out = []
    for bits in range(1, 2 ** c - 1):
        out.append(frozenset().union(*(comps[k] for k in range(c) if bits >> k & 1)))
    return out


def mask_to_csv(mask: np.ndarray) -> str:
    return "\n".join(",".join(str(int(v)) for v in row) for row in np.asarray(mask)) + "\n"


def mask_from_csv(text: str) -> np.ndarray:
    return np.array([[int(v) for v in line.split(",")] for line in text.strip().splitlines()],
                    dtype=np.int8)


# -- ground-truth checks ---------------------------------------------------------

@dataclass
class JacobianMask:
    mask: np.ndarray
    one_sided: list[int]  # (s, a) dims where the probe hit a bound


def jacobian_mask(dynamics_fn, s, a, probe_eps: float = 1e-4, threshold: float = 1e-6,
                  bounds=None) -> JacobianMask:
    """Mask from finite-difference sensitivities of a deterministic step.

    Entry (i, j) is 1 iff |d s'_j / d x_i| > threshold, with x = (s, a).
    Dims are treated as factors (one dim per factor).
    """
    s = np.asarray(s, float)
    a = np.asarray(a, float)
    x = np.concatenate([s, a])
    n = len(s)
    jac = np.zeros((len(x), n))
    one_sided = []
    for i in range(len(x)):
        lo, hi = (-np.inf, np.inf) if bounds is None else bounds[i]
        up, down = x.copy(), x.copy()
        up[i] += probe_eps
        down[i] -= probe_eps
        h_up = h_down = probe_eps
        if up[i] > hi:
            up[i], h_up = x[i], 0.0
        if down[i] < lo:
            down[i], h_down = x[i], 0.0
        if h_up == 0.0 or h_down == 0.0:
            one_sided.append(i)
        f_up = np.asarray(dynamics_fn(up[:n], up[n:]), float)
        f_down = np.asarray(dynamics_fn(down[:n], down[n:]), float)
        jac[i] = (f_up - f_down) / (h_up + h_down)
    return JacobianMask((np.abs(jac) > threshold).astype(np.int8), one_sided)


@dataclass
class MinimalityReport:
    false_negatives: list = field(default_factory=list)  # (point, parent, child)
    unused_edges: dict = field(default_factory=dict)     # region key -> set of (parent, child)
    n_probes: int = 0

    @property
    def ok(self) -> bool:
        return not self.false_negatives


def verify_minimality(step_fn, mask_fn: MaskFunction, probe_grid: Sequence[np.ndarray],
                      n_state: int, region_fn=None, atol: float = 0.0) -> MinimalityReport:
    """Probe-pair check of a mask function against a true step function.

    `probe_grid` holds one 1-D array of probe values per (s, a) dim (one dim
    per factor).  Two probes that differ only in dim j and lie in the same
    local region (keyed by `region_fn`, default: equal masks) form a pair; if
    child i differs between them while the mask at a probe lacks the j -> i
    edge, that probe is a false negative.  Declared edges never exercised by
    any pair inside a region are reported as unused.
    """
    axes = [np.asarray(g, float) for g in probe_grid]
    d = len(axes)
    shape = tuple(len(g) for g in axes)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    steps = np.array([step_fn(p[:n_state], p[n_state:]) for p in pts]).reshape(shape + (n_state,))
    masks = np.array([mask_fn(p[:n_state], p[n_state:]) for p in pts]).reshape(shape + (d, n_state))
    raw_keys = [region_fn(p) if region_fn is not None else m.tobytes()
                for p, m in zip(pts, masks.reshape(-1, d, n_state))]
    key_ids = {k: i for i, k in enumerate(dict.fromkeys(raw_keys))}
    keys = np.array([key_ids[k] for k in raw_keys]).reshape(shape)

    report = MinimalityReport(n_probes=len(pts))
    exercised = np.zeros(shape + (d, n_state), dtype=bool)
    for j in range(d):
        st = np.moveaxis(steps, j, -2)            # (..., L, n)
        ky = np.moveaxis(keys, j, -1)             # (..., L)
        changed = np.abs(st[..., :, None, :] - st[..., None, :, :]) > atol   # (..., L, L, n)
        same = ky[..., :, None] == ky[..., None, :]
        hit = (changed & same[..., None]).any(axis=-2)                      # (..., L, n)
        exercised[..., j, :] = np.moveaxis(hit, -2, j)
    fn_flags = exercised & (masks == 0)
    for idx in zip(*np.nonzero(fn_flags)):
        point = tuple(axes[k][idx[k]] for k in range(d))
        report.false_negatives.append((point, int(idx[d]), int(idx[d + 1])))
    inv = {i: k for k, i in key_ids.items()}
    for kid in range(len(key_ids)):
        sel = keys == kid
        declared = masks[sel].any(axis=0)
        used = exercised[sel].any(axis=0)
        unused = declared & ~used
        if unused.any():
            report.unused_edges[inv[kid]] = {(int(a), int(b)) for a, b in zip(*np.nonzero(unused))}
    return report


@dataclass(frozen=True)
class ParentGraph:
    """Parent dims (over the concatenated (s, a) vector) of each next-state dim."""

    parent_sets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        sets = tuple(tuple(sorted(int(i) for i in ps)) for ps in self.parent_sets)
        object.__setattr__(self, "parent_sets", sets)
        for j, ps in enumerate(sets):
            if not ps:
                raise ValueError(f"child {j} has no parents")
            if len(set(ps)) != len(ps) or min(ps) < 0:
                raise ValueError(f"bad parent set for child {j}: {ps}")

    def __len__(self):
        return len(self.parent_sets)

    def validate(self, sa_dim: int) -> None:
        for j, ps in enumerate(self.parent_sets):
            if max(ps) >= sa_dim:
                raise ValueError(f"child {j}: parent index {max(ps)} >= {sa_dim}")

    def indicator(self, sa_dim: int) -> np.ndarray:
        """(children, sa_dim) 0/1 matrix."""
        self.validate(sa_dim)
        out = np.zeros((len(self), sa_dim))
        for j, ps in enumerate(self.parent_sets):
            out[j, list(ps)] = 1.0
        return out

    def to_json(self) -> str:
        return json.dumps({"parent_sets": [list(p) for p in self.parent_sets]})

    @classmethod
    def from_json(cls, text: str) -> "ParentGraph":
        return cls(tuple(tuple(p) for p in json.loads(text)["parent_sets"]))
