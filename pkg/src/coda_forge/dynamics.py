"""Dynamics models: count-based tabular models and Gaussian regressor ensembles."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .core import Dataset, FactorSpec
from .lcm import MaskFunction, ParentGraph

log = logging.getLogger(__name__)

ARCHS = ("unfactored", "global_factored", "local_factored")


# -- tabular --------------------------------------------------------------------

def _mixed_radix(values: np.ndarray, sizes) -> np.ndarray:
    idx = np.zeros(len(values), dtype=np.int64)
    for col, c in enumerate(sizes):
        idx = idx * c + values[:, col].astype(np.int64)
    return idx


def _check_alphabet(sa: np.ndarray, alphabets) -> None:
    ok = (sa >= 0) & (sa < np.asarray(alphabets)) & (sa == np.round(sa))
    if not ok.all():
        row, col = np.argwhere(~ok)[0]
        raise ValueError(f"row {row}: value {sa[row, col]} outside alphabet of dim {col}")


@dataclass
class TabularFactoredModel:
    """Per-child counts over (parent configuration, child value)."""

    graph: ParentGraph
    alphabets: tuple[int, ...]     # per (s, a) dim
    counts: list                   # per child: int array (n_configs, |c_i|)

    @property
    def n_state(self) -> int:
        return len(self.graph)

    def conditionals(self, sa: np.ndarray) -> list[np.ndarray]:
        """Per child, (rows, |c_i|) predictive distributions; unvisited configs are uniform."""
        sa = np.atleast_2d(np.asarray(sa, float))
        out = []
        for ps, cnt in zip(self.graph.parent_sets, self.counts):
            rows = cnt[_mixed_radix(sa[:, list(ps)], [self.alphabets[d] for d in ps])]
            tot = rows.sum(axis=1, keepdims=True)
            uniform = np.full_like(rows, 1.0 / rows.shape[1], dtype=float)
            out.append(np.where(tot > 0, rows / np.maximum(tot, 1), uniform))
        return out

    def joint(self, sa: np.ndarray) -> np.ndarray:
        """(rows, |S|) product of the per-child conditionals, row-major over children."""
        probs = self.conditionals(sa)
        out = probs[0]
        for p in probs[1:]:
            out = (out[:, :, None] * p[:, None, :]).reshape(len(out), -1)
        return out

    def to_json(self) -> str:
        return json.dumps({"graph": json.loads(self.graph.to_json()), "alphabets": list(self.alphabets),
                           "counts": [c.tolist() for c in self.counts]})

    @classmethod
    def from_json(cls, text: str) -> "TabularFactoredModel":
        d = json.loads(text)
        return cls(ParentGraph(tuple(tuple(p) for p in d["graph"]["parent_sets"])),
                   tuple(d["alphabets"]), [np.array(c, dtype=np.int64) for c in d["counts"]])


def fit_count_model(ds: Dataset, graph: ParentGraph, alphabets) -> TabularFactoredModel:
    alphabets = tuple(int(c) for c in alphabets)
    n = ds.spec.state_dim
    graph.validate(len(alphabets))
    sa = ds.sa
    _check_alphabet(sa, alphabets)
    _check_alphabet(ds.s_next, alphabets[:n])
    counts = []
    for j, ps in enumerate(graph.parent_sets):
        n_cfg = int(np.prod([alphabets[d] for d in ps]))
        cfg = _mixed_radix(sa[:, list(ps)], [alphabets[d] for d in ps])
        cnt = np.zeros((n_cfg, alphabets[j]), dtype=np.int64)
        np.add.at(cnt, (cfg, ds.s_next[:, j].astype(np.int64)), 1)
        counts.append(cnt)
    return TabularFactoredModel(graph, alphabets, counts)


@dataclass
class JointCountModel:
    """Unfactored count model over whole (s, a) -> s' tables."""

    alphabets: tuple[int, ...]
    n_state: int
    counts: np.ndarray             # (|S||A|, |S|)

    def joint(self, sa: np.ndarray) -> np.ndarray:
        sa = np.atleast_2d(np.asarray(sa, float))
        rows = self.counts[_mixed_radix(sa, self.alphabets)]
        tot = rows.sum(axis=1, keepdims=True)
        return np.where(tot > 0, rows / np.maximum(tot, 1), 1.0 / rows.shape[1])


def fit_joint_count_model(ds: Dataset, alphabets) -> JointCountModel:
    alphabets = tuple(int(c) for c in alphabets)
    n = ds.spec.state_dim
    sa = ds.sa
    _check_alphabet(sa, alphabets)
    _check_alphabet(ds.s_next, alphabets[:n])
    n_sa = int(np.prod(alphabets))
    n_s = int(np.prod(alphabets[:n]))
    counts = np.zeros((n_sa, n_s), dtype=np.int64)
    np.add.at(counts, (_mixed_radix(sa, alphabets), _mixed_radix(ds.s_next, alphabets[:n])), 1)
    return JointCountModel(alphabets, n, counts)


@dataclass
class L1Report:
    max_l1: float
    argmax: tuple                  # (state index, action index)
    per_child_max: list            # per child, max over (s, a) of its conditional l1 error
    per_child_bound: float         # sum of per_child_max; bounds max_l1 for product models


def max_l1_error(model, true_P: np.ndarray, alphabets, true_conditionals=None) -> L1Report:
    """Exact max over all (s, a) of || P(.|s, a) - P_model(.|s, a) ||_1.

    `true_P` has shape (|S|, |A|, |S|) in row-major factor order.  For a
    factored model, `true_conditionals` (per child, a callable sa -> (rows, |c_i|))
    enables the per-child decomposition report.
    """
    alphabets = tuple(int(c) for c in alphabets)
    n_s, n_a = true_P.shape[0], true_P.shape[1]
    grid = np.array(list(itertools.product(*[range(c) for c in alphabets])), dtype=float)
    pred = model.joint(grid).reshape(n_s, n_a, -1)
    l1 = np.abs(pred - true_P).sum(axis=2)
    arg = np.unravel_index(int(np.argmax(l1)), l1.shape)
    per_child = []
    if true_conditionals is not None and hasattr(model, "conditionals"):
        for p_hat, p_true in zip(model.conditionals(grid), true_conditionals):
            per_child.append(float(np.abs(p_hat - p_true(grid)).sum(axis=1).max()))
    return L1Report(float(l1.max()), (int(arg[0]), int(arg[1])), per_child, float(sum(per_child)))


# -- regressor ensembles -------------------------------------------------------------

@dataclass
class Hyper:
    layers: int = 2
    width: int = 256
    lr: float = 1e-4
    batch: int = 512
    epochs: int = 600
    patience: int = 50
    n_members: int = 5
    seed: int = 0
    var_floor: float = 1e-8
    dtype: str = "float32"       # training precision; gradient checks always use float64

    def __post_init__(self):
        if self.layers != 2:
            raise ValueError("towers have exactly two hidden layers")


def dim_mask(factor_mask: np.ndarray, spec: FactorSpec) -> np.ndarray:
    """Expand (..., factors, state factors) masks to (..., sa dims, state dims)."""
    fod = spec.factor_of_dim()
    return factor_mask[..., fod[:, None], fod[None, :spec.state_dim]]


def batch_masks(mask_fn: MaskFunction, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    if hasattr(mask_fn, "batch"):
        return np.asarray(mask_fn.batch(s, a), dtype=np.int8)
    return np.stack([mask_fn(si, ai) for si, ai in zip(s, a)]).astype(np.int8)


@dataclass
class RegressorEnsemble:
    arch: str
    spec: FactorSpec
    hyper: Hyper
    params: dict
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    gate: np.ndarray | None = None           # (children, sa_dim), global arch
    mask_fn: MaskFunction | None = None
    history: list = field(default_factory=list)   # per epoch: per-member val NLL
    failed: list = field(default_factory=list)

    @property
    def n_members(self) -> int:
        return self.params["W1"].shape[0]

    # structure ------------------------------------------------------------
    def masks_for(self, s, a) -> np.ndarray | None:
        """(B, sa_dim, n) per-sample dim-level mask for the local arch."""
        if self.arch != "local_factored":
            return None
        return dim_mask(batch_masks(self.mask_fn, s, a), self.spec)

    def residual_gate(self, mask: np.ndarray | None, B: int) -> np.ndarray:
        """(B, n) 1 where the target is s' - s rather than s'."""
        n = self.spec.state_dim
        if self.arch == "unfactored":
            return np.ones((B, n))
        if self.arch == "global_factored":
            return np.broadcast_to(np.diag(self.gate[:, :n]), (B, n)).astype(float)
        return np.diagonal(mask[:, :n, :], axis1=1, axis2=2).astype(float)

    # forward ---------------------------------------------------------------
    def _x(self, s, a) -> np.ndarray:
        return (np.concatenate([s, a], axis=1) - self.x_mean) / self.x_std

    def raw_forward(self, params, x, mask):
        """Standardised (mean, raw variance) each shaped (E, B, n)."""
        E = params["W1"].shape[0]
        xe = np.broadcast_to(x, (E,) + x.shape) if x.ndim == 2 else x
        me = None
        if mask is not None:
            me = np.broadcast_to(mask, (E,) + mask.shape) if mask.ndim == 3 else mask
        out, cache = nn.forward(params, xe, gate=self.gate, mask=me)
        return out, cache

    def split_out(self, out: np.ndarray):
        n = self.spec.state_dim
        if self.arch == "unfactored":
            return out[:, 0, :, :n], out[:, 0, :, n:]
        return np.moveaxis(out[..., 0], 1, 2), np.moveaxis(out[..., 1], 1, 2)

    def predict(self, s, a, mask=None):
        """Per-member mean and variance of s' in state units, each (E, B, n)."""
        s = np.atleast_2d(np.asarray(s, float))
        a = np.atleast_2d(np.asarray(a, float))
        if mask is None:
            mask = self.masks_for(s, a)
        dt = self.params["W1"].dtype
        out, _ = self.raw_forward(self.params, self._x(s, a).astype(dt), mask)
        mu, raw = self.split_out(out.astype(float))
        var = nn.softplus(raw) + self.hyper.var_floor
        gate = self.residual_gate(mask, len(s))
        mean = mu * self.y_std + self.y_mean + gate * s
        return mean, var * self.y_std ** 2

    # persistence -------------------------------------------------------------
    def save(self, path) -> None:
        """Flat tensor file plus a JSON manifest beside it."""
        arrays = {k: self.params[k] for k in nn.PARAM_ORDER if k in self.params}
        arrays.update(x_mean=self.x_mean, x_std=self.x_std, y_mean=self.y_mean, y_std=self.y_std)
        if self.gate is not None:
            arrays["gate"] = self.gate
        nn.save_tensors(path, arrays, {"arch": self.arch, "spec": json.loads(self.spec.to_json()),
                                       "hyper": asdict(self.hyper), "failed": self.failed})

    @classmethod
    def load(cls, path, mask_fn: MaskFunction | None = None) -> "RegressorEnsemble":
        arrays, meta = nn.load_tensors(path)
        hyper = Hyper(**meta["hyper"])
        params = {k: arrays.pop(k).astype(hyper.dtype) for k in nn.PARAM_ORDER if k in arrays}
        return cls(meta["arch"], FactorSpec.from_json(json.dumps(meta["spec"])), hyper, params,
                   arrays["x_mean"], arrays["x_std"], arrays["y_mean"], arrays["y_std"],
                   arrays.get("gate"), mask_fn, failed=meta["failed"])


def _targets(model: RegressorEnsemble, ds: Dataset, mask) -> np.ndarray:
    return ds.s_next - model.residual_gate(mask, len(ds)) * ds.s


def _to_groups(model: RegressorEnsemble, y: np.ndarray) -> np.ndarray:
    """(E, B, n) -> the (E, G, B, k) layout of the network output."""
    if model.arch == "unfactored":
        return y[:, None]
    return np.moveaxis(y, 2, 1)[..., None]


def _group_out(model: RegressorEnsemble, mu, raw) -> np.ndarray:
    if model.arch == "unfactored":
        return np.concatenate([mu, raw], axis=-1)[:, None]
    return np.stack([np.moveaxis(mu, 1, 2), np.moveaxis(raw, 1, 2)], axis=-1)


def member_loss(model: RegressorEnsemble, params: dict, x, y, mask):
    """Per-member NLL on standardised targets and the parameter gradients."""
    out, cache = model.raw_forward(params, x, mask)
    loss, dout = nn.gaussian_nll(out, _to_groups(model, y), model.hyper.var_floor)
    return loss, nn.backward(params, cache, dout), cache


def _init(model_arch: str, spec: FactorSpec, hyper: Hyper, seeds) -> dict:
    n, d = spec.state_dim, spec.sa_dim
    if model_arch == "unfactored":
        return nn.init_tower(len(seeds), 1, d, hyper.width, 2 * n, False, seeds)
    return nn.init_tower(len(seeds), n, d, hyper.width, 2, model_arch == "local_factored", seeds)


def fit_regressor(train: Dataset, val: Dataset, arch: str, mask_fn: MaskFunction | None = None,
                  hyper: Hyper = Hyper(), graph: ParentGraph | None = None) -> RegressorEnsemble:
    """Train an ensemble by Gaussian NLL with early stopping on validation NLL.

    Member e is initialised and shuffled from seed `hyper.seed + e`.  A
    member whose loss or weights turn non-finite restarts once from scratch
    with a tenth of the learning rate; a second failure marks it failed and
    keeps its best checkpoint so far.
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; choose from {ARCHS}")
    spec = train.spec
    n, d = spec.state_dim, spec.sa_dim
    if arch == "local_factored" and mask_fn is None:
        raise ValueError("local_factored needs a mask function")
    if arch == "global_factored" and graph is None:
        raise ValueError("global_factored needs a parent graph")
    E = hyper.n_members
    seeds = [hyper.seed + e for e in range(E)]
    sa = train.sa
    x_mean, x_std = sa.mean(axis=0), sa.std(axis=0)
    x_std = np.where(x_std > 0, x_std, 1.0)
    gate = graph.indicator(d) if arch == "global_factored" else None
    model = RegressorEnsemble(arch, spec, hyper, _init(arch, spec, hyper, seeds), x_mean, x_std,
                              np.zeros(n), np.ones(n), gate, mask_fn)

    m_tr = model.masks_for(train.s, train.a)
    m_va = model.masks_for(val.s, val.a)
    y_tr = _targets(model, train, m_tr)
    model.y_mean = y_tr.mean(axis=0)
    std = y_tr.std(axis=0)
    model.y_std = np.where(std > 0, std, 1.0)
    y_tr = (y_tr - model.y_mean) / model.y_std
    y_va = (_targets(model, val, m_va) - model.y_mean) / model.y_std
    dt = np.dtype(hyper.dtype)
    x_tr, x_va = model._x(train.s, train.a).astype(dt), model._x(val.s, val.a).astype(dt)
    y_tr, y_va = y_tr.astype(dt), y_va.astype(dt)
    if m_tr is not None:
        m_tr, m_va = m_tr.astype(dt), m_va.astype(dt)
    model.params = {k: v.astype(dt) for k, v in model.params.items()}
    params = model.params
    opt = nn.Adam(params, hyper.lr)
    rngs = [np.random.default_rng(s) for s in seeds]
    restarted = np.zeros(E, bool)
    dead = np.zeros(E, bool)
    best = np.full(E, np.inf)
    best_params = {k: v.copy() for k, v in params.items()}
    since = np.zeros(E, int)
    N = len(train)
    for epoch in range(hyper.epochs):
        perms = np.stack([r.permutation(N) for r in rngs])
        for b in range(0, N, hyper.batch):
            idx = perms[:, b:b + hyper.batch]
            mb = None if m_tr is None else m_tr[idx]
            with np.errstate(all="ignore"):
                _, grads, _ = member_loss(model, params, x_tr[idx], y_tr[idx], mb)
                opt.step(params, grads)
        with np.errstate(all="ignore"):
            vloss = _val_nll(model, params, x_va, y_va, m_va)
        finite = np.isfinite(vloss) & np.array(
            [all(np.isfinite(v[e]).all() for v in params.values()) for e in range(E)])
        for e in np.nonzero(~finite & ~dead)[0]:
            if restarted[e]:
                log.warning("member %d diverged twice; keeping best checkpoint", e)
                dead[e] = True
                model.failed.append(int(e))
            else:
                log.warning("member %d diverged at epoch %d; restarting with lr/10", e, epoch)
                restarted[e] = True
                fresh = _init(arch, spec, hyper, [seeds[e]])
                fresh = {k: v.astype(dt) for k, v in fresh.items()}
                for k in params:
                    params[k][e] = fresh[k][0]
                    opt.m[k][e] = 0.0
                    opt.v[k][e] = 0.0
                opt.lr[e] /= 10.0
                since[e] = 0
        vloss = np.where(finite, vloss, np.inf)
        model.history.append(vloss.tolist())
        improved = (vloss < best) & ~dead
        for e in np.nonzero(improved)[0]:
            for k in params:
                best_params[k][e] = params[k][e]
        best = np.where(improved, vloss, best)
        since = np.where(improved, 0, since + 1)
        if np.all((since >= hyper.patience) | dead):
            break
        if dead.all():
            break
    if not np.isfinite(best).any():
        raise FloatingPointError("every ensemble member diverged")
    model.params = best_params
    model.best_val_nll = best
    return model


def _val_nll(model, params, x, y, mask, chunk: int = 4096) -> np.ndarray:
    tot = np.zeros(params["W1"].shape[0])
    for b in range(0, len(x), chunk):
        mb = None if mask is None else mask[b:b + chunk]
        out, _ = model.raw_forward(params, x[b:b + chunk], mb)
        loss, _ = nn.gaussian_nll(out, _to_groups(model, np.broadcast_to(
            y[b:b + chunk], (len(tot),) + y[b:b + chunk].shape)), model.hyper.var_floor)
        tot += loss * len(x[b:b + chunk])
    return tot / len(x)


def sample_next(model: RegressorEnsemble, s, a, mask=None, shrink: float = 3.0,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw s' from a uniformly chosen member with the predicted std divided by `shrink`."""
    rng = np.random.default_rng() if rng is None else rng
    s = np.atleast_2d(np.asarray(s, float))
    a = np.atleast_2d(np.asarray(a, float))
    mean, var = model.predict(s, a, mask)
    member = rng.integers(model.n_members, size=len(s))
    rows = np.arange(len(s))
    mu, sd = mean[member, rows], np.sqrt(var[member, rows])
    noise = rng.standard_normal(mu.shape)
    out = mu if np.isinf(shrink) else mu + sd / shrink * noise
    b = model.spec.state_bounds
    return np.clip(out, b[:, 0], b[:, 1])


def eval_mse(model: RegressorEnsemble, eval_set: Dataset, chunk: int = 8192) -> float:
    """MSE of clipped mean predictions, averaged over members, rows and dims."""
    b = model.spec.state_bounds
    tot = 0.0
    for i in range(0, len(eval_set), chunk):
        sl = slice(i, i + chunk)
        mean, _ = model.predict(eval_set.s[sl], eval_set.a[sl])
        mean = np.clip(mean, b[:, 0], b[:, 1])
        tot += float(((mean - eval_set.s_next[sl]) ** 2).mean(axis=(0, 2)).sum())
    return tot / len(eval_set)


def grad_check(model: RegressorEnsemble, member: int, probe: Dataset, eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error of backprop gradients against central differences.

    The loss is the member's NLL on `probe`.  Entries whose perturbation flips
    a ReLU are not compared (`model.last_grad_skipped` counts them).
    """
    params = {k: v.astype(float) for k, v in nn.select_member(model.params, member).items()}
    mask = model.masks_for(probe.s, probe.a)
    x = model._x(probe.s, probe.a)[None]
    y = ((_targets(model, probe, mask) - model.y_mean) / model.y_std)[None]
    me = None if mask is None else mask[None]

    def loss_fn(p):
        loss, grads, cache = member_loss(model, p, x, y, me)
        return float(loss[0]), grads, nn.activation_pattern(cache)

    worst, skipped = nn.numeric_grad_check(loss_fn, params, eps, max_entries, seed)
    model.last_grad_skipped = skipped
    return worst
