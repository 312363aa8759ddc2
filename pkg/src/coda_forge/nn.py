"""Small numpy MLP towers, vectorised over ensemble members and output groups.

Parameters are stored with a leading (member, group) pair of axes so one
`matmul` advances every member and every per-child tower at once.  Two input
stages exist:

* ``dense``: the first layer reads the raw (s, a) vector multiplied by a
  static 0/1 gate per group (all-ones gives an ordinary MLP; a parent-set
  indicator gives a globally factored tower).
* ``composer``: every input dim i gets its own one-layer ReLU embedding per
  group, the embeddings are multiplied by a per-sample 0/1 mask and summed
  before entering the tower (the masked composer).
"""
from __future__ import annotations

import numpy as np

PARAM_ORDER = ("Wc", "bc", "W1", "b1", "W2", "b2", "W3", "b3")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_tower(n_members: int, n_groups: int, in_dim: int, hidden: int, out_dim: int,
               composer: bool, seeds) -> dict:
    """Fan-in scaled uniform init; member e draws from its own seed."""
    shapes = {}
    if composer:
        shapes["Wc"] = (n_groups, in_dim, hidden), 1
        shapes["bc"] = (n_groups, in_dim, hidden), 1
        first_in = hidden
    else:
        first_in = in_dim
    shapes["W1"] = (n_groups, first_in, hidden), first_in
    shapes["b1"] = (n_groups, 1, hidden), first_in
    shapes["W2"] = (n_groups, hidden, hidden), hidden
    shapes["b2"] = (n_groups, 1, hidden), hidden
    shapes["W3"] = (n_groups, hidden, out_dim), hidden
    shapes["b3"] = (n_groups, 1, out_dim), hidden
    params = {k: np.empty((n_members,) + shp) for k, (shp, _) in shapes.items()}
    for e in range(n_members):
        rng = np.random.default_rng(int(seeds[e]))
        for k in PARAM_ORDER:
            if k in shapes:
                shp, fan_in = shapes[k]
                lim = 1.0 / np.sqrt(fan_in)
                params[k][e] = rng.uniform(-lim, lim, size=shp)
    return params


def forward(params: dict, x: np.ndarray, gate=None, mask=None):
    """x: (E, B, D).  gate: (G, D) static.  mask: (E, B, D, G) per-sample.

    Returns output (E, G, B, O) and a cache for `backward`.
    """
    cache = {"x": x}
    if "Wc" in params:
        # (E, G, B, D, H)
        pre = x[:, None, :, :, None] * params["Wc"][:, :, None] + params["bc"][:, :, None]
        emb = np.maximum(pre, 0.0)
        m = np.moveaxis(mask, -1, 1)[..., None].astype(x.dtype)      # (E, G, B, D, 1)
        z0 = (emb * m).sum(axis=3)
        cache.update(pre=pre, m=m)
    else:
        G = params["W1"].shape[1]
        g = np.ones((G, x.shape[-1])) if gate is None else gate
        z0 = x[:, None, :, :] * g.astype(x.dtype)[None, :, None, :]
    a1 = z0 @ params["W1"] + params["b1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params["W2"] + params["b2"]
    h2 = np.maximum(a2, 0.0)
    out = h2 @ params["W3"] + params["b3"]
    cache.update(z0=z0, h1=h1, h2=h2)
    return out, cache


def activation_pattern(cache) -> tuple:
    pats = [cache["h1"] > 0, cache["h2"] > 0]
    if "pre" in cache:
        pats.append(cache["pre"] > 0)
    return tuple(pats)


def backward(params: dict, cache: dict, dout: np.ndarray) -> dict:
    grads = {}
    h1, h2, z0 = cache["h1"], cache["h2"], cache["z0"]
    grads["W3"] = np.swapaxes(h2, -1, -2) @ dout
    grads["b3"] = dout.sum(axis=2, keepdims=True)
    da2 = (dout @ np.swapaxes(params["W3"], -1, -2)) * (h2 > 0)
    grads["W2"] = np.swapaxes(h1, -1, -2) @ da2
    grads["b2"] = da2.sum(axis=2, keepdims=True)
    da1 = (da2 @ np.swapaxes(params["W2"], -1, -2)) * (h1 > 0)
    grads["W1"] = np.swapaxes(z0, -1, -2) @ da1
    grads["b1"] = da1.sum(axis=2, keepdims=True)
    if "Wc" in params:
        dz0 = da1 @ np.swapaxes(params["W1"], -1, -2)              # (E, G, B, H)
        dpre = dz0[:, :, :, None, :] * cache["m"] * (cache["pre"] > 0)
        x = cache["x"]
        grads["Wc"] = (dpre * x[:, None, :, :, None]).sum(axis=2)
        grads["bc"] = dpre.sum(axis=2)
    return grads


# -- losses on the (E, G, B, O) output ----------------------------------------------

def gaussian_nll(out: np.ndarray, y: np.ndarray, var_floor: float):
    """Per-member mean Gaussian NLL (constant dropped) and its gradient.

    out: (E, G, B, 2k), first k are means, last k raw variances.  y: (E, G, B, k).
    """
    k = out.shape[-1] // 2
    mu, raw = out[..., :k], out[..., k:]
    var = softplus(raw) + var_floor
    err = y - mu
    n = err.shape[1] * err.shape[2] * err.shape[3]
    loss = 0.5 * (np.log(var) + err ** 2 / var)
    per_member = loss.sum(axis=(1, 2, 3)) / n
    dmu = -err / var / n
    dvar = 0.5 * (1.0 / var - err ** 2 / var ** 2) / n
    draw = dvar * sigmoid(raw)
    return per_member, np.concatenate([dmu, draw], axis=-1)


def mse(out: np.ndarray, y: np.ndarray, weight=None):
    err = out - y
    if weight is None:
        weight = np.ones_like(err)
    n = err.shape[1] * err.shape[2] * err.shape[3]
    per_member = (weight * err ** 2).sum(axis=(1, 2, 3)) / n
    return per_member, 2.0 * weight * err / n


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = np.full(next(iter(params.values())).shape[0], float(lr))
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            lr = self.lr.reshape((-1,) + (1,) * (g.ndim - 1))
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def select_member(params: dict, e: int) -> dict:
    return {k: v[e:e + 1].copy() for k, v in params.items()}


def numeric_grad_check(loss_fn, params: dict, eps: float = 1e-5, max_entries: int | None = None,
                       seed: int = 0) -> tuple[float, int]:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn(params)` returns (loss, grads, activation_pattern).  Entries whose
    +/- perturbation flips any ReLU are skipped (the loss is not
    differentiable there); the number skipped is returned alongside.
    """
    loss, grads, pattern = loss_fn(params)
    rng = np.random.default_rng(seed)
    worst, skipped = 0.0, 0
    for k in sorted(params):
        flat = params[k].reshape(-1)
        gflat = grads[k].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp, _, pat_p = loss_fn(params)
            flat[i] = old - eps
            lm, _, pat_m = loss_fn(params)
            flat[i] = old
            if any(not np.array_equal(p, q) for p, q in zip(pat_p, pattern)) or \
                    any(not np.array_equal(p, q) for p, q in zip(pat_m, pattern)):
                skipped += 1
                continue
            num = (lp - lm) / (2 * eps)
            ana = gflat[i]
            denom = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / denom)
    return worst, skipped


def save_tensors(path, arrays: dict, meta: dict) -> None:
    """Write arrays as one flat little-endian float64 file plus `<path>.json` describing them."""
    import json
    from pathlib import Path
    path = Path(path)
    manifest = dict(meta, tensors=[])
    blob = bytearray()
    for k, v in arrays.items():
        v = np.ascontiguousarray(v, dtype="<f8")
        manifest["tensors"].append({"name": k, "shape": list(v.shape), "offset": len(blob)})
        blob += v.tobytes()
    path.write_bytes(bytes(blob))
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_tensors(path) -> tuple[dict, dict]:
    import json
    from pathlib import Path
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    blob = path.read_bytes()
    arrays = {}
    for t in manifest.pop("tensors"):
        count = int(np.prod(t["shape"]))
        arrays[t["name"]] = np.frombuffer(blob, "<f8", count=count,
                                          offset=t["offset"]).reshape(t["shape"]).copy()
    return arrays, manifest
