"""End-to-end orchestration: data, parent models, dynamics, augmentation, RL, evaluation."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core, dynamics, envs, parents, rl
from .lcm import ParentGraph

log = logging.getLogger(__name__)

TABLE_DISTS = ("emp", "dyna", "rand", "mocoda", "mocoda_u")
PARENT_DISTS = ("emp", "rand", "dyna", "mocoda", "mocoda_u", "mocoda_p")
GEN_TAG = {"rand": "rand", "dyna": "dyna", "mocoda": "mocoda", "mocoda_u": "mocoda", "mocoda_p": "mocoda"}


def stream_seed(root: int, name: str) -> int:
    """Seed of the named stream; adding a stream never shifts another one."""
    ss = np.random.SeedSequence(root, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, np.uint32)[0])


def stream_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name))


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclass
class PipelineConfig:
    out_dir: str = "out"
    seed: int = 0
    # env
    env: envs.Nav2dConfig = field(default_factory=envs.Nav2dConfig)
    # data
    n_per_kind: int = 20000
    val_count: int = 5000
    # parent distributions
    dists: tuple = ("emp", "rand", "dyna", "mocoda", "mocoda_u")
    gmm_k: int = 32
    em_max_iter: int = 300
    em_tol: float = 1e-4
    target_total: int = 200000
    dyna_steps: int = 5
    proposal_factor: float = 4.0
    bandwidth: float = 0.05
    floor_u: float = 0.01
    floor_p: float = 0.05
    prio_band: float = 0.3           # Mocoda-P keeps |x - y| below this
    # dynamics
    archs: tuple = dynamics.ARCHS
    generator_arch: str = "local_factored"
    hyper: dynamics.Hyper = field(default_factory=dynamics.Hyper)
    shrink: float = 3.0
    eval_size: int = 10000
    # rl
    rl_dists: tuple = ("emp", "rand", "dyna", "mocoda", "mocoda_u")
    fqi: rl.FQIConfig = field(default_factory=rl.FQIConfig)
    episodes: int = 100

    def __post_init__(self):
        for d in self.dists + self.rl_dists:
            if d not in PARENT_DISTS:
                raise ValueError(f"unknown distribution {d!r}")
        missing = set(self.rl_dists) - set(self.dists)
        if missing:
            raise ValueError(f"rl dists {sorted(missing)} are not generated (add them to [parent] dists)")
        for a in self.archs:
            if a not in dynamics.ARCHS:
                raise ValueError(f"unknown arch {a!r}")
        if self.generator_arch not in self.archs:
            raise ValueError("generator_arch must be one of the trained archs")
        if self.target_total < 2 * self.n_per_kind:
            raise ValueError("target_total must be at least the empirical dataset size")

    # sections used for stage keys ------------------------------------------------
    def section(self, name: str) -> dict:
        env = dataclasses.asdict(self.env)
        if name == "data":
            return {"env": env, "n_per_kind": self.n_per_kind, "seed": self.seed}
        if name == "parent":
            return {"k": self.gmm_k, "em_max_iter": self.em_max_iter, "em_tol": self.em_tol,
                    "seed": self.seed}
        if name == "dynamics":
            return {"hyper": dataclasses.asdict(self.hyper), "val_count": self.val_count,
                    "seed": self.seed, "env": env}
        if name == "augment":
            return {k: getattr(self, k) for k in (
                "target_total", "dyna_steps", "proposal_factor", "bandwidth", "floor_u", "floor_p",
                "prio_band", "shrink", "seed", "generator_arch")} | {"env": env}
        if name == "eval_dynamics":
            return {"eval_size": self.eval_size, "seed": self.seed, "env": env}
        if name == "rl":
            return {"fqi": dataclasses.asdict(self.fqi), "episodes": self.episodes, "seed": self.seed,
                    "env": env}
        raise KeyError(name)

    # file format --------------------------------------------------------------------
    @classmethod
    def from_string(cls, text: str, base_dir: str | Path | None = None) -> "PipelineConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kw: dict = {}
        env_kw: dict = {}
        if cp.has_section("env"):
            e = cp["env"]
            name = e.get("name", "nav2d")
            if name != "nav2d":
                raise ValueError(f"pipeline supports env 'nav2d' only, got {name!r}")
            for f in dataclasses.fields(envs.Nav2dConfig):
                if f.name in e:
                    raw = e[f.name]
                    if f.name == "coupling":
                        env_kw[f.name] = tuple(tuple(float(v) for v in row.split(","))
                                               for row in raw.split(";"))
                    elif f.name in ("goal", "start"):
                        env_kw[f.name] = tuple(float(v) for v in raw.split(","))
                    elif f.name in ("horizon", "traj_len"):
                        env_kw[f.name] = int(raw)
                    else:
                        env_kw[f.name] = float(raw)
        kw["env"] = envs.Nav2dConfig(**env_kw)
        if cp.has_section("data"):
            d = cp["data"]
            kw.update(n_per_kind=d.getint("n_per_kind", 20000), val_count=d.getint("val_count", 5000),
                      seed=d.getint("seed", 0))
        if cp.has_section("parent"):
            p = cp["parent"]
            kw.update(
                dists=_csv_list(p.get("dists", ",".join(cls.dists))),
                gmm_k=p.getint("k", 32), em_max_iter=p.getint("em_max_iter", 300),
                em_tol=p.getfloat("em_tol", 1e-4), target_total=p.getint("target_total", 200000),
                dyna_steps=p.getint("dyna_steps", 5), proposal_factor=p.getfloat("proposal_factor", 4.0),
                bandwidth=p.getfloat("bandwidth", 0.05), floor_u=p.getfloat("floor_u", 0.01),
                floor_p=p.getfloat("floor_p", 0.05), prio_band=p.getfloat("prio_band", 0.3))
        if cp.has_section("dynamics"):
            d = cp["dynamics"]
            kw.update(archs=_csv_list(d.get("archs", ",".join(dynamics.ARCHS))),
                      generator_arch=d.get("generator_arch", "local_factored"),
                      shrink=d.getfloat("shrink", 3.0), eval_size=d.getint("eval_size", 10000))
            hk = {}
            for f in dataclasses.fields(dynamics.Hyper):
                if f.name in d:
                    hk[f.name] = d[f.name] if f.name == "dtype" else type(f.default)(d[f.name])
            kw["hyper"] = dynamics.Hyper(**hk)
        if cp.has_section("rl"):
            r = cp["rl"]
            kw.update(rl_dists=_csv_list(r.get("dists", ",".join(cls.rl_dists))),
                      episodes=r.getint("episodes", 100))
            fk = {}
            for f in dataclasses.fields(rl.FQIConfig):
                if f.name in r:
                    fk[f.name] = type(f.default)(r[f.name])
            if "bc" in r:
                fk["bc_weight"] = r.getfloat("bc")
            kw["fqi"] = rl.FQIConfig(**fk)
        if cp.has_section("output"):
            out = cp["output"].get("dir", "out")
            if base_dir is not None and not Path(out).is_absolute():
                out = str(Path(base_dir) / out)
            kw["out_dir"] = out
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_string(path.read_text(), base_dir=path.parent)

    def to_string(self) -> str:
        cp = configparser.ConfigParser()
        e = self.env
        cp["env"] = {"name": "nav2d", "step_scale": repr(e.step_scale),
                     "coupling": ";".join(",".join(repr(float(v)) for v in row) for row in e.coupling),
                     "goal": ",".join(repr(float(v)) for v in e.goal), "goal_radius": repr(e.goal_radius),
                     "transition_noise": repr(e.transition_noise),
                     "start": ",".join(repr(float(v)) for v in e.start), "horizon": str(e.horizon),
                     "band_height": repr(e.band_height), "band_width": repr(e.band_width),
                     "heading_spread": repr(e.heading_spread), "action_noise": repr(e.action_noise),
                     "traj_len": str(e.traj_len)}
        cp["data"] = {"n_per_kind": str(self.n_per_kind), "val_count": str(self.val_count),
                      "seed": str(self.seed)}
        cp["parent"] = {"dists": ", ".join(self.dists), "k": str(self.gmm_k),
                        "em_max_iter": str(self.em_max_iter), "em_tol": repr(self.em_tol),
                        "target_total": str(self.target_total), "dyna_steps": str(self.dyna_steps),
                        "proposal_factor": repr(self.proposal_factor), "bandwidth": repr(self.bandwidth),
                        "floor_u": repr(self.floor_u), "floor_p": repr(self.floor_p),
                        "prio_band": repr(self.prio_band)}
        dyn = {"archs": ", ".join(self.archs), "generator_arch": self.generator_arch,
               "shrink": repr(self.shrink), "eval_size": str(self.eval_size)}
        dyn.update({k: str(v) for k, v in dataclasses.asdict(self.hyper).items()})
        cp["dynamics"] = dyn
        r = {"dists": ", ".join(self.rl_dists), "episodes": str(self.episodes)}
        r.update({k: str(v) for k, v in dataclasses.asdict(self.fqi).items()})
        cp["rl"] = r
        cp["output"] = {"dir": self.out_dir}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


# -- hashing and manifest ----------------------------------------------------------------

def file_hash(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    h.update(p.read_bytes())
    side = Path(str(p) + ".json")
    if side.exists() and p.suffix == ".bin":
        h.update(side.read_bytes())
    return h.hexdigest()


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.previous = {}
        if path.exists():
            try:
                for st in json.loads(path.read_text()).get("stages", []):
                    self.previous[st["stage"]] = st
            except (json.JSONDecodeError, KeyError):
                self.previous = {}
        self.stages: list = []
        self.metrics: dict = {}
        self.ratios: dict = {}

    def cached(self, stage: str, key: str, out_dir: Path) -> dict | None:
        prev = self.previous.get(stage)
        if not prev or prev.get("key") != key or prev.get("status") != "ok":
            return None
        for name, h in prev["outputs"].items():
            p = out_dir / name
            if not p.exists() or file_hash(p) != h:
                return None
        return prev

    def to_json(self) -> str:
        return json.dumps({"stages": self.stages, "metrics": self.metrics, "ratios": self.ratios},
                          indent=1, sort_keys=True)


class StageFailed(RuntimeError):
    pass


class Runner:
    def __init__(self, cfg: PipelineConfig, force: bool = False):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.out / "manifest.json")
        self.force = force
        self.failed = False

    def stage(self, name: str, section: dict, inputs: list[str], outputs: list[str], fn):
        """Run `fn()` unless an identical earlier run left matching outputs."""
        if self.failed:
            self.manifest.stages.append({"stage": name, "status": "skipped"})
            return None
        in_hashes = {i: file_hash(self.out / i) for i in inputs}
        key = _key({"section": section, "inputs": in_hashes})
        prev = None if self.force else self.manifest.cached(name, key, self.out)
        t0 = time.perf_counter()
        entry = {"stage": name, "key": key, "inputs": in_hashes}
        if prev is not None:
            log.info("stage %s: cached", name)
            entry.update(outputs=prev["outputs"], status="ok", cached=True,
                         wall_time=prev.get("wall_time", 0.0), metrics=prev.get("metrics"))
            self.manifest.stages.append(entry)
            return prev.get("metrics")
        log.info("stage %s: running", name)
        try:
            metrics = fn()
        except Exception as e:  # recorded, downstream stages skipped
            log.exception("stage %s failed", name)
            entry.update(status="failed", error=f"{type(e).__name__}: {e}",
                         wall_time=time.perf_counter() - t0, outputs={})
            self.manifest.stages.append(entry)
            self.failed = True
            return None
        entry.update(status="ok", cached=False, wall_time=time.perf_counter() - t0,
                     outputs={o: file_hash(self.out / o) for o in outputs}, metrics=metrics)
        self.manifest.stages.append(entry)
        return metrics


# -- stage bodies ---------------------------------------------------------------------------

NAV_GRAPH = ParentGraph(envs.NAV2D_PARENTS)


def _reward(s, a, sp, env):
    return envs.nav2d_reward(s, a, sp, env)


def _clip_rows(rows: np.ndarray, spec: core.FactorSpec) -> np.ndarray:
    b = np.array(spec.bounds)
    return np.clip(rows, b[:, 0], b[:, 1])


_MAX_ROUNDS = 8


def diagonal_filter(band: float):
    return lambda rows: np.abs(rows[:, 0] - rows[:, 1]) < band


def sample_parents(cfg: PipelineConfig, dist: str, n: int, emp: core.Dataset,
                   models: parents.ParentModels | None, generator, rng) -> parents.ParentSamples:
    spec = emp.spec
    if dist == "emp":
        idx = np.arange(n) % len(emp)
        return parents.ParentSamples(emp.sa[idx], "emp", spec)
    if dist == "rand":
        return parents.sample_rand(spec, n, rng)
    if dist == "dyna":
        step = lambda s, a: dynamics.sample_next(generator, s, a, shrink=cfg.shrink, rng=rng)
        n_starts = int(np.ceil(n / cfg.dyna_steps))
        ps = parents.sample_dyna(emp, step, cfg.dyna_steps, rng, n_starts=n_starts)
        return ps.subset(np.arange(min(n, len(ps))))
    if dist == "mocoda":
        ps = parents.sample_mocoda(models, spec, n, rng)
        return parents.ParentSamples(_clip_rows(ps.rows, spec), "mocoda", spec)
    # thinning keeps roughly the target, so top up with fresh proposals until n rows exist
    fmap = lambda x: x[:, :spec.state_dim]
    parts, have = [], 0
    for _ in range(_MAX_ROUNDS):
        need = n - have
        ps = parents.sample_mocoda(models, spec, int(np.ceil(cfg.proposal_factor * need)) + 1, rng)
        ps = parents.ParentSamples(_clip_rows(ps.rows, spec), "mocoda", spec)
        if dist == "mocoda_u":
            got = parents.prune_to_uniform(ps, fmap, cfg.bandwidth, need, cfg.floor_u, rng)
        else:
            got = parents.prune_prioritized(ps, fmap, diagonal_filter(cfg.prio_band), cfg.bandwidth, need,
                                            rng, cfg.floor_p)
        parts.append(got.rows)
        have += len(got)
        if have >= n:
            break
    rows = np.concatenate(parts)[:n]
    return parents.ParentSamples(rows, dist, spec)


def label_with_model(ps: parents.ParentSamples, model, shrink: float, rng, env, tag: str) -> core.Dataset:
    sp = dynamics.sample_next(model, ps.s, ps.a, shrink=shrink, rng=rng)
    return core.from_arrays(ps.spec, ps.s, ps.a, sp, _reward(ps.s, ps.a, sp, env), tag=tag)


def label_with_env(ps: parents.ParentSamples, env, rng) -> core.Dataset:
    sp = envs.nav2d_sample_next(ps.s, ps.a, env, rng)
    return core.from_arrays(ps.spec, ps.s, ps.a, sp, _reward(ps.s, ps.a, sp, env))


def run_pipeline(cfg: PipelineConfig, force: bool = False) -> dict:
    """Run every stage in order, reusing cached stages, and write manifest.json."""
    run = Runner(cfg, force)
    out, env, spec = run.out, cfg.env, envs.NAV2D_SPEC
    mask_fn = envs.Nav2dMask()
    state: dict = {}

    def emp():
        if "emp" not in state:
            state["emp"] = core.load_jsonl(spec, out / "emp.jsonl")
        return state["emp"]

    def gen_data():
        ds = envs.gen_emp_data(cfg.n_per_kind, stream_seed(cfg.seed, "data"), env)
        core.save_jsonl(ds, out / "emp.jsonl")
        return {"n": len(ds)}

    run.stage("gen-data", cfg.section("data"), [], ["emp.jsonl"], gen_data)

    def fit_parent():
        models = parents.fit_parent_models(emp().sa, NAV_GRAPH, cfg.gmm_k, stream_seed(cfg.seed, "parents"),
                                           max_iter=cfg.em_max_iter, tol=cfg.em_tol)
        (out / "parents.json").write_text(models.to_json())
        return {"components": [g.K for g in models.gmms]}

    run.stage("fit-parent", cfg.section("parent"), ["emp.jsonl"], ["parents.json"], fit_parent)

    for arch in cfg.archs:
        def train(arch=arch):
            ds = emp()
            tr, va = core.split_train_val(ds, cfg.val_count, stream_seed(cfg.seed, "split"))
            hyper = dataclasses.replace(cfg.hyper, seed=stream_seed(cfg.seed, f"dyn-{arch}") % 2 ** 31)
            m = dynamics.fit_regressor(tr, va, arch, mask_fn, hyper, NAV_GRAPH)
            m.save(out / f"dyn-{arch}.bin")
            return {"epochs": len(m.history), "best_val_nll": [float(v) for v in m.best_val_nll],
                    "failed": m.failed}

        run.stage(f"train-dynamics-{arch}", cfg.section("dynamics") | {"arch": arch}, ["emp.jsonl"],
                  [f"dyn-{arch}.bin"], train)

    gen_file = f"dyn-{cfg.generator_arch}.bin"
    n_real = 2 * cfg.n_per_kind
    n_gen = cfg.target_total - n_real
    for dist in cfg.dists:
        def augment(dist=dist):
            ds = emp()
            rng = stream_rng(cfg.seed, f"augment-{dist}")
            if dist == "emp":
                reps = int(np.ceil(cfg.target_total / len(ds)))
                aug = core.concat([ds] * reps).subset(np.arange(cfg.target_total))
            else:
                models = parents.ParentModels.from_json((out / "parents.json").read_text())
                gen = dynamics.RegressorEnsemble.load(out / gen_file, mask_fn)
                ps = sample_parents(cfg, dist, n_gen, ds, models, gen, rng)
                np.save(out / f"parents-{dist}.npy", ps.rows)
                aug = core.concat([ds, label_with_model(ps, gen, cfg.shrink, rng, env, GEN_TAG[dist])])
            core.save_jsonl(aug, out / f"aug-{dist}.jsonl")
            counts = aug.tag_counts()
            return {"tags": counts, "real": counts.get("real", 0),
                    "generated": len(aug) - counts.get("real", 0) if dist != "emp" else 0}

        inputs = ["emp.jsonl"] if dist == "emp" else ["emp.jsonl", "parents.json", gen_file]
        outputs = [f"aug-{dist}.jsonl"] + ([] if dist == "emp" else [f"parents-{dist}.npy"])
        m = run.stage(f"augment-{dist}", cfg.section("augment") | {"dist": dist}, inputs, outputs, augment)
        if m:
            run.manifest.ratios[dist] = {"real": m["real"], "augmented": m["generated"]}

    def eval_dyn():
        rng = stream_rng(cfg.seed, "eval-dynamics")
        sets = {}
        for dist in cfg.dists:
            if dist == "emp":
                fresh = envs.gen_emp_data(int(np.ceil(cfg.eval_size / 2)), stream_seed(cfg.seed, "emp-eval"), env)
                sets[dist] = fresh
            else:
                rows = np.load(out / f"parents-{dist}.npy")
                # rows are not exchangeable (dyna is step-major), so draw a random subset
                rows = rows[np.sort(rng.choice(len(rows), min(cfg.eval_size, len(rows)), replace=False))]
                sets[dist] = label_with_env(parents.ParentSamples(rows, "rand", spec), env, rng)
        table = {}
        for arch in cfg.archs:
            model = dynamics.RegressorEnsemble.load(out / f"dyn-{arch}.bin", mask_fn)
            table[arch] = {d: dynamics.eval_mse(model, s) for d, s in sets.items()}
        _write_csv(out / "results-dynamics.csv", ["arch"] + list(cfg.dists),
                   [[a] + [_fmt(table[a][d]) for d in cfg.dists] for a in cfg.archs])
        return {"mse": table}

    dyn_inputs = [f"dyn-{a}.bin" for a in cfg.archs] + [
        f"parents-{d}.npy" for d in cfg.dists if d != "emp"]
    m = run.stage("eval-dynamics", cfg.section("eval_dynamics"), dyn_inputs, ["results-dynamics.csv"], eval_dyn)
    if m:
        run.manifest.metrics["mse"] = m["mse"]

    rl_rows = {}
    for dist in cfg.rl_dists:
        def train_agent(dist=dist):
            ds = core.load_jsonl(spec, out / f"aug-{dist}.jsonl")
            fq = dataclasses.replace(cfg.fqi, seed=stream_seed(cfg.seed, f"agent-{dist}") % 2 ** 31)
            q = rl.fqi_train(ds, fq)
            q.save(out / f"q-{dist}.bin")
            ev = rl.evaluate(rl.greedy_policy(q), env, cfg.episodes, stream_seed(cfg.seed, f"eval-agent-{dist}"))
            return {k: v for k, v in ev.items() if k != "steps"}

        m = run.stage(f"train-agent-{dist}", cfg.section("rl") | {"dist": dist}, [f"aug-{dist}.jsonl"],
                      [f"q-{dist}.bin"], train_agent)
        if m:
            rl_rows[dist] = m
    if rl_rows:
        run.manifest.metrics["rl"] = rl_rows
        _write_csv(out / "results-rl.csv", ["agent"] + list(cfg.rl_dists),
                   [["fqi-bc"] + [_fmt(rl_rows[d]["mean_steps"]) if d in rl_rows else "" for d in cfg.rl_dists]])
    (out / "manifest.json").write_text(run.manifest.to_json())
    return json.loads(run.manifest.to_json())


def run_seeds(cfg: PipelineConfig, seeds, force: bool = False) -> list[dict]:
    """One pipeline per root seed, each under <out_dir>/seed-<k>."""
    out = []
    for s in seeds:
        sub = dataclasses.replace(cfg, seed=int(s), out_dir=str(Path(cfg.out_dir) / f"seed-{s}"))
        out.append(run_pipeline(sub, force))
    return out


def manifest_hashes(manifest: dict) -> dict:
    """Stage -> output hashes; the part of a manifest expected to be reproducible."""
    return {st["stage"]: st.get("outputs", {}) for st in manifest["stages"]}


# -- tables ----------------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".6g")


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def emit_tables(manifests: list[dict] | dict, out_dir, mse_scale: float = 100.0) -> list[Path]:
    """Aggregate per-seed manifests into mean/std tables plus raw per-seed rows.

    MSE values are reported multiplied by `mse_scale`.
    """
    if isinstance(manifests, dict):
        manifests = [manifests]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    archs, dists, rl_dists = [], [], []
    for m in manifests:
        for a, row in m.get("metrics", {}).get("mse", {}).items():
            archs += [a] if a not in archs else []
            dists += [d for d in row if d not in dists]
        rl_dists += [d for d in m.get("metrics", {}).get("rl", {}) if d not in rl_dists]

    order = TABLE_DISTS + ("mocoda_p",)
    dists = sorted(dists, key=order.index) or list(TABLE_DISTS)
    rl_dists = sorted(rl_dists, key=order.index)
    archs = sorted(archs, key=dynamics.ARCHS.index)
    rl_dists = rl_dists or list(TABLE_DISTS)
    raw_dyn, raw_rl = [], []
    for seed, m in enumerate(manifests):
        for a, row in m.get("metrics", {}).get("mse", {}).items():
            for d, v in row.items():
                raw_dyn.append([seed, a, d, _fmt(v * mse_scale)])
        for d, ev in m.get("metrics", {}).get("rl", {}).items():
            raw_rl.append([seed, "fqi-bc", d, _fmt(ev["mean_steps"]), _fmt(ev["success_rate"])])

    def cell(vals):
        if not vals:
            return ""
        return f"{np.mean(vals):.4g} +- {np.std(vals):.2g}"

    dyn_rows = []
    for a in archs:
        dyn_rows.append([a] + [cell([m["metrics"]["mse"][a][d] * mse_scale for m in manifests
                                     if d in m.get("metrics", {}).get("mse", {}).get(a, {})]) for d in dists])
    rl_rows = [["fqi-bc"] + [cell([m["metrics"]["rl"][d]["mean_steps"] for m in manifests
                                   if d in m.get("metrics", {}).get("rl", {})]) for d in rl_dists]] \
        if raw_rl else []
    paths = [out / "table-dynamics.csv", out / "table-rl.csv",
             out / "table-dynamics-raw.csv", out / "table-rl-raw.csv"]
    _write_csv(paths[0], ["arch"] + dists, dyn_rows)
    _write_csv(paths[1], ["agent"] + rl_dists, rl_rows)
    _write_csv(paths[2], ["seed", "arch", "dist", "mse_x100"], raw_dyn)
    _write_csv(paths[3], ["seed", "agent", "dist", "mean_steps", "success_rate"], raw_rl)
    return paths
