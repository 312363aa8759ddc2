"""`coda-forge` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import coda, core, dynamics, envs, parents, pipeline, rl
from .lcm import ParentGraph

ARCH_ALIASES = {"none": "unfactored", "global": "global_factored", "local": "local_factored"}
ARCH_ALIASES.update({a: a for a in dynamics.ARCHS})


def _dist(name: str) -> str:
    d = name.replace("-", "_")
    if d not in pipeline.PARENT_DISTS:
        raise argparse.ArgumentTypeError(f"unknown distribution {name!r}")
    return d


def _arch(name: str) -> str:
    try:
        return ARCH_ALIASES[name]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown arch {name!r}") from None


def _env(args) -> envs.Nav2dConfig:
    if getattr(args, "env_config", None):
        return pipeline.PipelineConfig.from_file(args.env_config).env
    return envs.Nav2dConfig(transition_noise=getattr(args, "noise", 0.0))


def _load(path) -> core.Dataset:
    return core.load_jsonl(envs.NAV2D_SPEC, path)


def _write_rows(path, header: list, rows: list) -> None:
    pipeline._write_csv(Path(path), header, rows)


# -- subcommands -----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.env != "nav2d":
        raise SystemExit(f"gen-data supports --env nav2d only, got {args.env!r}")
    ds = envs.gen_emp_data(args.n_per_kind, args.seed, _env(args))
    core.save_jsonl(ds, args.out)
    print(f"wrote {len(ds)} transitions to {args.out}")
    return 0


def cmd_augment_coda(args) -> int:
    env = _env(args)
    ds = _load(args.inp)
    reward = lambda s, a, sp: envs.nav2d_reward(s, a, sp, env)
    out = coda.amplify(ds, envs.Nav2dMask(), reward, pair_budget=args.pairs, per_pair=args.per_pair,
                       max_ratio=args.max_ratio, seed=args.seed, region_aware=not args.no_region_check)
    core.save_jsonl(out, args.out)
    print(json.dumps(out.tag_counts()))
    return 0


def cmd_fit_parent(args) -> int:
    graph = ParentGraph.from_json(Path(args.graph).read_text()) if args.graph else ParentGraph(envs.NAV2D_PARENTS)
    ds = _load(args.inp)
    graph.validate(ds.spec.sa_dim)
    models = parents.fit_parent_models(ds.sa, graph, args.k, args.seed)
    Path(args.out).write_text(models.to_json())
    print(f"fit {len(models.gmms)} parent-set models -> {args.out}")
    return 0


def cmd_sample_parent(args) -> int:
    cfg = pipeline.PipelineConfig(env=_env(args))
    ds = _load(args.data)
    models = parents.ParentModels.from_json(Path(args.parents).read_text()) if args.parents else None
    if args.dist.startswith("mocoda") and models is None:
        raise SystemExit("--parents is required for mocoda distributions")
    gen = dynamics.RegressorEnsemble.load(args.model, envs.Nav2dMask()) if args.model else None
    if args.dist == "dyna" and gen is None:
        raise SystemExit("--model is required for dyna")
    ps = pipeline.sample_parents(cfg, args.dist, args.n, ds, models, gen, np.random.default_rng(args.seed))
    spec = ds.spec
    header = [f"s{i}" for i in range(spec.state_dim)] + [f"a{i}" for i in range(spec.action_dim)]
    _write_rows(args.out, header, [[core._fmt(v) for v in row] for row in ps.rows])
    print(f"wrote {len(ps)} {args.dist} parent rows to {args.out}")
    return 0


def cmd_train_dynamics(args) -> int:
    ds = _load(args.data)
    tr, va = core.split_train_val(ds, args.val_count, args.seed)
    hyper = dynamics.Hyper(width=args.width, lr=args.lr, batch=args.batch, epochs=args.epochs,
                           patience=args.patience, n_members=args.members, seed=args.seed)
    m = dynamics.fit_regressor(tr, va, args.arch, envs.Nav2dMask(), hyper, ParentGraph(envs.NAV2D_PARENTS))
    m.save(args.out)
    print(f"{args.arch}: {len(m.history)} epochs, best val NLL {np.round(m.best_val_nll, 4).tolist()}")
    return 0


def cmd_eval_dynamics(args) -> int:
    env = _env(args)
    cfg = pipeline.PipelineConfig(env=env)
    ds = _load(args.data)
    models = {}
    for path in args.model:
        m = dynamics.RegressorEnsemble.load(path, envs.Nav2dMask())
        models[m.arch] = m
    pm = parents.ParentModels.from_json(Path(args.parents).read_text()) if args.parents else None
    gen = models.get("local_factored", next(iter(models.values())))
    rng = np.random.default_rng(args.seed)
    sets = {}
    for d in args.dist:
        if d == "emp":
            sets[d] = envs.gen_emp_data(int(np.ceil(args.n / 2)), args.seed + 1, env)
        else:
            if d.startswith("mocoda") and pm is None:
                raise SystemExit("--parents is required for mocoda distributions")
            ps = pipeline.sample_parents(cfg, d, args.n, ds, pm, gen, rng)
            sets[d] = pipeline.label_with_env(ps, env, rng)
    rows = [[a] + [pipeline._fmt(dynamics.eval_mse(m, sets[d]) * 100) for d in args.dist]
            for a, m in models.items()]
    header = ["arch"] + [f"{d}_mse_x100" for d in args.dist]
    if args.out:
        _write_rows(args.out, header, rows)
    print(",".join(header))
    for r in rows:
        print(",".join(r))
    return 0


def cmd_train_agent(args) -> int:
    ds = _load(args.data)
    cfg = rl.FQIConfig(bc_weight=args.bc, gamma=args.gamma, iters=args.iters, seed=args.seed,
                       grid_res=args.grid_res)
    q = rl.fqi_train(ds, cfg)
    q.save(args.out)
    print(f"trained FQI-BC on {len(ds)} transitions -> {args.out}")
    return 0


def cmd_eval_agent(args) -> int:
    q = rl.QApprox.load(args.q)
    ev = rl.evaluate(rl.greedy_policy(q), _env(args), args.episodes, args.seed)
    header = ["agent", "dist", "mean_steps", "std_steps", "success_rate", "in_band_fraction"]
    row = ["fqi-bc", args.label, *(pipeline._fmt(ev[k]) for k in header[2:])]
    print(",".join(header))
    print(",".join(row))
    if args.out:
        _write_rows(args.out, header, [row])
    return 0


def cmd_run(args) -> int:
    cfg = pipeline.PipelineConfig.from_file(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    manifests = pipeline.run_seeds(cfg, seeds, force=args.force)
    paths = pipeline.emit_tables(manifests, cfg.out_dir)
    failed = [st["stage"] for m in manifests for st in m["stages"] if st.get("status") == "failed"]
    for p in paths:
        print(p)
    if failed:
        print("failed stages: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coda-forge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def env_args(sp):
        sp.add_argument("--noise", type=float, default=0.0, help="transition noise std")
        sp.add_argument("--env-config", help="pipeline config whose [env] section to use")

    g = sub.add_parser("gen-data", help="generate the empirical 2D navigation dataset")
    g.add_argument("--env", default="nav2d")
    g.add_argument("--n-per-kind", type=int, default=20000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    env_args(g)
    g.set_defaults(fn=cmd_gen_data)

    aug = sub.add_parser("augment", help="counterfactual augmentation")
    asub = aug.add_subparsers(dest="method", required=True)
    c = asub.add_parser("coda", help="component swaps between pairs of real transitions")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--pairs", type=int, default=2000)
    c.add_argument("--per-pair", type=int, default=2)
    c.add_argument("--max-ratio", type=float, default=3.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--no-region-check", action="store_true", help="accept on the source masks alone")
    env_args(c)
    c.set_defaults(fn=cmd_augment_coda)

    f = sub.add_parser("fit-parent", help="fit one GMM per parent set")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--graph", help="ParentGraph JSON (default: the 2D navigation graph)")
    f.add_argument("--k", type=int, default=32)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_fit_parent)

    s = sub.add_parser("sample-parent", help="sample (s, a) rows from a parent distribution")
    s.add_argument("--dist", type=_dist, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--data", required=True, help="empirical JSONL")
    s.add_argument("--parents", help="parent models JSON")
    s.add_argument("--model", help="dynamics checkpoint, used by dyna")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    env_args(s)
    s.set_defaults(fn=cmd_sample_parent)

    t = sub.add_parser("train-dynamics", help="train a dynamics ensemble")
    t.add_argument("--arch", type=_arch, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val-count", type=int, default=5000)
    t.add_argument("--width", type=int, default=256)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch", type=int, default=512)
    t.add_argument("--epochs", type=int, default=600)
    t.add_argument("--patience", type=int, default=50)
    t.add_argument("--members", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train_dynamics)

    e = sub.add_parser("eval-dynamics", help="MSE of dynamics checkpoints per parent distribution")
    e.add_argument("--model", action="append", required=True)
    e.add_argument("--dist", type=lambda x: [_dist(d) for d in x.split(",")],
                   default=["emp", "dyna", "rand", "mocoda", "mocoda_u"])
    e.add_argument("--data", required=True, help="empirical JSONL (dyna start states)")
    e.add_argument("--parents", help="parent models JSON")
    e.add_argument("--n", type=int, default=10000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    env_args(e)
    e.set_defaults(fn=cmd_eval_dynamics)

    ta = sub.add_parser("train-agent", help="FQI with a behaviour penalty")
    ta.add_argument("--data", required=True)
    ta.add_argument("--bc", type=float, default=rl.FQIConfig.bc_weight)
    ta.add_argument("--gamma", type=float, default=0.98)
    ta.add_argument("--iters", type=int, default=80)
    ta.add_argument("--grid-res", type=int, default=9)
    ta.add_argument("--seed", type=int, default=0)
    ta.add_argument("--out", required=True)
    ta.set_defaults(fn=cmd_train_agent)

    ea = sub.add_parser("eval-agent", help="steps-to-goal of a trained agent")
    ea.add_argument("--q", required=True)
    ea.add_argument("--episodes", type=int, default=100)
    ea.add_argument("--seed", type=int, default=0)
    ea.add_argument("--label", default="", help="distribution column for the CSV row")
    ea.add_argument("--out")
    env_args(ea)
    ea.set_defaults(fn=cmd_eval_agent)

    r = sub.add_parser("run", help="run the full pipeline from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", help="comma-separated root seeds (default: [data] seed)")
    r.add_argument("--force", action="store_true", help="ignore cached stages")
    r.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
