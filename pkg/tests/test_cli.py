import csv

import numpy as np
import pytest

from coda_forge import core, dynamics, envs, rl
from coda_forge.cli import main
from coda_forge.parents import ParentModels


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--env", "nav2d", "--n-per-kind", "200", "--seed", "1",
                 "--noise", "0.01", "--out", str(d / "emp.jsonl")]) == 0
    return d


def test_gen_data_is_seeded(work, tmp_path):
    main(["gen-data", "--n-per-kind", "200", "--seed", "1", "--noise", "0.01", "--out", str(tmp_path / "b.jsonl")])
    assert (work / "emp.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    with pytest.raises(SystemExit):
        main(["gen-data", "--env", "pong", "--out", str(tmp_path / "x.jsonl")])


def test_augment_coda(work, capsys):
    out = work / "coda.jsonl"
    assert main(["augment", "coda", "--in", str(work / "emp.jsonl"), "--out", str(out),
                 "--pairs", "300", "--max-ratio", "1"]) == 0
    ds = core.load_jsonl(envs.NAV2D_SPEC, out)
    counts = ds.tag_counts()
    assert counts["real"] == 400 and 0 < counts.get("coda", 0) <= 400


def test_fit_and_sample_parents(work):
    models = work / "parents.json"
    assert main(["fit-parent", "--in", str(work / "emp.jsonl"), "--k", "3", "--out", str(models)]) == 0
    assert len(ParentModels.from_json(models.read_text()).gmms) == 2
    for dist in ("mocoda", "mocoda-u", "rand", "emp"):
        out = work / f"p-{dist}.csv"
        assert main(["sample-parent", "--dist", dist, "--n", "150", "--data", str(work / "emp.jsonl"),
                     "--parents", str(models), "--out", str(out)]) == 0
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["s0", "s1", "a0", "a1"] and len(rows) == 151
    with pytest.raises(SystemExit):
        main(["sample-parent", "--dist", "bogus", "--n", "5", "--data", "x", "--out", "y"])
    with pytest.raises(SystemExit):
        main(["sample-parent", "--dist", "dyna", "--n", "5", "--data", str(work / "emp.jsonl"),
              "--out", str(work / "d.csv")])


def test_dynamics_train_and_eval(work, capsys):
    paths = []
    for arch in ("none", "global", "local"):
        p = work / f"dyn-{arch}.bin"
        assert main(["train-dynamics", "--arch", arch, "--data", str(work / "emp.jsonl"), "--val-count", "100",
                     "--width", "8", "--epochs", "2", "--members", "2", "--out", str(p)]) == 0
        paths += ["--model", str(p)]
    assert dynamics.RegressorEnsemble.load(work / "dyn-local.bin", envs.Nav2dMask()).arch == "local_factored"
    main(["fit-parent", "--in", str(work / "emp.jsonl"), "--k", "2", "--out", str(work / "pm.json")])
    capsys.readouterr()
    assert main(["eval-dynamics", *paths, "--dist", "emp,rand,dyna,mocoda", "--data", str(work / "emp.jsonl"),
                 "--parents", str(work / "pm.json"), "--n", "200", "--noise", "0.01",
                 "--out", str(work / "mse.csv")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "arch,emp_mse_x100,rand_mse_x100,dyna_mse_x100,mocoda_mse_x100"
    assert [ln.split(",")[0] for ln in lines[1:]] == list(dynamics.ARCHS)
    assert all(float(v) >= 0 for ln in lines[1:] for v in ln.split(",")[1:])


def test_agent_train_and_eval(work, capsys):
    q = work / "q.bin"
    assert main(["train-agent", "--data", str(work / "emp.jsonl"), "--iters", "2", "--out", str(q)]) == 0
    assert rl.QApprox.load(q).bc_weight == rl.FQIConfig.bc_weight
    capsys.readouterr()
    assert main(["eval-agent", "--q", str(q), "--episodes", "4", "--label", "emp"]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    assert header.split(",")[:3] == ["agent", "dist", "mean_steps"]
    assert row.startswith("fqi-bc,emp,") and 1 <= float(row.split(",")[2]) <= 70


def test_run_subcommand(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("""
[data]
n_per_kind = 200
val_count = 100
[parent]
dists = emp, mocoda
k = 2
em_max_iter = 10
target_total = 800
[dynamics]
width = 8
epochs = 1
n_members = 2
eval_size = 100
[rl]
dists = emp, mocoda
iters = 1
subsample = 200
episodes = 2
[output]
dir = out
""")
    assert main(["run", "--config", str(cfg), "--seeds", "0,1"]) == 0
    for name in ("table-dynamics.csv", "table-rl.csv", "seed-0/manifest.json", "seed-1/manifest.json"):
        assert (tmp_path / "out" / name).exists()
    rows = list(csv.reader(open(tmp_path / "out" / "table-dynamics-raw.csv")))
    assert len(rows) == 1 + 2 * 3 * 2
    with pytest.raises(SystemExit):
        main(["train-dynamics", "--arch", "sideways", "--data", "x", "--out", "y"])
